from .numerics import linear_solve, rk4_step, solve_qp, QpProblem, QpSolution
from .observer import (ChannelModel, EsoGains, EsoState, ExtendedStateObserver, continuous_gains,
                       discrete_gains, omega_to_discrete, eso_step_continuous, eso_step_discrete)
from .bounds import (DisturbanceBoundSpec, ErrorBoundSet, p_value, p_sum, gamma, transfer_l1,
                     phi_bound, assemble_error_bounds)
from .safety import (BarrierSpec, LyapunovSpec, RobustMode, DobState, ControlResult, psi_h,
                     hocbf_lift, esor_qp_control, nominal_cbf_qp_control, dob_update,
                     dob_cbf_control)
from .plants import (AccParams, SegwayParams, DisturbanceSignal, AccPlant, SegwayPlant,
                     acc_dynamics, acc_channels, segway_dynamics, segway_channels, segway_nominal)
from .config import ScenarioConfig, read_config, read_config_str, default_config
from .harness import (TrajectoryLog, Metrics, run_scenario, compute_metrics, sweep, export_csv,
                      verify_bounds)
