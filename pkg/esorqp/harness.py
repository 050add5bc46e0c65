"""Scenario orchestration: run the closed loop, score it and export it.

Each controller tick the harness

1. reads the measurements and the observer estimates,
2. solves the configured safety QP,
3. logs one row,
4. holds the input and integrates the plant, the continuous observers and
   the disturbance observer jointly over the tick's ``dt_sim`` sub-steps.

Integrating the observers together with the plant means they see the
measurement at every integration stage; discrete observers are updated once
per sub-step with that sub-step's sample.
"""
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
import csv
import logging
import math

import numpy as np

from .bounds import assemble_error_bounds, bounds_rows
from .config import build_plant, replace_path
from .numerics import rk4_step
from .observer import (EsoState, ExtendedStateObserver, continuous_gains, discrete_gains,
                       omega_to_discrete, operating_point)
from .safety import (RobustMode, barrier_value, dob_cbf_control, dob_derivative, dob_drift,
                     dob_init, dob_margin, dob_signal, effective_barrier, esor_qp_control,
                     nominal_cbf_qp_control)
from .utils import as_vector

logger = logging.getLogger(__name__)

FD_TOLERANCE = 1e-3
CONTAINMENT_SLACK = 1e-9

Scenario = namedtuple("Scenario",
                      ["config", "plant", "gains", "bounds", "barriers", "clf", "mode",
                       "weight", "dob_gain", "dob_margin"])
Scenario.__doc__ = """Everything a run needs, assembled once before the loop."""

Metrics = namedtuple("Metrics",
                     ["h_min", "h_mean", "violations", "tracking_rmse", "u_max",
                      "containment", "sufficiency", "infeasible", "clf_dropped", "psi_gap"])
Metrics.__doc__ = """Summary of a trajectory.

    ``containment`` is the fraction of post-transient samples with
    |f − f̂| <= γ on every channel and ``sufficiency`` the fraction with the
    finite-difference barrier derivative at or above Ψ. ``psi_gap`` is the
    mean of that derivative minus Ψ over the same samples.
"""

VerificationReport = namedtuple("VerificationReport",
                                ["containment", "sufficiency", "max_exceedance", "flagged"])
VerificationReport.__doc__ = """Result of :func:`verify_bounds`.

    ``flagged`` lists (t, check, name) triples for every failing sample,
    ``max_exceedance`` the largest (|f − f̂| − γ)/γ over the checked samples.
"""

SweepRow = namedtuple("SweepRow", ["value", "metrics", "gamma"])


class TrajectoryLog:
    """Rows of a closed-loop run under a fixed column schema.

    Every column holds floats except ``status``.
    """

    def __init__(self, columns, rows=None):
        self.columns = list(columns)
        self.index = {name: i for i, name in enumerate(self.columns)}
        self.rows = []
        for row in rows or []:
            self.append(row)

    def append(self, row):
        if len(row) != len(self.columns):
            raise ValueError(f"Row has {len(row)} values for {len(self.columns)} columns")
        self.rows.append(tuple(row))

    def column(self, name):
        i = self.index[name]
        if name == "status":
            return [row[i] for row in self.rows]
        return np.array([row[i] for row in self.rows], dtype=float)

    def names(self, prefix):
        """Column suffixes following ``prefix``, in schema order."""
        return [c[len(prefix):] for c in self.columns if c.startswith(prefix)]

    def __len__(self):
        return len(self.rows)


def observer_gains(cfg, channel):
    """The observer gains of a channel, or None when its disturbance is known."""
    if channel.known:
        return None
    observer = cfg.observer
    if observer.mode == "continuous":
        return continuous_gains(channel.order, observer.bandwidth)
    omega_d = observer.discrete_bandwidth
    if omega_d is None:
        omega_d = omega_to_discrete(observer.bandwidth, observer.sample_time)
    return discrete_gains(channel.order, omega_d, observer.sample_time)


def build_scenario(cfg):
    """Assemble plant, observer gains, error bounds and barrier specifications.

    Examples:
        >>> from esorqp.config import default_config
        >>> scenario = build_scenario(default_config("acc"))
        >>> scenario.gains[1] is None
        True
    """
    plant = build_plant(cfg)
    gains = [observer_gains(cfg, c) for c in plant.channels]
    input_box = list(zip(*plant.input_box))
    bounds = assemble_error_bounds(plant.channels, gains, plant.disturbance_bounds(),
                                   cfg.observer.sample_time, plant.field, plant.state_box,
                                   input_box, cfg.bounds.grid, cfg.observer.discrete_bandwidth)
    barriers = [plant.barrier(cfg.barrier.gain, cfg.barrier.alpha1, cfg.barrier.alpha2)]
    clf = plant.clf(cfg.clf.rate, cfg.clf.slack_penalty)
    weight = cfg.input_weight if cfg.input_weight is not None else plant.default_weight
    rate_bound = cfg.dob.rate_bound if cfg.dob.rate_bound is not None else plant.dob_rate_bound()
    return Scenario(cfg, plant, gains, bounds, barriers, clf, RobustMode(cfg.robust_mode),
                    weight, cfg.dob.gain, dob_margin(rate_bound, cfg.dob.gain))


def log_columns(scenario):
    """The column schema of a scenario's trajectory log."""
    plant = scenario.plant
    columns = ["t"]
    columns += [f"x_{name}" for name in plant.state_names]
    columns += [f"y_{plant.state_names[i]}" for i in plant.output_states]
    for channel in plant.channels:
        columns += [f"xhat_{channel.name}_{j}" for j in range(channel.order)]
    for prefix in ("fhat", "f", "gamma"):
        columns += [f"{prefix}_{channel.name}" for channel in plant.channels]
    columns += [f"u_{j}" for j in range(len(plant.input_box[0]))]
    for prefix in ("h", "heff", "psi", "dob"):
        columns += [f"{prefix}_{spec.name}" for spec in scenario.barriers]
    return columns + ["status", "slack", "track_err"]


def _estimates(observers):
    return [None if o is None else o.estimate for o in observers]


def _disturbance_estimates(plant, observers, t):
    known = plant.channel_disturbances(t)
    return [d if o is None else o.state.f_hat for o, d in zip(observers, known)]


def _true_disturbances(plant, x, u, t, point):
    """Total disturbance of each channel as the observers see it at ``point``."""
    values = []
    for channel, d in zip(plant.channels, plant.channel_disturbances(t)):
        mismatch = channel.drift(x) - channel.drift(point)
        mismatch += (channel.gain(x) - channel.gain(point)) * u[channel.control]
        values.append(d + mismatch)
    return values


def _control(scenario, x, observers, dobs, t):
    plant = scenario.plant
    cfg = scenario.config
    controller = cfg.controller
    common = dict(clf=scenario.clf, weight=scenario.weight, u_box=plant.input_box)
    if controller == "esor_qp":
        y = plant.measure(x)
        x_hat = operating_point(plant.channels, _estimates(observers), y)
        return esor_qp_control(plant, x_hat, _disturbance_estimates(plant, observers, t),
                               plant.nominal(x_hat, t), scenario.bounds, scenario.barriers,
                               mode=scenario.mode, **common)
    if controller == "true_d_qp":
        return nominal_cbf_qp_control(plant, x, plant.channel_disturbances(t),
                                      plant.nominal(x, t), scenario.barriers, **common)
    if controller == "nominal_qp":
        return nominal_cbf_qp_control(plant, x, plant.known_disturbances(t),
                                      plant.nominal(x, t), scenario.barriers, **common)
    if controller == "dob_cbf_qp":
        estimates = [dob.estimate(dob_signal(spec)[0](x)) for dob, spec in zip(dobs, scenario.barriers)]
        return dob_cbf_control(plant, x, estimates, plant.known_disturbances(t),
                               plant.nominal(x, t), scenario.barriers,
                               margins=[d.margin for d in dobs], **common)
    raise ValueError(f"Unknown controller: {controller}")


def _row(scenario, t, x, observers, dobs, result):
    plant = scenario.plant
    y = plant.measure(x)
    estimates = _estimates(observers)
    point = operating_point(plant.channels, estimates, y)
    u = as_vector(result.u, "input")
    row = [t] + list(x) + list(y)
    for channel, estimate in zip(plant.channels, estimates):
        row += list(point[list(channel.states)]) if estimate is None else list(estimate[:-1])
    row += _disturbance_estimates(plant, observers, t)
    row += _true_disturbances(plant, x, u, t, point)
    row += [b.gamma for b in scenario.bounds.channels]
    row += list(u)
    row += [barrier_value(spec, x) for spec in scenario.barriers]
    row += [float(effective_barrier(spec).value(x)) for spec in scenario.barriers]
    row += list(result.psi)
    row += [dob.estimate(dob_signal(spec)[0](x)) for dob, spec in zip(dobs, scenario.barriers)]
    row += [result.status, result.slack, plant.tracking_error(x, t)]
    return row


class _JointState:
    """Plant, continuous observers and disturbance observers in one vector.

    Slices, output indices and DOB signals are resolved once per run. The
    injected disturbances are cached for the last stage time.
    """

    def __init__(self, scenario, observers):
        self.scenario = scenario
        self.observers = observers
        plant = scenario.plant
        self.dimension = plant.dimension
        self.outputs = list(plant.output_states)
        self.known = [c.known for c in plant.channels]
        self.slices = []
        start = self.dimension
        for observer in observers:
            if observer is not None and observer.continuous:
                self.slices.append(slice(start, start + observer.channel.order + 1))
                start += observer.channel.order + 1
            else:
                self.slices.append(None)
        self.dob_start = start
        self.continuous = [(o, sl, o.channel.output, o.channel.control)
                           for o, sl in zip(observers, self.slices) if sl is not None]
        self.discrete = [o for o in observers if o is not None and not o.continuous]
        self.signals = [dob_signal(spec) for spec in scenario.barriers]
        self._time = None
        self._disturbances = None

    def pack(self, x, dobs):
        parts = [x]
        for observer, sl in zip(self.observers, self.slices):
            if sl is not None:
                parts.append(observer.estimate)
        parts.append([dob.z for dob in dobs])
        return np.concatenate(parts)

    def disturbances(self, t):
        """Injected total and known-only disturbances at time t."""
        if t != self._time:
            plant = self.scenario.plant
            values = plant.channel_disturbances(t)
            known = [d if k else 0.0 for d, k in zip(values, self.known)]
            self._disturbances = (plant.inject(values), plant.inject(known))
            self._time = t
        return self._disturbances

    def estimates(self, z):
        return [None if o is None else (z[sl] if sl is not None else o.estimate)
                for o, sl in zip(self.observers, self.slices)]

    def field(self, z, u, t, dobs):
        plant = self.scenario.plant
        x = z[:self.dimension]
        y = x[self.outputs]
        total, known = self.disturbances(t)
        forced = plant.field(x, u)
        parts = [forced + total]
        if self.continuous:
            point = operating_point(plant.channels, self.estimates(z), y)
            for observer, sl, output, control in self.continuous:
                parts.append(observer.derivative(z[sl], y[output], u[control], point))
        if dobs:
            observed = forced + known
            zs = z[self.dob_start:]
            parts.append([dob_derivative(zs[i], sigma(x), dob_drift(grad, x, observed), dob.gain)
                          for i, (dob, (sigma, grad)) in enumerate(zip(dobs, self.signals))])
        return np.concatenate(parts)


def _advance(joint, x, u, t, dt, dobs):
    """One sub-step: discrete observer updates, then one joint RK4 step."""
    plant = joint.scenario.plant
    if joint.discrete:
        y = plant.measure(x)
        point = operating_point(plant.channels, _estimates(joint.observers), y)
        for observer in joint.discrete:
            channel = observer.channel
            observer.step(y[channel.output], u[channel.control], point=point)
    z = rk4_step(lambda s, z: joint.field(z, u, s, dobs), joint.pack(x, dobs), t, dt)
    for observer, sl, _, _ in joint.continuous:
        observer.state = EsoState(z[sl], t + dt)
    dobs = [dob._replace(z=float(v)) for dob, v in zip(dobs, z[joint.dob_start:])]
    return z[:joint.dimension], dobs


def run_scenario(cfg, scenario=None):
    """Run a scenario's closed loop and return its TrajectoryLog.

    The log holds floor(horizon / dt_ctrl) + 1 rows, one per controller
    tick including t = 0.

    Exceptions:
        ModelDomain, NonFiniteDerivative: The run is aborted.
    """
    scenario = scenario or build_scenario(cfg)
    plant = scenario.plant
    n_ticks = int(math.floor(cfg.horizon / cfg.dt_ctrl + 1e-9))
    sub_steps = int(round(cfg.dt_ctrl / cfg.dt_sim))
    x = as_vector(cfg.initial_state, "initial state")
    y = plant.measure(x)
    observers = [None if g is None else ExtendedStateObserver(c, g, y[c.output])
                 for c, g in zip(plant.channels, scenario.gains)]
    dobs = [dob_init(dob_signal(spec)[0](x), scenario.dob_gain, scenario.dob_margin)
            for spec in scenario.barriers]
    joint = _JointState(scenario, observers)
    log = TrajectoryLog(log_columns(scenario))
    warned = set()
    logger.info("Running %s with %s for %.3g s (%d ticks)", plant.name, cfg.controller,
                cfg.horizon, n_ticks)
    for k in range(n_ticks + 1):
        t = k * cfg.dt_ctrl
        result = _control(scenario, x, observers, dobs, t)
        if result.status != "optimal":
            if result.status not in warned:
                logger.warning("QP status %s at t = %.4f s", result.status, t)
                warned.add(result.status)
            else:
                logger.debug("QP status %s at t = %.4f s", result.status, t)
        log.append(_row(scenario, t, x, observers, dobs, result))
        if k == n_ticks:
            break
        u = as_vector(result.u, "input")
        for j in range(sub_steps):
            x, dobs = _advance(joint, x, u, t + j * cfg.dt_sim, cfg.dt_sim, dobs)
    logger.info("Finished %s run: min h = %.6g", plant.name,
                float(np.min(log.column(f"h_{scenario.barriers[0].name}"))))
    return log


def _derivative(values, dt):
    derivative = np.full(values.size, np.nan)
    derivative[1:-1] = (values[2:] - values[:-2]) / (2 * dt)
    return derivative


def verify_bounds(log, bounds=None, transient=1.0, tolerance=FD_TOLERANCE):
    """Check the disturbance error bounds and the Ψ lower bound along a log.

    Parameters:
        log: TrajectoryLog
        bounds: ErrorBoundSet
            Overrides the γ columns of the log when given.
        transient: float
            Samples before this time are not checked.
        tolerance: float
            Relative tolerance of the finite-difference derivative check.

    Returns:
        A VerificationReport.
    """
    t = log.column("t")
    after = t >= transient
    channels = log.names("gamma_")
    contained = np.ones(len(log), dtype=bool)
    flagged = []
    exceedance = 0.0
    for i, name in enumerate(channels):
        error = np.abs(log.column(f"f_{name}") - log.column(f"fhat_{name}"))
        gamma = log.column(f"gamma_{name}") if bounds is None else np.full(len(log), bounds.channels[i].gamma)
        ok = error <= gamma + CONTAINMENT_SLACK
        contained &= ok
        if np.any(after):
            scale = np.maximum(gamma[after], CONTAINMENT_SLACK)
            exceedance = max(exceedance, float(np.max((error[after] - gamma[after]) / scale)))
        flagged += [(float(t[k]), "containment", name) for k in np.flatnonzero(after & ~ok)]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    sufficient = np.ones(len(log), dtype=bool)
    checked = after.copy()
    checked[[0, -1]] = False
    for name in log.names("heff_"):
        derivative = _derivative(log.column(f"heff_{name}"), dt)
        psi = log.column(f"psi_{name}")
        with np.errstate(invalid="ignore"):
            ok = derivative >= psi - tolerance * (np.abs(derivative) + 1)
        sufficient &= ok | ~checked
        flagged += [(float(t[k]), "sufficiency", name) for k in np.flatnonzero(checked & ~ok)]
    containment = float(np.mean(contained[after])) if np.any(after) else 1.0
    sufficiency = float(np.mean(sufficient[checked])) if np.any(checked) else 1.0
    flagged.sort()
    if flagged:
        logger.info("Verification flagged %d samples", len(flagged))
    return VerificationReport(containment, sufficiency, exceedance, flagged)


def _psi_gap(log, transient):
    t = log.column("t")
    if len(t) < 3:
        return 0.0
    checked = t >= transient
    checked[[0, -1]] = False
    if not np.any(checked):
        return 0.0
    dt = float(t[1] - t[0])
    gaps = [(_derivative(log.column(f"heff_{name}"), dt) - log.column(f"psi_{name}"))[checked]
            for name in log.names("heff_")]
    return float(np.mean(np.concatenate(gaps))) if gaps else 0.0


def compute_metrics(log, transient=1.0, tolerance=FD_TOLERANCE):
    """Summarise a trajectory log.

    Examples:
        >>> log = TrajectoryLog(["t", "h_a", "heff_a", "psi_a", "u_0", "status",
        ...                      "slack", "track_err"])
        >>> for k in range(3):
        ...     log.append([k * 0.5, 2.0, 2.0, 0.0, 1.0, "optimal", 0.0, 0.0])
        >>> metrics = compute_metrics(log)
        >>> metrics.h_min, metrics.violations, metrics.sufficiency
        (2.0, 0, 1.0)
    """
    h = np.concatenate([log.column(f"h_{name}") for name in log.names("h_")])
    u = np.concatenate([log.column(f"u_{j}") for j in log.names("u_")])
    status = log.column("status")
    report = verify_bounds(log, transient=transient, tolerance=tolerance)
    return Metrics(h_min=float(np.min(h)),
                   h_mean=float(np.mean(h)),
                   violations=int(np.sum(h < 0)),
                   tracking_rmse=float(np.sqrt(np.mean(log.column("track_err") ** 2))),
                   u_max=float(np.max(np.abs(u))),
                   containment=report.containment,
                   sufficiency=report.sufficiency,
                   infeasible=status.count("infeasible"),
                   clf_dropped=status.count("clf_dropped"),
                   psi_gap=_psi_gap(log, transient))


def _sweep_one(args):
    cfg, axis, value = args
    updated = replace_path(cfg, axis, value)
    scenario = build_scenario(updated)
    log = run_scenario(updated, scenario)
    metrics = compute_metrics(log, updated.bounds.transient)
    return SweepRow(value, metrics, tuple(scenario.bounds.gammas))


def sweep(cfg, axis, values, workers=1):
    """Run one scenario per value of a dotted config field.

    Parameters:
        cfg: ScenarioConfig
            The template.
        axis: str
            A dotted field path such as ``observer.bandwidth``.
        values: list
            The values to try.
        workers: int
            Runs in parallel processes when above 1.

    Returns:
        A list of SweepRow in the order of ``values``.
    """
    jobs = [(cfg, axis, value) for value in values]
    logger.info("Sweeping %s over %d values", axis, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(job) for job in jobs]


def sweep_rows(rows, axis):
    """Flatten sweep results into dicts for CSV export."""
    out = []
    for row in rows:
        record = {axis: row.value}
        record.update(row.metrics._asdict())
        for i, value in enumerate(row.gamma):
            record[f"gamma_{i + 1}"] = value
        out.append(record)
    return out


def _format(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def export_csv(data, path):
    """Write a TrajectoryLog, Metrics, a list of Metrics or a list of dicts as CSV.

    Floats are written with ``repr`` so they read back bit-exactly.
    """
    if isinstance(data, TrajectoryLog):
        header, rows = data.columns, data.rows
    else:
        if isinstance(data, Metrics):
            data = [data]
        records = [r._asdict() if hasattr(r, "_asdict") else dict(r) for r in data]
        header = list(records[0].keys()) if records else []
        rows = [[r.get(k, "") for k in header] for r in records]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    logger.debug("Wrote %d rows to %s", len(rows), path)


def export_bounds(scenario, path):
    """Write the error bound report of a scenario as CSV."""
    names = [c.name for c in scenario.plant.channels]
    export_csv(bounds_rows(scenario.bounds, names), path)


def read_log_csv(path):
    """Read a trajectory written by :func:`export_csv`."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        columns = next(reader)
        status = columns.index("status")
        rows = [[v if i == status else float(v) for i, v in enumerate(row)] for row in reader]
    return TrajectoryLog(columns, rows)
