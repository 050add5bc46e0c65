from functools import lru_cache
import math
import os
import time

import numpy as np
import pytest

from esorqp.cli import EXIT_OK, main
from esorqp.config import config_from_dict, default_config
from esorqp.harness import (Metrics, TrajectoryLog, build_scenario, compute_metrics, export_csv,
                            log_columns, observer_gains, read_log_csv, run_scenario, sweep,
                            sweep_rows, verify_bounds)


def _quick(plant="acc", horizon=0.05, **changes):
    return default_config(plant)._replace(horizon=horizon, dt_sim=1e-3, dt_ctrl=1e-3, **changes)


@lru_cache(maxsize=None)
def _acc_run(controller, quiet=False):
    data = {"controller": controller, "dt_sim": 1.0e-3, "dt_ctrl": 1.0e-3}
    if quiet:
        data["disturbances"] = {"d0": {"kind": "zero"}}
    cfg = config_from_dict(data)
    return run_scenario(cfg)


def _synthetic_log(fhat_offset=0.0):
    log = TrajectoryLog(["t", "f_a", "fhat_a", "gamma_a", "h_b", "heff_b", "psi_b", "u_0",
                         "status", "slack", "track_err"])
    for k in range(21):
        t = k * 0.1
        fhat = math.sin(t) + (fhat_offset if k == 15 else 0.0)
        log.append([t, math.sin(t), fhat, 0.05, 1.0 + 2 * t, 1.0 + 2 * t, 1.5, 0.0,
                    "optimal", 0.0, 0.0])
    return log


def test_trajectory_log():
    log = TrajectoryLog(["t", "x_a", "status"])
    log.append([0.0, 1.0, "optimal"])
    log.append([0.1, 2.0, "infeasible"])
    assert len(log) == 2
    assert log.column("x_a").tolist() == [1.0, 2.0]
    assert log.column("status") == ["optimal", "infeasible"]
    assert log.names("x_") == ["a"]
    with pytest.raises(ValueError):
        log.append([0.2, 3.0])


def test_log_columns_acc():
    columns = log_columns(build_scenario(_quick()))
    assert columns[:5] == ["t", "x_v_f", "x_D", "y_v_f", "y_D"]
    for name in ("xhat_v_f_0", "fhat_v_f", "f_D", "gamma_v_f", "u_0", "h_headway",
                 "heff_headway", "psi_headway", "dob_headway"):
        assert name in columns
    assert columns[-3:] == ["status", "slack", "track_err"]


def test_build_scenario_segway():
    scenario = build_scenario(_quick("segway"))
    assert [g.gains.size for g in scenario.gains] == [3, 3]
    assert scenario.barriers[0].degree == 2
    assert scenario.clf is None
    assert scenario.dob_margin == pytest.approx(scenario.plant.dob_rate_bound() / 10.0)
    assert all(b.gamma > 0 for b in scenario.bounds.channels)


def test_observer_gains_discrete():
    cfg = _quick()._replace(dt_sim=1e-4)
    cfg = cfg._replace(observer=cfg.observer._replace(mode="discrete", discrete_bandwidth=0.99))
    channel = build_scenario(cfg).plant.channels[0]
    gains = observer_gains(cfg, channel)
    assert gains.mode == "discrete"
    assert gains.bandwidth == 0.99
    assert build_scenario(cfg).bounds.channels[0].omega_d == 0.99


def test_verify_bounds_synthetic():
    report = verify_bounds(_synthetic_log(), transient=0.5)
    assert report.containment == 1.0
    assert report.sufficiency == 1.0
    assert report.flagged == []
    broken = verify_bounds(_synthetic_log(fhat_offset=0.2), transient=0.5)
    assert broken.containment < 1.0
    assert (pytest.approx(1.5), "containment", "a") in broken.flagged
    assert broken.max_exceedance == pytest.approx((0.2 - 0.05) / 0.05)


def test_verify_bounds_flags_insufficient_psi():
    log = _synthetic_log()
    index = log.index["psi_b"]
    log.rows = [row[:index] + (3.0,) + row[index + 1:] for row in log.rows]
    report = verify_bounds(log, transient=0.0)
    assert report.sufficiency == 0.0
    assert report.flagged[0][1] == "sufficiency"


def test_compute_metrics_synthetic():
    metrics = compute_metrics(_synthetic_log(), transient=0.5)
    assert metrics.h_min == pytest.approx(1.0)
    assert metrics.psi_gap == pytest.approx(0.5)
    assert metrics.violations == 0
    assert metrics.infeasible == 0
    assert metrics.containment == 1.0


def test_run_row_count():
    cfg = _quick()
    log = run_scenario(cfg)
    assert len(log) == math.floor(0.05 / 1e-3) + 1
    assert log.column("t")[-1] == pytest.approx(0.05)
    assert np.all(np.isfinite(log.column("x_v_f")))


def test_run_starts_from_initial_state():
    log = run_scenario(_quick())
    assert log.rows[0][1:3] == (20.0, 100.0)
    assert log.column("fhat_v_f")[0] == 0.0
    assert log.column("h_headway")[0] == pytest.approx(64.0)


def test_run_is_deterministic(tmp_path):
    cfg = _quick(horizon=0.2)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    export_csv(run_scenario(cfg), str(first))
    export_csv(run_scenario(cfg), str(second))
    assert first.read_bytes() == second.read_bytes()


def test_csv_round_trip(tmp_path):
    log = run_scenario(_quick())
    path = tmp_path / "trajectory.csv"
    export_csv(log, str(path))
    loaded = read_log_csv(str(path))
    assert loaded.columns == log.columns
    assert loaded.rows == [tuple(float(v) if not isinstance(v, str) else v for v in row)
                           for row in log.rows]


def test_export_metrics(tmp_path):
    path = tmp_path / "metrics.csv"
    export_csv(compute_metrics(_synthetic_log()), str(path))
    header = path.read_text().splitlines()[0]
    assert header.split(",") == list(Metrics._fields)


def test_sweep_bandwidth():
    rows = sweep(_quick(horizon=0.1), "observer.bandwidth", [10.0, 40.0])
    assert [r.value for r in rows] == [10.0, 40.0]
    assert rows[0].gamma[0] > rows[1].gamma[0]
    records = sweep_rows(rows, "observer.bandwidth")
    assert records[1]["observer.bandwidth"] == 40.0
    assert "h_min" in records[0]
    assert records[0]["gamma_1"] == rows[0].gamma[0]


def test_segway_observers_track():
    log = run_scenario(_quick("segway", horizon=1.0))
    assert len(log) == 1001
    settled = log.column("t") > 0.5
    error = np.abs(log.column("xhat_phi_0") - log.column("x_phi"))
    assert np.max(error[settled]) < 1e-2
    assert np.all(np.isfinite(log.column("psi_tilt")))


@pytest.mark.slow
def test_acc_esor_keeps_headway():
    metrics = compute_metrics(_acc_run("esor_qp"), 1.0)
    assert metrics.h_min >= -1e-6
    assert metrics.infeasible == 0


@pytest.mark.slow
def test_acc_esor_bounds_hold():
    report = verify_bounds(_acc_run("esor_qp"), transient=1.0)
    assert report.containment >= 0.999
    assert report.sufficiency >= 0.999


@pytest.mark.slow
def test_acc_true_disturbance_reference():
    metrics = compute_metrics(_acc_run("true_d_qp"), 1.0)
    assert metrics.h_min >= -1e-6


@pytest.mark.slow
def test_acc_esor_matches_reference_without_disturbance():
    esor = _acc_run("esor_qp", quiet=True)
    reference = _acc_run("true_d_qp", quiet=True)
    assert np.max(np.abs(esor.column("h_headway") - reference.column("h_headway"))) < 1e-6
    assert np.max(np.abs(esor.column("u_0") - reference.column("u_0"))) < 1e-6


@pytest.mark.slow
def test_acc_esor_tracks_before_braking():
    log = _acc_run("esor_qp")
    t = log.column("t")
    speed = log.column("x_v_f")
    assert np.max(speed[t < 5.0]) > 20.0


@lru_cache(maxsize=None)
def _segway_run(controller):
    return run_scenario(config_from_dict({"plant": "segway", "controller": controller}))


@pytest.mark.slow
def test_acc_esor_matches_dob():
    esor = _acc_run("esor_qp").column("h_headway")
    dob = _acc_run("dob_cbf_qp").column("h_headway")
    assert np.max(np.abs(esor - dob)) <= 0.02 * np.max(esor)


@pytest.mark.slow
def test_acc_psi_gap_shrinks_with_sample_time():
    cfg = config_from_dict({"dt_sim": 1.0e-3, "dt_ctrl": 1.0e-3})
    rows = sweep(cfg, "observer.sample_time", [1e-3, 3e-4, 1e-4])
    gammas = [r.gamma[0] for r in rows]
    gaps = [r.metrics.psi_gap for r in rows]
    assert gammas[0] > gammas[1] > gammas[2]
    assert all(gap > 0 for gap in gaps)
    for wider, narrower in zip(gaps, gaps[1:]):
        assert narrower <= 1.05 * wider
    assert all(r.metrics.sufficiency >= 0.999 for r in rows)


@pytest.mark.slow
def test_acc_default_run_time():
    start = time.perf_counter()
    log = run_scenario(default_config("acc"))
    elapsed = time.perf_counter() - start
    assert len(log) == 30001
    assert compute_metrics(log).containment >= 0.999
    assert elapsed < 60.0


@pytest.mark.slow
def test_segway_default_scenario_exits_cleanly(tmp_path):
    config = os.path.join(os.path.dirname(__file__), "..", "scenarios", "segway.yaml")
    out = tmp_path / "segway"
    assert main(["-q", "run", "--config", config, "--out", str(out)]) == EXIT_OK
    log = read_log_csv(str(out / "trajectory.csv"))
    assert np.min(log.column("h_tilt")) >= 0.0
    assert "infeasible" not in log.column("status")


@pytest.mark.slow
def test_segway_esor_activates_barrier():
    log = _segway_run("esor_qp")
    metrics = compute_metrics(log)
    assert metrics.h_min >= 0.0
    assert metrics.infeasible == 0
    # the filter overrides the nominal law for a sizeable part of the run
    nominal = np.array([4 * (p - 1) + 8 * v + 40 * phi + 10 * omega
                        for p, phi, v, omega in zip(log.column("xhat_p_0"), log.column("xhat_phi_0"),
                                                    log.column("xhat_p_1"), log.column("xhat_phi_1"))])
    assert np.mean(np.abs(log.column("u_0") - nominal) > 1e-6) > 0.2


@pytest.mark.slow
def test_segway_dob_more_conservative_than_esor():
    esor = compute_metrics(_segway_run("esor_qp"))
    dob = compute_metrics(_segway_run("dob_cbf_qp"))
    assert esor.h_min >= 0.0
    assert dob.h_min >= 0.0
    assert dob.h_mean > esor.h_mean + 1e-3
