import logging
import math

import numpy as np
import pandas as pd
import pytest

from phevoc.cycles import constant_cycle, highway_like_cycle, sawtooth_cycle
from phevoc.model import VehicleState
from phevoc.nmpc import (NmpcConfig, NmpcController, _shift, closed_loop_cost, nmpc_step, run_full_horizon,
                         run_nmpc, sliding_soc_weight)
from phevoc.report import (FRICTION_ACTIVE, FRICTION_LAST_THRESHOLD, friction_last_fraction, rms_tracking,
                           summarize)
from phevoc.simulator import APPLIED_COLUMNS, Simulator
from phevoc.solver import solve


def test_sliding_soc_weight():
    config = NmpcConfig(t_final=100.0, c_bat_nom=1e5)
    assert sliding_soc_weight(0.0, config) == 0.0
    assert sliding_soc_weight(50.0, config) == pytest.approx(5e4)
    assert sliding_soc_weight(100.0, config) == pytest.approx(1e5)
    assert sliding_soc_weight(140.0, config) == pytest.approx(1e5)
    with pytest.raises(ValueError):
        sliding_soc_weight(-1.0, config)
    with pytest.raises(ValueError):
        sliding_soc_weight(10.0, NmpcConfig(t_final=100.0))


@pytest.mark.parametrize("kwargs", [
    {"window_length": 4.5, "partition": 1.0},
    {"window_length": 0.5, "partition": 1.0},
    {"partition": 0.0},
    {"t_final": 0.0},
    {"apply_length": 2.0},
    {"t_min": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        NmpcConfig(**kwargs)


def test_config_resolution(weights):
    cycle = constant_cycle(5.0, 12.0)
    resolved = NmpcConfig(window_length=3.0).resolved(cycle, weights)
    assert resolved.t_final == 12.0
    assert resolved.c_bat_nom == weights.c_bat_nom
    assert resolved.apply_length == 1.0
    assert resolved.intervals_per_window == 3


def test_shift_duplicates_last_interval():
    X = np.arange(5.0)[:, None]
    U = np.arange(4.0)[:, None]
    v = np.array([0.1, 0.2, 0.3, 0.4])
    Xs, U0s, U1s, vs = _shift((X, U, U, v), 4)
    np.testing.assert_array_equal(Xs[:, 0], [1.0, 2.0, 3.0, 4.0, 4.0])
    np.testing.assert_array_equal(U0s[:, 0], [1.0, 2.0, 3.0, 3.0])
    np.testing.assert_array_equal(vs, [0.2, 0.3, 0.4, 0.4])
    # shorter windows near the cycle end
    Xs, _, _, vs = _shift((X, U, U, v), 2)
    assert Xs.shape == (3, 1) and vs.shape == (2,)


def test_closed_loop_cost(weights):
    frame = pd.DataFrame({"t_s": [0.0, 1.0, 2.0], "stage_cost": [1.0, 3.0, 1.0], "soc": [0.6, 0.6, 0.55]})
    assert closed_loop_cost(frame, weights, 1e5) == pytest.approx(4.0 + 250.0)
    assert math.isnan(closed_loop_cost(frame.iloc[:0], weights, 1e5))


def test_stationary_cycle_stays_at_rest(no_drift_params, weights, rest_state):
    log = run_nmpc(constant_cycle(0.0, 4.0), rest_state, no_drift_params, weights,
                   NmpcConfig(window_length=2.0))
    assert not log.aborted
    assert log.solver_failures == 0
    controls = log.applied[["u0_ice", "u0_fr", "u0_em", "u1_ice", "u1_fr", "u1_gen"]].to_numpy()
    np.testing.assert_allclose(controls, 0.0, atol=1e-3)
    final = log.final_state
    assert final.p_ice == pytest.approx(0.0, abs=1e-6)
    assert final.soc == pytest.approx(weights.soc_nom, abs=1e-6)
    assert final.v == pytest.approx(0.0, abs=1e-4)


def test_single_window_matches_full_horizon_solve(params, weights):
    cycle = constant_cycle(8.0, 2.0)
    x0 = VehicleState(0.0, 0.6, 8.0)
    config = NmpcConfig(window_length=2.0)
    step = nmpc_step(x0, 0.0, cycle, params, weights, config)
    assert step.diagnostics["n_intervals"] == 2
    assert step.diagnostics["c_bat"] == pytest.approx(weights.c_bat_nom)

    controller = NmpcController(Simulator(params, weights), config)
    full = solve(controller._full_problem(cycle, x0))
    assert step.result.objective == pytest.approx(full.objective, rel=1e-9)
    np.testing.assert_allclose(step.result.x, full.x, atol=1e-9)


def test_step_applies_first_interval(params, weights):
    cycle = sawtooth_cycle(duration=10.0)
    step = nmpc_step(VehicleState(0.0, 0.6, 0.0), 3.0, cycle, params, weights)
    assert step.apply_length == 1.0
    assert step.segment.frame["t_s"].iloc[0] == 3.0
    assert step.segment.frame["t_s"].iloc[-1] < 4.0
    _, U0, _, v = step.problem.transcription.unpack(step.result.x)
    assert step.applied.v == pytest.approx(np.clip(v[0], 0.0, 1.0))
    np.testing.assert_allclose(step.applied.u0.to_array(), np.clip(U0[0], 0.0, 1.0))
    # window end at 7 s of a 10 s cycle
    assert step.diagnostics["c_bat"] == pytest.approx(0.7 * weights.c_bat_nom)


@pytest.fixture(scope="module")
def sawtooth_run(default_setup):
    params, weights = default_setup
    return run_nmpc(sawtooth_cycle(duration=20.0), VehicleState(0.0, weights.soc_nom, 0.0), params, weights)


def test_nmpc_run_invariants(sawtooth_run):
    log = sawtooth_run
    assert not log.aborted
    assert list(log.applied.columns) == APPLIED_COLUMNS
    np.testing.assert_allclose(log.applied["t_s"], np.arange(20.0))
    assert len(log.windows) == 20
    assert set(log.solver_history["window"]) == set(range(20))

    frame = log.frame
    assert frame["t_s"].iloc[0] == 0.0
    assert frame["t_s"].iloc[-1] == pytest.approx(20.0)
    assert (np.diff(frame["t_s"]) > 0).all()
    assert frame["soc"].between(0.0, 1.0).all()
    assert (frame["v_mps"] >= 0.0).all()
    assert (frame["p_ice_kw"] >= 0.0).all()
    values = log.applied[APPLIED_COLUMNS[1:]].to_numpy()
    assert (values >= 0.0).all() and (values <= 1.0).all()

    assert log.schedule.t_start == 0.0 and log.schedule.t_end == pytest.approx(20.0)
    assert np.isfinite(log.costs["closed_loop_cost"])
    assert np.isfinite(log.costs["sequence_cost"])


def test_nmpc_is_deterministic(params, weights):
    cycle = sawtooth_cycle(duration=6.0)
    x0 = VehicleState(0.0, 0.6, 0.0)
    a = run_nmpc(cycle, x0, params, weights)
    b = run_nmpc(cycle, x0, params, weights)
    pd.testing.assert_frame_equal(a.frame, b.frame)
    pd.testing.assert_frame_equal(a.applied, b.applied)


def test_full_horizon(params, weights):
    cycle = sawtooth_cycle(duration=8.0)
    log = run_full_horizon(cycle, VehicleState(0.0, 0.6, 0.0), params, weights)
    assert list(log.windows["stage"]) == ["embedded", "switched"]
    # reported costs exclude the proximal term the solver minimizes
    objective = log.windows.set_index("stage")["objective"]
    assert objective["embedded"] <= objective["switched"] * (1 + 1e-6) + 1e-6
    assert log.costs["embedded_cost"] <= objective["embedded"]
    assert log.costs["switched_cost"] <= objective["switched"]
    assert set(log.applied["v"]) <= {0.0, 1.0}
    assert len(log.embedded) == 8
    assert log.schedule.dwell_violations() == []
    assert log.frame["t_s"].iloc[-1] == pytest.approx(8.0)


def test_full_horizon_improves_on_nmpc(sawtooth_run, default_setup):
    params, weights = default_setup
    cycle = sawtooth_cycle(duration=20.0)
    x0 = VehicleState(0.0, weights.soc_nom, 0.0)
    full = run_full_horizon(cycle, x0, params, weights, warm_start=sawtooth_run.applied)

    problem = NmpcController(Simulator(params, weights), NmpcConfig())._full_problem(cycle, x0)
    applied = sawtooth_run.applied
    z, score = problem.transcription.score_controls(applied[["u0_ice", "u0_fr", "u0_em"]].to_numpy(),
                                                    applied[["u1_ice", "u1_fr", "u1_gen"]].to_numpy(),
                                                    applied["v"].to_numpy())
    assert score == pytest.approx(sawtooth_run.costs["sequence_cost"])
    embedded_objective = full.windows.set_index("stage").loc["embedded", "objective"]
    assert embedded_objective <= problem.objective(z) * (1 + 1e-6)


def test_full_horizon_rejects_ragged_cycle(params, weights):
    with pytest.raises(ValueError):
        run_full_horizon(constant_cycle(5.0, 5.0, dt=0.5), VehicleState(0.0, 0.6, 5.0), params, weights,
                         NmpcConfig(window_length=2.0, partition=2.0))


def test_highway_tracking_and_charge_sustaining(params, weights):
    log = run_nmpc(highway_like_cycle(duration=100.0), VehicleState(0.0, weights.soc_nom, 0.0), params, weights)
    assert not log.aborted
    assert log.final_state.soc == pytest.approx(weights.soc_nom, abs=0.02)
    assert rms_tracking(log.frame, exclude_saturated=True) <= 0.5


def test_friction_brake_comes_last_on_a_hard_stop(params, weights, caplog):
    # twelve seconds up to 12 m/s, then a two-second stop at 6 m/s^2
    cycle = sawtooth_cycle(period=14.0, peak=12.0, rise_fraction=12.0 / 14.0)
    log = run_nmpc(cycle, VehicleState(0.0, weights.soc_nom, 0.0), params, weights)
    assert not log.aborted
    braking = log.frame[log.frame["u_fr"] > FRICTION_ACTIVE]
    assert not braking.empty
    assert braking["t_s"].min() >= 8.0

    fraction = friction_last_fraction(log.frame)
    assert 0.0 <= fraction <= 1.0
    with caplog.at_level(logging.WARNING, logger="phevoc.report"):
        summary = summarize(log, params)
    assert summary["friction_last_fraction"] == fraction
    assert ("generator below capacity" in caplog.text) == (fraction < FRICTION_LAST_THRESHOLD)
