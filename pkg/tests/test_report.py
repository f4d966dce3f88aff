import logging
import math

import numpy as np
import pandas as pd
import pytest

from phevoc.cycles import fuel_volume
from phevoc.report import friction_last_fraction, mode_switches, rms_tracking, summarize
from phevoc.simulator import LOG_COLUMNS, TrajectoryLog


def log_frame(n=5, **columns):
    frame = pd.DataFrame(0.0, index=range(n), columns=LOG_COLUMNS)
    frame["t_s"] = np.arange(float(n))
    frame["soc"] = 0.6
    frame["mode_v"] = 0
    for name, values in columns.items():
        frame[name] = values
    return frame


def test_rms_tracking():
    frame = log_frame(4, v_mps=[10.0, 12.0, 10.0, 8.0], v_des_mps=10.0)
    assert rms_tracking(frame) == pytest.approx(math.sqrt(2.0))
    assert math.isnan(rms_tracking(frame.iloc[:0]))


def test_rms_tracking_skips_saturated_rows():
    frame = log_frame(3, v_mps=[10.0, 4.0, 10.0], v_des_mps=10.0, u_ice=[0.5, 1.0, 1.0],
                      u_em=[0.5, 1.0, 0.0], u_gen=[0.0, 0.0, 0.995], mode_v=[0, 0, 1])
    assert rms_tracking(frame) == pytest.approx(math.sqrt(12.0))
    assert rms_tracking(frame, exclude_saturated=True) == 0.0
    frame["u_ice"] = 1.0
    frame["u_em"] = 1.0
    assert math.isnan(rms_tracking(frame, exclude_saturated=True))


def test_friction_last_fraction():
    assert friction_last_fraction(log_frame(3)) is None
    frame = log_frame(4, u_fr=[0.0, 0.5, 0.5, 0.2], mode_v=[1, 1, 0, 1], u_gen=[0.0, 1.0, 0.0, 0.5])
    assert friction_last_fraction(frame) == pytest.approx(1.0 / 3.0)


def test_mode_switches():
    assert mode_switches(log_frame(5, mode_v=[0, 1, 1, 0, 0])) == 2
    assert mode_switches(log_frame(0)) == 0


def empty_log(frame, status=("optimal",)):
    return TrajectoryLog(frame=frame, applied=pd.DataFrame(), windows=pd.DataFrame({"status": list(status)}),
                         solver_history=pd.DataFrame())


def test_summarize(params, caplog):
    frame = log_frame(11, v_mps=10.0, v_des_mps=10.0, p_fuel_kw=36.0, soc=np.linspace(0.6, 0.58, 11),
                      mode_v=[0] * 5 + [1] * 6, u_fr=[0.0] * 10 + [0.4])
    log = empty_log(frame, ("optimal", "max_iter"))
    log.costs["closed_loop_cost"] = 12.5
    with caplog.at_level(logging.WARNING, logger="phevoc.report"):
        summary = summarize(log, params)
    assert "generator below capacity" in caplog.text
    assert summary["rms_tracking_mps"] == 0.0
    assert summary["final_soc"] == pytest.approx(0.58)
    assert summary["min_soc"] == pytest.approx(0.58)
    assert summary["max_soc"] == pytest.approx(0.6)
    assert summary["fuel_volume_l"] == pytest.approx(fuel_volume(frame, params))
    assert summary["mode_switches"] == 1
    assert summary["solver_failures"] == 1
    assert summary["friction_last_fraction"] == 0.0
    assert summary["duration_s"] == 10.0
    assert summary["closed_loop_cost"] == 12.5
    assert not summary["aborted"]


def test_summarize_aborted_run(params):
    log = empty_log(log_frame(0), ("optimal", "infeasible"))
    log.aborted = True
    assert summarize(log, params) == {"aborted": True, "solver_failures": 1}
