import copy
import json

import numpy as np
import pandas as pd
import pytest
import yaml

from phevoc.embedding import ModeSchedule
from phevoc.io import (ParameterError, check_parameters, load_initial_state, load_parameters,
                       parameters_from_document, parameters_to_document, parse_overrides, read_controls,
                       read_document, read_schedule, write_json, write_schedule)
from phevoc.simulator import APPLIED_COLUMNS


@pytest.fixture
def document(params_path):
    return read_document(params_path)


def test_bundled_parameters_are_valid(document, params, weights):
    assert check_parameters(document) == []
    assert params.tau_ice == 0.5
    assert params.p_ice_max == 90.0
    assert params.battery_d[1][3] == pytest.approx(0.86573)
    assert params.p_bat_nom == (10.0, -10.0)
    assert weights.c_bat_nom == 1e5


def test_document_round_trip(params, weights):
    doc = parameters_to_document(params, weights)
    assert check_parameters(doc) == []
    again, again_weights = parameters_from_document(yaml.safe_load(yaml.safe_dump(doc)))
    assert again_weights == weights
    assert parameters_to_document(again, again_weights) == doc


def test_violations_are_all_reported(document):
    doc = copy.deepcopy(document)
    doc["vehicle"]["eta_cvt"] = 1.2
    doc["vehicle"]["p_fr_max_map"] = [[0, 0], [10, 5], [5, 8]]
    doc["vehicle"]["battery_d"]["mode0"] = [1.0, -2.0, 0.0, 1.0]
    doc["vehicle"]["colour"] = "red"
    problems = check_parameters(doc)
    assert "vehicle.eta_cvt: efficiency must lie in (0, 1]" in problems
    assert "vehicle.p_fr_max_map: breakpoints must be strictly increasing" in problems
    assert any(p.startswith("vehicle.battery_d.mode0:") for p in problems)
    assert "vehicle.colour: unknown field" in problems
    with pytest.raises(ParameterError) as info:
        parameters_from_document(doc, source="bad.yml")
    assert info.value.violations == problems
    assert str(info.value).startswith("bad.yml: ")


def test_missing_sections(document):
    doc = copy.deepcopy(document)
    del doc["vehicle"]["tau_ice"]
    doc["params_version"] = 2
    problems = check_parameters(doc)
    assert "vehicle.tau_ice: missing" in problems
    assert any(p.startswith("params_version:") for p in problems)
    assert check_parameters([1, 2]) == ["document: must be a mapping"]


def test_speed_envelope_ordering(document):
    doc = copy.deepcopy(document)
    doc["vehicle"]["omega_min_map"] = [[0, 100], [45, 600]]
    assert "vehicle.omega_min_map: exceeds omega_max_map somewhere" in check_parameters(doc)


def test_weight_checks(document):
    doc = copy.deepcopy(document)
    doc["weights"] = {"c_v": -1.0, "speed_bonus": 3.0, "soc_barrier": "sometimes"}
    problems = check_parameters(doc)
    assert "weights.c_v: must be non-negative" in problems
    assert "weights.speed_bonus: unknown weight" in problems
    assert "weights.soc_barrier: must be true or false" in problems
    doc["weights"] = {"soc_min": 0.7}
    assert any(p.startswith("weights:") for p in check_parameters(doc))


def test_overrides(params_path):
    _, weights = load_parameters(params_path, parse_overrides(["c_v=2.5", "soc_barrier=off"]))
    assert weights.c_v == 2.5
    assert weights.soc_barrier is False
    with pytest.raises(ParameterError):
        parse_overrides(["c_v"])
    with pytest.raises(ParameterError):
        parse_overrides(["c_v=fast"])
    with pytest.raises(ParameterError):
        load_parameters(params_path, {"c_speed": 1.0})


def test_initial_state(tmp_path, weights):
    state = load_initial_state(tmp_path / "missing.yml", weights)
    assert (state.p_ice, state.soc, state.v) == (0.0, weights.soc_nom, 0.0)
    assert load_initial_state(None, weights).soc == weights.soc_nom

    path = tmp_path / "init.yml"
    path.write_text("p_ice: 2.0\nsoc: 0.55\nv: 3.5\n")
    state = load_initial_state(path, weights)
    assert (state.p_ice, state.soc, state.v) == (2.0, 0.55, 3.5)

    path.write_text("p_ice: 2.0\nsoc: 1.4\nv: 3.5\n")
    with pytest.raises(ParameterError, match="soc"):
        load_initial_state(path, weights)
    path.write_text("p_ice: 2.0\nv: 3.5\n")
    with pytest.raises(ParameterError):
        load_initial_state(path, weights)


def test_read_controls(tmp_path):
    table = pd.DataFrame({"t_s": [0.0, 1.0], "v": [0.0, 0.5], "u0_ice": 0.1, "u0_fr": 0.0, "u0_em": 0.2,
                          "u1_ice": 0.3, "u1_fr": 0.0, "u1_gen": 0.4}, columns=APPLIED_COLUMNS)
    table.to_csv(tmp_path / "applied.csv", index=False)
    pd.testing.assert_frame_equal(read_controls(tmp_path / "applied.csv"), table)

    log = pd.DataFrame({"t_s": [0.0, 0.5], "mode_v": [0, 1], "u_ice": [0.2, 0.2], "u_fr": [0.0, 0.1],
                        "u_em": [0.3, 0.0], "u_gen": [0.0, 0.6]})
    log.to_csv(tmp_path / "trajectory.csv", index=False)
    controls = read_controls(tmp_path / "trajectory.csv")
    assert list(controls["v"]) == [0.0, 1.0]
    assert list(controls["u1_gen"]) == [0.0, 0.6]
    assert list(controls["u1_ice"]) == [0.2, 0.2]


@pytest.mark.parametrize("text", ["", "t_s,speed\n0,1\n", "t_s,v,u0_ice,u0_fr,u0_em,u1_ice,u1_fr,u1_gen\n"])
def test_read_controls_rejects(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError):
        read_controls(path)


def test_read_controls_rejects_unordered_times(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t_s,v,u0_ice,u0_fr,u0_em,u1_ice,u1_fr,u1_gen\n1,0,0,0,0,0,0,0\n0,0,0,0,0,0,0,0\n")
    with pytest.raises(ValueError, match="increasing"):
        read_controls(path)


def test_schedule_files(tmp_path):
    schedule = ModeSchedule((2.0, 5.0), 1, t_min=1.0, t_start=0.0, t_end=8.0)
    write_schedule(schedule, tmp_path / "schedule.csv")
    assert read_schedule(tmp_path / "schedule.csv", 1.0, 8.0) == schedule
    write_schedule(None, tmp_path / "empty.csv")
    assert list(pd.read_csv(tmp_path / "empty.csv").columns) == ["switch_time_s", "mode"]


def test_json_handles_numpy_and_infinity(tmp_path):
    write_json({"mpg": np.float64(np.inf), "count": np.int64(3), "nested": [np.float32(0.5)]}, tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc == {"mpg": "inf", "count": 3, "nested": [0.5]}
