"""Parameter documents, initial state and every result file written by a run."""
import json
import logging
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from phevoc.cost import CostWeights
from phevoc.embedding import ModeSchedule
from phevoc.model import Map1D, Map2D, VehicleParams, VehicleState
from phevoc.simulator import APPLIED_COLUMNS

logger = logging.getLogger(__name__)

PARAMS_VERSION = 1
PathLike = Union[str, Path]

_SCALARS_POSITIVE = ("tau_ice", "w_bat_max", "m_c", "eps_v", "beta", "fuel_energy_density",
                     "g", "v_max", "eng_band")
_SCALARS_ANY = ("eng_threshold", "k_v1", "k_v2")
_EFFICIENCIES = ("eta_cvt", "eta_cdd1", "eta_cdd2", "eta_ice_floor")
_MAPS = ("p_ice_max_map", "omega_min_map", "omega_max_map", "p_fr_max_map", "p_ed_in_max_map")
_NON_NEGATIVE_MAPS = ("p_ice_max_map", "p_fr_max_map", "p_ed_in_max_map", "omega_min_map", "omega_max_map")
_OPTIONAL = {"g": 9.81, "eng_band": 2.0, "eta_ice_floor": 0.05, "v_max": 45.0}
_MODE_KEYS = ("mode0", "mode1")
_VEHICLE_KEYS = set(_SCALARS_POSITIVE + _SCALARS_ANY + _EFFICIENCIES + _MAPS) | {
    "eta_ice_map", "battery_d", "p_bat_nom", "eta_ed_map"}
_WEIGHT_KEYS = {f.name for f in fields(CostWeights)}


class ParameterError(ValueError):
    """Parameter document violates one or more invariants."""

    def __init__(self, violations: List[str], source: str = "parameters"):
        self.violations = violations
        super().__init__(f"{source}: " + "; ".join(violations))


# --- validation -----------------------------------------------------------------

def _number(value) -> Optional[float]:
    if isinstance(value, bool):
        return None
    try:
        out = float(value)
    except (TypeError, ValueError):
        return None
    return out if math.isfinite(out) else None


def _check_map(name: str, pairs, problems: List[str]) -> Optional[np.ndarray]:
    try:
        arr = np.asarray(pairs, dtype=float)
    except (TypeError, ValueError):
        problems.append(f"{name}: must be a list of [breakpoint, value] pairs")
        return None
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
        problems.append(f"{name}: must be a non-empty list of [breakpoint, value] pairs")
        return None
    if not np.all(np.isfinite(arr)):
        problems.append(f"{name}: contains non-finite numbers")
        return None
    if np.any(np.diff(arr[:, 0]) <= 0):
        problems.append(f"{name}: breakpoints must be strictly increasing")
        return None
    return arr


def _check_efficiency_values(name: str, values, problems: List[str]) -> None:
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0) or np.any(values > 1):
        problems.append(f"{name}: efficiencies must lie in (0, 1]")


def check_parameters(doc: Mapping[str, Any]) -> List[str]:
    """Every violated invariant of a parameter document, as 'field.path: reason' strings."""
    problems: List[str] = []
    if not isinstance(doc, Mapping):
        return ["document: must be a mapping"]
    if doc.get("params_version") != PARAMS_VERSION:
        problems.append(f"params_version: must be {PARAMS_VERSION}, got {doc.get('params_version')!r}")
    unknown = set(doc) - {"params_version", "vehicle", "weights"}
    if unknown:
        problems.append(f"document: unknown sections {sorted(unknown)}")

    vehicle = doc.get("vehicle")
    if not isinstance(vehicle, Mapping):
        problems.append("vehicle: section missing")
        vehicle = {}
    else:
        for key in sorted(set(vehicle) - _VEHICLE_KEYS):
            problems.append(f"vehicle.{key}: unknown field")
        for key in sorted(_VEHICLE_KEYS - set(vehicle) - set(_OPTIONAL)):
            problems.append(f"vehicle.{key}: missing")

    for key in _SCALARS_POSITIVE + _SCALARS_ANY + _EFFICIENCIES:
        if key not in vehicle:
            continue
        value = _number(vehicle[key])
        if value is None:
            problems.append(f"vehicle.{key}: must be a finite number")
        elif key in _SCALARS_POSITIVE and value <= 0:
            problems.append(f"vehicle.{key}: must be positive")
        elif key in _EFFICIENCIES and not 0 < value <= 1:
            problems.append(f"vehicle.{key}: efficiency must lie in (0, 1]")

    maps = {}
    for key in _MAPS:
        if key in vehicle:
            arr = _check_map(f"vehicle.{key}", vehicle[key], problems)
            if arr is not None:
                maps[key] = arr
                if key in _NON_NEGATIVE_MAPS and np.any(arr[:, 1] < 0):
                    problems.append(f"vehicle.{key}: values must be non-negative")
    if "omega_min_map" in maps and "omega_max_map" in maps:
        lo, hi = maps["omega_min_map"], maps["omega_max_map"]
        grid = np.union1d(lo[:, 0], hi[:, 0])
        if np.any(np.interp(grid, lo[:, 0], lo[:, 1]) > np.interp(grid, hi[:, 0], hi[:, 1]) + 1e-12):
            problems.append("vehicle.omega_min_map: exceeds omega_max_map somewhere")

    eta_ice = vehicle.get("eta_ice_map")
    if eta_ice is not None:
        if not isinstance(eta_ice, Mapping) or not {"p_ice_kw", "v_mps", "table"} <= set(eta_ice):
            problems.append("vehicle.eta_ice_map: needs p_ice_kw, v_mps and table")
        else:
            try:
                Map2D(eta_ice["p_ice_kw"], eta_ice["v_mps"], eta_ice["table"])
            except (TypeError, ValueError) as exc:
                problems.append(f"vehicle.eta_ice_map: {exc}")
            else:
                _check_efficiency_values("vehicle.eta_ice_map.table", eta_ice["table"], problems)

    eta_ed = vehicle.get("eta_ed_map")
    if eta_ed is not None:
        if not isinstance(eta_ed, Mapping) or set(eta_ed) != set(_MODE_KEYS):
            problems.append("vehicle.eta_ed_map: needs exactly mode0 and mode1")
        else:
            for mode in _MODE_KEYS:
                arr = _check_map(f"vehicle.eta_ed_map.{mode}", eta_ed[mode], problems)
                if arr is not None:
                    _check_efficiency_values(f"vehicle.eta_ed_map.{mode}", arr[:, 1], problems)

    battery = vehicle.get("battery_d")
    if battery is not None:
        if not isinstance(battery, Mapping) or set(battery) != set(_MODE_KEYS):
            problems.append("vehicle.battery_d: needs exactly mode0 and mode1")
        else:
            for mode in _MODE_KEYS:
                coeffs = battery[mode]
                values = [_number(c) for c in coeffs] if isinstance(coeffs, (list, tuple)) else []
                if len(values) != 4 or any(c is None for c in values):
                    problems.append(f"vehicle.battery_d.{mode}: needs four numbers d1..d4")
                    continue
                d1, d2 = values[0], values[1]
                if d2 <= 0 or d2 + d1 <= 0:
                    problems.append(f"vehicle.battery_d.{mode}: d2 + d1*SOC must be positive on [0, 1]")

    nominal = vehicle.get("p_bat_nom")
    if nominal is not None:
        if (not isinstance(nominal, Mapping) or set(nominal) != set(_MODE_KEYS)
                or any(_number(nominal[m]) is None for m in _MODE_KEYS)):
            problems.append("vehicle.p_bat_nom: needs numbers for mode0 and mode1")

    problems += check_weights(doc.get("weights", {}))
    return problems


def check_weights(weights: Mapping[str, Any]) -> List[str]:
    problems = []
    if not isinstance(weights, Mapping):
        return ["weights: must be a mapping"]
    for key in sorted(set(weights) - _WEIGHT_KEYS):
        problems.append(f"weights.{key}: unknown weight")
    for key, value in weights.items():
        if key == "soc_barrier":
            if not isinstance(value, bool):
                problems.append("weights.soc_barrier: must be true or false")
        elif key in _WEIGHT_KEYS:
            number = _number(value)
            if number is None:
                problems.append(f"weights.{key}: must be a finite number")
            elif number < 0:
                problems.append(f"weights.{key}: must be non-negative")
    if not problems:
        try:
            _weights_from(weights)
        except ValueError as exc:
            problems.append(f"weights: {exc}")
    return problems


# --- construction -------------------------------------------------------------------

def _weights_from(section: Mapping[str, Any]) -> CostWeights:
    values = {k: (bool(v) if k == "soc_barrier" else float(v)) for k, v in section.items()}
    return CostWeights(**values)


def _vehicle_from(section: Mapping[str, Any]) -> VehicleParams:
    scalars = {k: float(section.get(k, _OPTIONAL.get(k)))
               for k in _SCALARS_POSITIVE + _SCALARS_ANY + _EFFICIENCIES}
    maps = {k: Map1D.from_pairs(section[k]) for k in _MAPS}
    eta_ice = section["eta_ice_map"]
    return VehicleParams(
        **scalars, **maps,
        eta_ice_map=Map2D(eta_ice["p_ice_kw"], eta_ice["v_mps"], eta_ice["table"]),
        battery_d=tuple(tuple(float(c) for c in section["battery_d"][m]) for m in _MODE_KEYS),
        p_bat_nom=tuple(float(section["p_bat_nom"][m]) for m in _MODE_KEYS),
        eta_ed_map=tuple(Map1D.from_pairs(section["eta_ed_map"][m]) for m in _MODE_KEYS),
    )


def parameters_from_document(doc: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None,
                             source: str = "parameters") -> Tuple[VehicleParams, CostWeights]:
    doc = dict(doc or {})
    weights = dict(doc.get("weights") or {})
    if overrides:
        unknown = sorted(set(overrides) - _WEIGHT_KEYS)
        if unknown:
            raise ParameterError([f"weights.{k}: unknown weight override" for k in unknown], source)
        weights.update(overrides)
    doc["weights"] = weights
    problems = check_parameters(doc)
    if problems:
        raise ParameterError(problems, source)
    return _vehicle_from(doc["vehicle"]), _weights_from(weights)


def read_document(path: PathLike) -> Dict[str, Any]:
    with open(path, "r") as f:
        doc = yaml.safe_load(f)
    return doc if doc is not None else {}


def load_parameters(path: PathLike, overrides: Optional[Mapping[str, Any]] = None
                    ) -> Tuple[VehicleParams, CostWeights]:
    """Load and validate a YAML (or JSON) parameter document."""
    params, weights = parameters_from_document(read_document(path), overrides, source=str(path))
    logger.info("loaded parameters from %s", path)
    return params, weights


def parameters_to_document(params: VehicleParams, weights: CostWeights) -> Dict[str, Any]:
    vehicle: Dict[str, Any] = {}
    for key in _SCALARS_POSITIVE + _SCALARS_ANY + _EFFICIENCIES:
        vehicle[key] = float(getattr(params, key))
    for key in _MAPS:
        vehicle[key] = getattr(params, key).to_pairs()
    tab = params.eta_ice_map
    vehicle["eta_ice_map"] = {"p_ice_kw": tab.x_breakpoints.tolist(), "v_mps": tab.y_breakpoints.tolist(),
                              "table": tab.table.tolist()}
    vehicle["battery_d"] = {m: [float(c) for c in d] for m, d in zip(_MODE_KEYS, params.battery_d)}
    vehicle["p_bat_nom"] = {m: float(p) for m, p in zip(_MODE_KEYS, params.p_bat_nom)}
    vehicle["eta_ed_map"] = {m: e.to_pairs() for m, e in zip(_MODE_KEYS, params.eta_ed_map)}
    return {"params_version": PARAMS_VERSION, "vehicle": vehicle, "weights": asdict(weights)}


def parse_overrides(items) -> Dict[str, Any]:
    """KEY=VALUE strings to a weight override mapping."""
    out: Dict[str, Any] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParameterError([f"override {item!r}: expected KEY=VALUE"], "--weight")
        if key == "soc_barrier":
            out[key] = value.strip().lower() in ("1", "true", "yes", "on")
            continue
        number = _number(value)
        if number is None:
            raise ParameterError([f"override {key}: {value!r} is not a number"], "--weight")
        out[key] = number
    return out


def load_initial_state(path: Optional[PathLike], weights: CostWeights) -> VehicleState:
    """Initial state from a YAML document with p_ice, soc, v; (0, soc_nom, 0) when absent."""
    if path is None or not Path(path).exists():
        if path is not None:
            logger.info("no initial state at %s; starting at rest with nominal SOC", path)
        return VehicleState(p_ice=0.0, soc=weights.soc_nom, v=0.0)
    doc = read_document(path)
    problems = []
    values = {}
    for key in ("p_ice", "soc", "v"):
        number = _number(doc.get(key, math.nan))
        if number is None:
            problems.append(f"{key}: missing or not a finite number")
        else:
            values[key] = number
    if not problems:
        if not 0.0 <= values["soc"] <= 1.0:
            problems.append("soc: must lie in [0, 1]")
        if values["p_ice"] < 0 or values["v"] < 0:
            problems.append("p_ice and v must be non-negative")
    if problems:
        raise ParameterError(problems, str(path))
    return VehicleState(**values)


# --- result files -------------------------------------------------------------------

def write_trajectory(frame: pd.DataFrame, path: PathLike) -> Path:
    frame.to_csv(path, index=False, float_format="%.12g")
    return Path(path)


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    frame.to_csv(path, index=False, float_format="%.12g")
    return Path(path)


def _jsonable(value):
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(doc: Mapping[str, Any], path: PathLike) -> Path:
    with open(path, "w") as f:
        json.dump(_jsonable(doc), f, indent=2, sort_keys=True)
        f.write("\n")
    return Path(path)


def write_schedule(schedule: Optional[ModeSchedule], path: PathLike) -> Path:
    frame = schedule.to_frame() if schedule is not None else pd.DataFrame(columns=["switch_time_s", "mode"])
    return write_table(frame, path)


def read_schedule(path: PathLike, t_min: float, t_end: float) -> ModeSchedule:
    return ModeSchedule.from_frame(pd.read_csv(path), t_min, t_end)


def read_controls(path: PathLike) -> pd.DataFrame:
    """Control table in APPLIED_COLUMNS form.

    Also accepts a trajectory log (mode_v, u_ice, u_fr, u_em, u_gen), in which
    case both mode controls share u_ice and u_fr.
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: file is empty") from None
    if frame.empty:
        raise ValueError(f"{path}: no rows")
    if set(APPLIED_COLUMNS) <= set(frame.columns):
        table = frame[APPLIED_COLUMNS].astype(float)
    elif {"t_s", "mode_v", "u_ice", "u_fr", "u_em", "u_gen"} <= set(frame.columns):
        table = pd.DataFrame({
            "t_s": frame["t_s"], "v": frame["mode_v"],
            "u0_ice": frame["u_ice"], "u0_fr": frame["u_fr"], "u0_em": frame["u_em"],
            "u1_ice": frame["u_ice"], "u1_fr": frame["u_fr"], "u1_gen": frame["u_gen"],
        }, columns=APPLIED_COLUMNS).astype(float)
    else:
        raise ValueError(f"{path}: need columns {APPLIED_COLUMNS} or a trajectory log")
    if table.isna().any().any():
        raise ValueError(f"{path}: missing values")
    if np.any(np.diff(table["t_s"].to_numpy()) <= 0):
        raise ValueError(f"{path}: t_s must be strictly increasing")
    return table.reset_index(drop=True)


def write_nlp_description(problem, path: PathLike) -> Path:
    return write_json(problem.describe(), path)
