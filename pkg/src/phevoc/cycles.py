"""Drive cycles: loading, generation, road grade and fuel economy."""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from phevoc.model import VehicleParams

logger = logging.getLogger(__name__)

MPH_TO_MPS = 0.44704
KPH_TO_MPS = 1.0 / 3.6
SPEED_UNITS = {"mph": MPH_TO_MPS, "mps": 1.0, "kph": KPH_TO_MPS}
METERS_PER_MILE = 1609.344
LITERS_PER_GALLON = 3.785411784


class CycleFormatError(ValueError):
    """Malformed drive cycle file; the message carries path:line."""


@dataclass(frozen=True, eq=False)
class DriveCycle:
    """Sampled reference: time (s), desired speed (m/s), road grade (rad)."""
    t: np.ndarray
    v_des: np.ndarray
    grade: np.ndarray
    name: str = "cycle"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.v_des, dtype=float)
        grade = np.zeros_like(t) if self.grade is None else np.asarray(self.grade, dtype=float)
        if t.ndim != 1 or t.size < 2 or v.shape != t.shape or grade.shape != t.shape:
            raise ValueError("cycle needs at least two samples of time, speed and grade")
        if t[0] != 0.0:
            raise ValueError(f"cycle must start at t=0, starts at {t[0]:g}")
        if np.any(np.diff(t) <= 0):
            raise ValueError("cycle times must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("desired speed must be non-negative")
        if np.any(np.abs(grade) >= math.pi / 2):
            raise ValueError("road grade must lie strictly between -90 and 90 degrees")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v_des", v)
        object.__setattr__(self, "grade", grade)

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    @property
    def samples(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.t.tolist(), self.v_des.tolist(), self.grade.tolist()))

    def speed_at(self, t):
        return np.interp(t, self.t, self.v_des)

    def grade_at(self, t):
        return np.interp(t, self.t, self.grade)

    def with_grade(self, grade_fn: Callable[[np.ndarray], np.ndarray]) -> "DriveCycle":
        return DriveCycle(self.t, self.v_des, np.asarray(grade_fn(self.t), dtype=float), self.name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_s": self.t, "v_des_mps": self.v_des, "grade_deg": np.degrees(self.grade)})


# --- files ------------------------------------------------------------------

def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_cycle_csv(path: Union[str, Path], speed_unit: str = "mph") -> DriveCycle:
    """Read `time, speed[, grade_deg]` rows, comma or tab separated.

    Leading title and header lines (anything whose first field is not a number)
    are skipped, so EPA schedule files load as published.
    """
    if speed_unit not in SPEED_UNITS:
        raise ValueError(f"speed unit must be one of {sorted(SPEED_UNITS)}, got {speed_unit!r}")
    path = Path(path)
    lines = path.read_text().splitlines()
    delimiter = "\t" if any("\t" in line for line in lines[:5]) else ","

    start = next((i for i, line in enumerate(lines)
                  if line.strip() and _is_number(line.split(delimiter)[0].strip())), None)
    if start is None:
        raise CycleFormatError(f"{path}: no data rows")

    rows = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        fields = [f.strip() for f in next(csv.reader([line], delimiter=delimiter)) if f.strip()]
        if len(fields) not in (2, 3):
            raise CycleFormatError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise CycleFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if not all(math.isfinite(x) for x in values):
            raise CycleFormatError(f"{path}:{lineno}: non-finite value")
        rows.append((lineno, values + [0.0] * (3 - len(values))))

    frame = pd.DataFrame([r for _, r in rows], columns=["t_s", "speed", "grade_deg"])
    frame.index = [lineno for lineno, _ in rows]
    bad = frame.index[np.r_[False, np.diff(frame["t_s"].to_numpy()) <= 0]]
    if len(bad):
        raise CycleFormatError(f"{path}:{bad[0]}: time does not increase")
    bad = frame.index[frame["speed"] < 0]
    if len(bad):
        raise CycleFormatError(f"{path}:{bad[0]}: negative speed")
    bad = frame.index[frame["grade_deg"].abs() >= 90.0]
    if len(bad):
        raise CycleFormatError(f"{path}:{bad[0]}: grade must be within (-90, 90) degrees")
    if frame["t_s"].iloc[0] != 0.0:
        raise CycleFormatError(f"{path}:{frame.index[0]}: cycle must start at t=0")

    cycle = DriveCycle(frame["t_s"].to_numpy(), frame["speed"].to_numpy() * SPEED_UNITS[speed_unit],
                       np.radians(frame["grade_deg"].to_numpy()), name=path.stem)
    logger.info("loaded %s: %d samples, %.0f s", path, len(frame), cycle.duration)
    return cycle


def write_cycle_csv(cycle: DriveCycle, path: Union[str, Path], speed_unit: str = "mps") -> Path:
    if speed_unit not in SPEED_UNITS:
        raise ValueError(f"speed unit must be one of {sorted(SPEED_UNITS)}, got {speed_unit!r}")
    path = Path(path)
    frame = pd.DataFrame({"t_s": cycle.t, "speed": cycle.v_des / SPEED_UNITS[speed_unit],
                          "grade_deg": np.degrees(cycle.grade)})
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


# --- generators ---------------------------------------------------------------

def _sample_times(duration: float, dt: float) -> np.ndarray:
    n = int(round(duration / dt))
    if n < 1 or not math.isclose(n * dt, duration, rel_tol=0.0, abs_tol=1e-9):
        raise ValueError(f"duration {duration:g} s is not a positive multiple of the {dt:g} s sample step")
    return dt * np.arange(n + 1, dtype=float)


def sawtooth_cycle(period: float = 45.0, peak: float = 25.0, n_periods: int = 1,
                   duration: Optional[float] = None, rise_fraction: float = 2.0 / 3.0,
                   dt: float = 1.0) -> DriveCycle:
    """Linear ramp to `peak` over rise_fraction of each period, then linearly back to zero."""
    if peak < 0:
        raise ValueError("sawtooth peak must be non-negative")
    if period <= 0 or not 0.0 < rise_fraction < 1.0:
        raise ValueError("need period > 0 and rise_fraction in (0, 1)")
    total = period * n_periods if duration is None else duration
    t = _sample_times(total, dt)
    phase = np.mod(t, period)
    rise = rise_fraction * period
    v = np.where(phase <= rise, peak * phase / rise, peak * (period - phase) / (period - rise))
    v[np.isclose(phase, rise, rtol=0.0, atol=1e-9)] = peak
    return DriveCycle(t, np.clip(v, 0.0, None), np.zeros_like(t), name="sawtooth")


def highway_like_cycle(duration: float = 100.0, cruise: float = 22.0, dt: float = 1.0) -> DriveCycle:
    """Smooth highway profile: cosine ramp-up over the first fifth, cruise with a gentle
    oscillation, cosine ramp-down over the last fifth."""
    t = _sample_times(duration, dt)
    ramp = 0.2 * duration
    v = np.empty_like(t)
    up = t < ramp
    down = t > duration - ramp
    mid = ~(up | down)
    v[up] = 0.5 * cruise * (1.0 - np.cos(math.pi * t[up] / ramp))
    v[mid] = cruise + 2.0 * np.sin(2.0 * math.pi * (t[mid] - ramp) / (0.4 * duration))
    v[down] = 0.5 * cruise * (1.0 + np.cos(math.pi * (t[down] - (duration - ramp)) / ramp))
    return DriveCycle(t, np.clip(v, 0.0, None), np.zeros_like(t), name="highway_like")


def constant_cycle(speed: float, duration: float, dt: float = 1.0) -> DriveCycle:
    t = _sample_times(duration, dt)
    return DriveCycle(t, np.full_like(t, float(speed)), np.zeros_like(t), name="constant")


def sinusoidal_grade(amplitude: float, duration: float) -> Callable:
    """grade(t) = amplitude sin(2 pi t / duration): uphill first half, downhill second."""
    if abs(amplitude) >= math.pi / 2:
        raise ValueError("grade amplitude must be below 90 degrees")
    if duration <= 0:
        raise ValueError("grade period must be positive")

    def grade(t):
        return amplitude * np.sin(2.0 * math.pi * np.asarray(t, dtype=float) / duration)

    return grade


# --- fuel economy ---------------------------------------------------------------

def fuel_volume(log, params: VehicleParams) -> float:
    """Litres burnt: integral of fuel power (kW) over time divided by the energy density."""
    frame = getattr(log, "frame", log)
    if len(frame) == 0:
        raise ValueError("empty trajectory")
    energy_kj = trapezoid(frame["p_fuel_kw"].to_numpy(), frame["t_s"].to_numpy())
    return float(energy_kj / (params.fuel_energy_density * 1000.0))


def fuel_economy(log, params: VehicleParams) -> float:
    """Miles per US gallon; +inf when no fuel was burnt."""
    frame = getattr(log, "frame", log)
    litres = fuel_volume(frame, params)
    distance_m = trapezoid(frame["v_mps"].to_numpy(), frame["t_s"].to_numpy())
    if litres <= 0.0:
        return math.inf
    return float((distance_m / METERS_PER_MILE) / (litres / LITERS_PER_GALLON))
