"""
Convex embedding of the bi-modal system and recovery of switched schedules.

The embedded field is f_E = (1 - v) f_0(x, u0) + v f_1(x, u1) with v in [0, 1].
Fractional v is turned back into a realizable 0/1 schedule either by PWM
(duty cycle equal to the windowed mean of v) or by the norm-comparison
projection, after which the controls can be re-solved for the fixed sequence.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from phevoc.model import ControlVector, StateRate, VehicleParams, VehicleState, rates_and_jacobians
from phevoc.solver import SolverConfig, SolverResult, solve
from phevoc.transcription import NlpProblem

logger = logging.getLogger(__name__)

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddedControl:
    u0: ControlVector
    u1: ControlVector
    v: float

    def __post_init__(self):
        if not 0.0 <= self.v <= 1.0:
            raise ValueError(f"embedded mode value {self.v} outside [0, 1]")


@dataclass(frozen=True)
class ModeSchedule:
    """Piecewise-constant 0/1 mode signal on [t_start, t_end]."""
    switch_times: Tuple[float, ...]
    initial_mode: int
    t_min: float
    t_start: float = 0.0
    t_end: float = math.inf

    def __post_init__(self):
        times = tuple(float(t) for t in self.switch_times)
        object.__setattr__(self, "switch_times", times)
        if self.initial_mode not in (0, 1):
            raise ValueError(f"initial mode must be 0 or 1, got {self.initial_mode!r}")
        if self.t_end < self.t_start:
            raise ValueError("schedule ends before it starts")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("switch times must be strictly increasing")
        if times and (times[0] < self.t_start - _EDGE_TOL or times[-1] > self.t_end + _EDGE_TOL):
            raise ValueError("switch times must lie inside the schedule horizon")

    @classmethod
    def from_segments(cls, segments: Sequence[Tuple[float, float, int]], t_min: float) -> "ModeSchedule":
        """Collapse (start, end, mode) pieces, dropping empty ones and merging equal neighbours."""
        pieces = [s for s in segments if s[1] - s[0] > _EDGE_TOL * max(1.0, abs(s[1]))]
        if not pieces:
            raise ValueError("schedule has no non-empty segment")
        switches = [a for (a, _, m), (_, _, prev) in zip(pieces[1:], pieces[:-1]) if m != prev]
        return cls(tuple(switches), int(pieces[0][2]), t_min, segments[0][0], segments[-1][1])

    @classmethod
    def constant(cls, mode: int, t_start: float, t_end: float, t_min: float = 1.0) -> "ModeSchedule":
        return cls((), mode, t_min, t_start, t_end)

    def mode_at(self, t):
        count = np.searchsorted(np.asarray(self.switch_times), t, side="right")
        return np.bitwise_xor(self.initial_mode, count % 2)

    def segments(self) -> List[Tuple[float, float, int]]:
        edges = [self.t_start, *self.switch_times, self.t_end]
        return [(a, b, int((self.initial_mode + k) % 2)) for k, (a, b) in enumerate(zip(edges, edges[1:]))]

    def duty(self, a: float, b: float) -> float:
        """Fraction of [a, b] spent in mode 1."""
        if b <= a:
            raise ValueError("empty interval")
        on = sum(max(0.0, min(b, hi) - max(a, lo)) for lo, hi, m in self.segments() if m == 1)
        return on / (b - a)

    def dwell_violations(self) -> List[Tuple[float, float]]:
        """Consecutive switches closer than t_min."""
        times = self.switch_times
        return [(a, b) for a, b in zip(times, times[1:]) if b - a < self.t_min - _EDGE_TOL]

    @property
    def n_switches(self) -> int:
        return len(self.switch_times)

    def to_frame(self) -> pd.DataFrame:
        rows = [(self.t_start, self.initial_mode)]
        rows += [(t, int((self.initial_mode + k + 1) % 2)) for k, t in enumerate(self.switch_times)]
        return pd.DataFrame(rows, columns=["switch_time_s", "mode"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, t_min: float, t_end: float) -> "ModeSchedule":
        if frame.empty:
            raise ValueError("schedule table is empty")
        times = frame["switch_time_s"].astype(float).tolist()
        modes = frame["mode"].astype(int).tolist()
        segments = [(a, b, m) for a, b, m in zip(times, times[1:] + [t_end], modes)]
        return cls.from_segments(segments, t_min)


@dataclass
class ResolvedControls:
    """Controls re-optimized for a fixed mode sequence."""
    modes: np.ndarray
    states: np.ndarray
    u0: np.ndarray
    u1: np.ndarray
    cost: float
    result: SolverResult = field(repr=False)


def embedded_dynamics(state: VehicleState, ec: EmbeddedControl, grade_alpha: float,
                      params: VehicleParams, exact_sign: bool = False) -> StateRate:
    x = state.to_array()
    f0, _, _ = rates_and_jacobians(x, ec.u0.to_array(), 0, grade_alpha, params, exact_sign, jacobians=False)
    f1, _, _ = rates_and_jacobians(x, ec.u1.to_array(), 1, grade_alpha, params, exact_sign, jacobians=False)
    return StateRate.from_array((1.0 - ec.v) * f0[0] + ec.v * f1[0])


def _window_edges(t_start: float, t_end: float, length: float) -> np.ndarray:
    """Windows anchored at t_start; a trailing partial window merges into its predecessor."""
    span = t_end - t_start
    n_full = int(math.floor(span / length + 1e-9))
    if n_full < 1:
        raise ValueError(f"horizon {span:g} s is shorter than the window length {length:g} s")
    edges = t_start + length * np.arange(n_full + 1, dtype=float)
    edges[-1] = t_end
    return edges


def _window_mean(times: np.ndarray, values: np.ndarray, a: float, b: float) -> np.ndarray:
    """Time-weighted mean of a zero-order-hold trace over [a, b]."""
    if b - a <= 0:
        raise ValueError("empty averaging window")
    weights = np.clip(times[1:], a, b) - np.clip(times[:-1], a, b)
    if not np.any(weights > 0):
        raise ValueError(f"no samples in window [{a:g}, {b:g}]")
    return np.tensordot(weights, values, axes=(0, 0)) / (b - a)


def _check_trace(times, values) -> Tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need at least two grid nodes")
    if values.shape[0] != times.size - 1:
        raise ValueError("a zero-order-hold trace has one sample per grid interval")
    if np.any(np.diff(times) <= 0):
        raise ValueError("grid nodes must be strictly increasing")
    return times, values


def pwm_schedule(times, v_trace, t_min: float, start_mode: int = 0) -> ModeSchedule:
    """Duty-cycle realization of a fractional mode trace.

    Each window [t1, t2] spends (1 - v_bar)(t2 - t1) in one mode and v_bar(t2 - t1) in
    mode 1; a window starts in the mode the previous one ended in.
    """
    times, v = _check_trace(times, v_trace)
    length = max(t_min, float(np.min(np.diff(times))))
    edges = _window_edges(times[0], times[-1], length)
    current = int(start_mode)
    segments = []
    for a, b in zip(edges[:-1], edges[1:]):
        v_bar = float(np.clip(_window_mean(times, v, a, b), 0.0, 1.0))
        if current == 0:
            t_switch = b - v_bar * (b - a)
            segments += [(a, t_switch, 0), (t_switch, b, 1)]
            current = 1 if v_bar > 0.0 else 0
        else:
            t_switch = a + v_bar * (b - a)
            segments += [(a, t_switch, 1), (t_switch, b, 0)]
            current = 0 if v_bar < 1.0 else 1
    return ModeSchedule.from_segments(segments, t_min)


def project_modes(times, v_trace, u0_trace, u1_trace, t_min: float) -> ModeSchedule:
    """One mode per window by comparing the windowed mean mode-weighted controls.

    Mode 0 wins when |mean((1 - v) u0)| >= |mean(v u1)|. When both are zero the
    window's mean v decides.
    """
    times, v = _check_trace(times, v_trace)
    u0 = np.asarray(u0_trace, dtype=float).reshape(v.size, -1)
    u1 = np.asarray(u1_trace, dtype=float).reshape(v.size, -1)
    step = float(np.max(np.diff(times)))
    if t_min < step - _EDGE_TOL:
        raise ValueError(f"t_min {t_min:g} s is shorter than the grid step {step:g} s")
    edges = _window_edges(times[0], times[-1], t_min)
    segments = []
    for a, b in zip(edges[:-1], edges[1:]):
        norm0 = np.linalg.norm(_window_mean(times, (1.0 - v)[:, None] * u0, a, b))
        norm1 = np.linalg.norm(_window_mean(times, v[:, None] * u1, a, b))
        if norm0 == 0.0 and norm1 == 0.0:
            mode = int(_window_mean(times, v, a, b) > 0.5)
        else:
            mode = 0 if norm0 >= norm1 else 1
        segments.append((a, b, mode))
    schedule = ModeSchedule.from_segments(segments, t_min)
    logger.debug("projected %d windows to %d switches", len(segments), schedule.n_switches)
    return schedule


def interval_modes(schedule: ModeSchedule, nodes) -> np.ndarray:
    """0/1 mode per mesh interval; a switch strictly inside an interval is an error."""
    nodes = np.asarray(nodes, dtype=float)
    if schedule.t_start > nodes[0] + _EDGE_TOL or schedule.t_end < nodes[-1] - _EDGE_TOL:
        raise ValueError(
            f"schedule [{schedule.t_start:g}, {schedule.t_end:g}] does not cover the horizon "
            f"[{nodes[0]:g}, {nodes[-1]:g}]")
    modes = []
    for a, b in zip(nodes[:-1], nodes[1:]):
        duty = schedule.duty(a, b)
        if _EDGE_TOL < duty < 1.0 - _EDGE_TOL:
            raise ValueError(f"schedule switches inside interval [{a:g}, {b:g}]")
        modes.append(int(round(duty)))
    return np.array(modes, dtype=int)


def resolve_controls_for_schedule(schedule: ModeSchedule, ocp: NlpProblem,
                                  config: Optional[SolverConfig] = None,
                                  warm_start: Optional[np.ndarray] = None) -> ResolvedControls:
    """Re-solve the transcribed problem with v pinned to the schedule's 0/1 values."""
    tx = ocp.transcription
    if tx is None:
        raise ValueError("problem carries no collocation layout")
    modes = interval_modes(schedule, tx.mesh.nodes)
    fixed = ocp.with_fixed_modes(modes)
    start = np.array(ocp.initial_guess if warm_start is None else warm_start, dtype=float)
    start[tx.layout.v_index] = modes
    result = solve(fixed, config or SolverConfig(), start)
    states, u0, u1, _ = tx.unpack(result.x)
    cost = tx.performance_index(result.x)
    logger.info("re-solved %d intervals for a fixed sequence with %d switches: cost %.6g (%s)",
                modes.size, schedule.n_switches, cost, result.status.value)
    return ResolvedControls(modes=modes, states=states, u0=u0, u1=u1, cost=cost, result=result)
