import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from phevoc.cost import CostWeights, stage_cost_from_flows
from phevoc.cycles import DriveCycle
from phevoc.embedding import EmbeddedControl, ModeSchedule
from phevoc.model import (STATE_FIELDS, ControlVector, DomainError, VehicleParams, VehicleState,
                          flow_arrays, rates_and_jacobians, state_bounds)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["t_s", "v_des_mps", "v_mps", "p_ice_kw", "soc", "mode_v", "u_ice", "u_fr", "u_em",
               "u_gen", "p_ed_out_kw", "p_bat_kw", "p_fr_kw", "p_fuel_kw", "grade_deg", "stage_cost"]
APPLIED_COLUMNS = ["t_s", "v", "u0_ice", "u0_fr", "u0_em", "u1_ice", "u1_fr", "u1_gen"]

ModeSignal = Union[int, float, ModeSchedule, None]


class IntegrationError(RuntimeError):
    """Plant state became non-finite or left the model domain."""


@dataclass(frozen=True)
class ClampEvent:
    t: float
    field: str
    value: float


@dataclass
class TrajectorySegment:
    """Plant record over [t0, t0 + duration); the end node belongs to the next segment."""
    frame: pd.DataFrame
    end_mode: int
    clamp_events: List[ClampEvent] = field(default_factory=list)


@dataclass
class TrajectoryLog:
    """Closed-loop record of a run."""
    frame: pd.DataFrame
    applied: pd.DataFrame
    windows: pd.DataFrame
    solver_history: pd.DataFrame
    schedule: Optional[ModeSchedule] = None
    aborted: bool = False
    costs: Dict[str, float] = field(default_factory=dict)
    clamp_events: List[ClampEvent] = field(default_factory=list)
    embedded: Optional[pd.DataFrame] = None

    @property
    def solver_failures(self) -> int:
        if self.windows.empty or "status" not in self.windows:
            return 0
        return int((self.windows["status"] != "optimal").sum())

    @property
    def final_state(self) -> VehicleState:
        last = self.frame.iloc[-1]
        return VehicleState(p_ice=float(last["p_ice_kw"]), soc=float(last["soc"]), v=float(last["v_mps"]))


def _mode_pieces(mode_signal: ModeSignal, t0: float, duration: float,
                 previous_mode: int) -> List[Tuple[float, float, int]]:
    """Constant-mode pieces covering [t0, t0 + duration]."""
    t1 = t0 + duration
    if isinstance(mode_signal, ModeSchedule):
        pieces = [(max(a, t0), min(b, t1), m) for a, b, m in mode_signal.segments() if min(b, t1) > max(a, t0)]
        if not pieces or pieces[0][0] > t0 + 1e-9 or pieces[-1][1] < t1 - 1e-9:
            raise ValueError(f"mode schedule does not cover [{t0:g}, {t1:g}]")
        return pieces
    v = float(mode_signal)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"mode signal {v} outside [0, 1]")
    if v in (0.0, 1.0):
        return [(t0, t1, int(v))]
    # fractional v: duty cycle inside the interval, starting in the previous mode
    if previous_mode == 0:
        t_switch = t1 - v * duration
        return [(t0, t_switch, 0), (t_switch, t1, 1)]
    t_switch = t0 + v * duration
    return [(t0, t_switch, 1), (t_switch, t1, 0)]


def _controls_for(controls, mode: int) -> np.ndarray:
    if isinstance(controls, EmbeddedControl):
        return (controls.u0 if mode == 0 else controls.u1).to_array()
    return controls.to_array()


def log_rows(times, states, modes, controls, v_des, grade, params: VehicleParams,
             weights: CostWeights) -> pd.DataFrame:
    """Trajectory rows with every logged power flow, for stacked samples."""
    states = np.atleast_2d(states)
    controls = np.atleast_2d(controls)
    modes = np.asarray(modes, dtype=int)
    flows = {k: np.zeros(len(modes)) for k in ("p_ed_out", "p_bat", "p_fr", "p_fuel")}
    for mode in (0, 1):
        rows = modes == mode
        if rows.any():
            part = flow_arrays(states[rows], controls[rows], mode, params)
            for key in flows:
                flows[key][rows] = part[key]
    cost = stage_cost_from_flows(states, flows, v_des, weights)
    return pd.DataFrame({
        "t_s": times, "v_des_mps": v_des, "v_mps": states[:, 2], "p_ice_kw": states[:, 0],
        "soc": states[:, 1], "mode_v": modes, "u_ice": controls[:, 0], "u_fr": controls[:, 1],
        "u_em": np.where(modes == 0, controls[:, 2], 0.0), "u_gen": np.where(modes == 1, controls[:, 2], 0.0),
        "p_ed_out_kw": flows["p_ed_out"], "p_bat_kw": flows["p_bat"], "p_fr_kw": flows["p_fr"],
        "p_fuel_kw": flows["p_fuel"], "grade_deg": np.degrees(grade), "stage_cost": cost,
    }, columns=LOG_COLUMNS)


def integrate_plant(state: VehicleState, controls: Union[EmbeddedControl, ControlVector],
                    mode_signal: ModeSignal, duration: float, grade_fn: Callable, params: VehicleParams,
                    *, t0: float = 0.0, v_des_fn: Optional[Callable] = None,
                    weights: Optional[CostWeights] = None, previous_mode: int = 0,
                    max_substep: float = 0.05) -> Tuple[VehicleState, TrajectorySegment]:
    """Fixed-step RK4 of the switched plant over [t0, t0 + duration].

    Uses the exact sign of V in the drag term. After each substep the state is
    clamped into its invariant box and every clamp is recorded. With an
    EmbeddedControl and mode_signal None the control's own v is applied.
    """
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if not max_substep > 0:
        raise ValueError("max_substep must be positive")
    if mode_signal is None:
        if not isinstance(controls, EmbeddedControl):
            raise ValueError("a mode signal is required with plain controls")
        mode_signal = controls.v
    weights = weights or CostWeights()
    v_des_fn = v_des_fn or (lambda t: 0.0)
    lower, upper = state_bounds(params)
    pieces = _mode_pieces(mode_signal, t0, duration, previous_mode)

    x = state.to_array()
    times, states, modes, used, clamps = [], [], [], [], []
    for a, b, mode in pieces:
        if b - a <= 1e-12:
            continue
        u = _controls_for(controls, mode)
        n_sub = max(1, math.ceil((b - a) / max_substep - 1e-9))
        dt = (b - a) / n_sub

        def rate(t, y, u=u, mode=mode):
            f, _, _ = rates_and_jacobians(y, u, mode, grade_fn(t), params, exact_sign=True, jacobians=False)
            return f[0]

        for k in range(n_sub):
            t = a + k * dt
            times.append(t)
            states.append(x.copy())
            modes.append(mode)
            used.append(u)
            try:
                k1 = rate(t, x)
                k2 = rate(t + 0.5 * dt, x + 0.5 * dt * k1)
                k3 = rate(t + 0.5 * dt, x + 0.5 * dt * k2)
                k4 = rate(t + dt, x + dt * k3)
            except DomainError as exc:
                raise IntegrationError(f"model domain left at t={t:.4f} s, state {x}: {exc}") from exc
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise IntegrationError(f"non-finite plant state at t={t + dt:.4f} s: {x}")
            clipped = np.clip(x, lower, upper)
            for i in np.flatnonzero(np.abs(clipped - x) > 1e-12):
                clamps.append(ClampEvent(t + dt, STATE_FIELDS[i], float(x[i])))
                logger.debug("clamped %s=%.6g at t=%.3f s", STATE_FIELDS[i], x[i], t + dt)
            x = clipped

    times = np.asarray(times)
    grade = np.asarray([grade_fn(t) for t in times], dtype=float)
    v_des = np.asarray([v_des_fn(t) for t in times], dtype=float)
    frame = log_rows(times, np.asarray(states), modes, np.asarray(used), v_des, grade, params, weights)
    return VehicleState.from_array(x), TrajectorySegment(frame, pieces[-1][2], clamps)


class Simulator:
    """Plant integration against a drive cycle."""

    def __init__(self, params: VehicleParams, weights: Optional[CostWeights] = None, max_substep: float = 0.05):
        self.params = params
        self.weights = weights or CostWeights()
        self.max_substep = max_substep

    def step(self, state: VehicleState, controls, mode_signal: ModeSignal, t0: float, duration: float,
             cycle: DriveCycle, previous_mode: int = 0) -> Tuple[VehicleState, TrajectorySegment]:
        return integrate_plant(state, controls, mode_signal, duration, cycle.grade_at, self.params,
                               t0=t0, v_des_fn=cycle.speed_at, weights=self.weights,
                               previous_mode=previous_mode, max_substep=self.max_substep)

    def end_row(self, state: VehicleState, t: float, mode: int, controls, cycle: DriveCycle) -> pd.DataFrame:
        """Final trajectory node, logged with the last applied controls."""
        u = _controls_for(controls, mode)
        return log_rows(np.array([t]), state.to_array()[None], [mode], u[None], np.array([cycle.speed_at(t)]),
                        np.array([cycle.grade_at(t)]), self.params, self.weights)

    def replay(self, cycle: DriveCycle, x0: VehicleState, applied: pd.DataFrame) -> TrajectoryLog:
        """Drive the plant with a control table (APPLIED_COLUMNS); row k holds until row k+1 starts."""
        missing = set(APPLIED_COLUMNS) - set(applied.columns)
        if missing:
            raise ValueError(f"control table lacks columns {sorted(missing)}")
        if applied.empty:
            raise ValueError("control table is empty")
        starts = applied["t_s"].to_numpy(dtype=float)
        ends = np.append(starts[1:], cycle.duration)
        if np.any(ends <= starts):
            raise ValueError("control rows must start at increasing times inside the cycle")

        state, mode = x0, 0
        segments, clamps = [], []
        aborted = False
        ec = None
        for (_, row), t_start, t_end in zip(applied.iterrows(), starts, ends):
            ec = EmbeddedControl(ControlVector(row.u0_ice, row.u0_fr, row.u0_em),
                                 ControlVector(row.u1_ice, row.u1_fr, row.u1_gen), float(row.v))
            try:
                state, segment = self.step(state, ec, None, t_start, t_end - t_start, cycle, previous_mode=mode)
            except IntegrationError as exc:
                logger.error("replay aborted: %s", exc)
                aborted = True
                break
            segments.append(segment.frame)
            clamps += segment.clamp_events
            mode = segment.end_mode
        if segments and not aborted:
            segments.append(self.end_row(state, float(ends[-1]), mode, ec, cycle))
        frame = pd.concat(segments, ignore_index=True) if segments else pd.DataFrame(columns=LOG_COLUMNS)
        return TrajectoryLog(frame=frame, applied=applied[APPLIED_COLUMNS].reset_index(drop=True),
                             windows=pd.DataFrame(), solver_history=pd.DataFrame(), aborted=aborted,
                             clamp_events=clamps)
