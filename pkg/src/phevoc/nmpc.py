"""
Receding-horizon control of the embedded problem.

Each window spans `window_length` seconds of `partition`-second intervals,
freezes the road grade at its start value and weights the terminal SOC
penalty by how far the window end lies into the cycle. Only the first
interval's controls are applied to the plant before the window slides on.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from phevoc.cost import CostWeights, terminal_cost
from phevoc.cycles import DriveCycle
from phevoc.embedding import (EmbeddedControl, ModeSchedule, project_modes,
                              resolve_controls_for_schedule)
from phevoc.model import ControlVector, VehicleParams, VehicleState
from phevoc.simulator import (APPLIED_COLUMNS, IntegrationError, LOG_COLUMNS, Simulator,
                              TrajectoryLog, TrajectorySegment)
from phevoc.solver import SolverConfig, SolverResult, solve
from phevoc.transcription import Mesh, NlpProblem, build_nlp

logger = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True)
class NmpcConfig:
    window_length: float = 4.0
    partition: float = 1.0
    apply_length: Optional[float] = None
    t_final: Optional[float] = None
    c_bat_nom: Optional[float] = None
    t_min: float = 1.0
    max_substep: float = 0.05
    max_full_intervals: int = 600

    def __post_init__(self):
        if self.partition <= 0 or self.window_length <= 0:
            raise ValueError("window_length and partition must be positive")
        k = self.window_length / self.partition
        if k < 1 - _TOL or not math.isclose(k, round(k), rel_tol=0.0, abs_tol=1e-9):
            raise ValueError("window_length must be a whole number of partitions")
        if self.apply_length is not None and not math.isclose(self.apply_length, self.partition):
            raise ValueError("apply_length must equal the partition length")
        if self.t_final is not None and self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.t_min <= 0:
            raise ValueError("t_min must be positive")

    @property
    def intervals_per_window(self) -> int:
        return int(round(self.window_length / self.partition))

    def resolved(self, cycle: DriveCycle, weights: CostWeights) -> "NmpcConfig":
        """Fill t_final from the cycle and c_bat_nom from the weights."""
        return replace(self,
                       apply_length=self.partition,
                       t_final=cycle.duration if self.t_final is None else self.t_final,
                       c_bat_nom=weights.c_bat_nom if self.c_bat_nom is None else self.c_bat_nom)


@dataclass
class NmpcStep:
    applied: EmbeddedControl
    next_state: VehicleState
    segment: TrajectorySegment
    diagnostics: Dict[str, float]
    result: SolverResult
    problem: NlpProblem
    apply_length: float


def sliding_soc_weight(t_window_end: float, config: NmpcConfig) -> float:
    """(t_window_end / t_final) * c_bat_nom, held at c_bat_nom past t_final."""
    if config.t_final is None or config.t_final <= 0:
        raise ValueError("t_final must be positive")
    if config.c_bat_nom is None:
        raise ValueError("c_bat_nom is unset; call NmpcConfig.resolved first")
    if t_window_end < -_TOL:
        raise ValueError(f"window end {t_window_end:g} s is negative")
    return float(min(max(t_window_end, 0.0), config.t_final) / config.t_final * config.c_bat_nom)


def closed_loop_cost(frame: pd.DataFrame, weights: CostWeights, c_bat: float) -> float:
    """Integral of the logged stage cost plus the terminal SOC penalty."""
    if frame.empty:
        return math.nan
    integral = trapezoid(frame["stage_cost"].to_numpy(), frame["t_s"].to_numpy())
    return float(integral + terminal_cost(float(frame["soc"].iloc[-1]), c_bat, weights))


def _shift(previous: Tuple[np.ndarray, ...], n: int) -> Tuple[np.ndarray, ...]:
    """Drop the first interval of a window solution and duplicate the last, sized to n intervals."""
    X, U0, U1, v = previous

    def fit(arr, length):
        arr = np.concatenate([arr[1:], arr[-1:]])
        if arr.shape[0] >= length:
            return arr[:length]
        pad = np.repeat(arr[-1:], length - arr.shape[0], axis=0)
        return np.concatenate([arr, pad])

    return fit(X, n + 1), fit(U0, n), fit(U1, n), fit(v, n)


def _applied_row(t: float, ec: EmbeddedControl) -> Dict[str, float]:
    return dict(zip(APPLIED_COLUMNS, [t, ec.v, *ec.u0.to_array(), *ec.u1.to_array()]))


def _schedule_from_frame(frame: pd.DataFrame, t_end: float, t_min: float) -> Optional[ModeSchedule]:
    if frame.empty:
        return None
    t = frame["t_s"].to_numpy()
    modes = frame["mode_v"].to_numpy(dtype=int)
    ends = np.append(t[1:], t_end)
    return ModeSchedule.from_segments(list(zip(t, ends, modes)), t_min)


class NmpcController:
    """Window solve, first-interval application, shift, repeat."""

    def __init__(self, simulator: Simulator, config: Optional[NmpcConfig] = None,
                 solver_config: Optional[SolverConfig] = None):
        self.sim = simulator
        self.params: VehicleParams = simulator.params
        self.weights: CostWeights = simulator.weights
        self.config = config or NmpcConfig()
        self.solver_config = solver_config or SolverConfig()

    def _window(self, t_j: float, cycle: DriveCycle) -> Tuple[Mesh, float]:
        cfg = self.config
        remaining = cycle.duration - t_j
        if remaining <= _TOL:
            raise ValueError(f"window start {t_j:g} s is at or past the cycle end")
        if remaining < cfg.partition - _TOL:
            return Mesh(t_j, 1, remaining), remaining
        n = min(cfg.intervals_per_window, int(math.floor(remaining / cfg.partition + 1e-9)))
        return Mesh(t_j, n, cfg.partition), cfg.partition

    def step(self, state: VehicleState, t_j: float, cycle: DriveCycle, warm_start=None,
             previous_mode: int = 0) -> NmpcStep:
        cfg = self.config.resolved(cycle, self.weights)
        mesh, apply_length = self._window(t_j, cycle)
        c_bat = sliding_soc_weight(mesh.t_end, cfg)
        problem = build_nlp(mesh, state, cycle, self.weights, self.params, c_bat=c_bat, freeze_grade=True)
        tx = problem.transcription
        guess = problem.initial_guess
        if warm_start is not None:
            guess = np.clip(tx.pack(*_shift(warm_start, mesh.n_intervals)), problem.lower, problem.upper)
        result = solve(problem, self.solver_config, guess)
        if not result.success:
            logger.warning("window at t=%.1f s ended %s (kkt %.2e); applying best iterate",
                           t_j, result.status.value, result.kkt)

        _, U0, U1, v = tx.unpack(result.x)
        applied = EmbeddedControl(ControlVector.from_array(np.clip(U0[0], 0.0, 1.0)),
                                  ControlVector.from_array(np.clip(U1[0], 0.0, 1.0)),
                                  float(np.clip(v[0], 0.0, 1.0)))
        next_state, segment = self.sim.step(state, applied, None, t_j, apply_length, cycle,
                                            previous_mode=previous_mode)
        diagnostics = {"t_s": t_j, "n_intervals": mesh.n_intervals, "c_bat": c_bat,
                       "status": result.status.value, "iterations": result.iterations, "kkt": result.kkt,
                       "objective": result.objective, "constraint_violation": result.constraint_violation,
                       "restorations": result.restorations}
        logger.debug("window t=%.1f s: %s in %d iterations, v=%.3f", t_j, result.status.value,
                     result.iterations, applied.v)
        return NmpcStep(applied, next_state, segment, diagnostics, result, problem, apply_length)

    def run(self, cycle: DriveCycle, x0: VehicleState) -> TrajectoryLog:
        cfg = self.config.resolved(cycle, self.weights)
        if cycle.duration < cfg.partition - _TOL:
            raise ValueError("cycle is shorter than one partition")
        state, t_j, mode = x0, 0.0, 0
        frames, applied_rows, windows, history = [], [], [], []
        clamps = []
        warm = None
        last = None
        aborted = False
        while t_j < cycle.duration - _TOL:
            try:
                step = self.step(state, t_j, cycle, warm, previous_mode=mode)
            except IntegrationError as exc:
                logger.error("NMPC aborted at t=%.2f s: %s", t_j, exc)
                aborted = True
                break
            frames.append(step.segment.frame)
            clamps += step.segment.clamp_events
            applied_rows.append(_applied_row(t_j, step.applied))
            windows.append(step.diagnostics)
            history += [{"window": len(windows) - 1, **rec} for rec in step.result.history]
            warm = step.problem.transcription.unpack(step.result.x)
            mode = step.segment.end_mode
            state = step.next_state
            t_j = t_j + step.apply_length
            last = step

        if last is not None and not aborted:
            frames.append(self.sim.end_row(state, t_j, mode, last.applied, cycle))
        frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=LOG_COLUMNS)
        applied = pd.DataFrame(applied_rows, columns=APPLIED_COLUMNS)
        log = TrajectoryLog(frame=frame, applied=applied, windows=pd.DataFrame(windows),
                            solver_history=pd.DataFrame(history),
                            schedule=_schedule_from_frame(frame, t_j, cfg.t_min),
                            aborted=aborted, clamp_events=clamps)
        log.costs["closed_loop_cost"] = closed_loop_cost(frame, self.weights, cfg.c_bat_nom)
        if not aborted:
            log.costs["sequence_cost"] = self.sequence_cost(cycle, x0, applied)
        logger.info("NMPC run over %.0f s: %d windows, %d non-optimal, final SOC %.4f",
                    cycle.duration, len(windows), log.solver_failures,
                    frame["soc"].iloc[-1] if not frame.empty else math.nan)
        return log

    def _full_problem(self, cycle: DriveCycle, x0: VehicleState) -> NlpProblem:
        cfg = self.config.resolved(cycle, self.weights)
        n = int(round(cycle.duration / cfg.partition))
        if not math.isclose(n * cfg.partition, cycle.duration, rel_tol=0.0, abs_tol=1e-9):
            raise ValueError("cycle duration must be a whole number of partitions for a full-horizon solve")
        if n > cfg.max_full_intervals:
            raise ValueError(f"full-horizon problem with {n} intervals exceeds the {cfg.max_full_intervals} limit")
        return build_nlp(Mesh(0.0, n, cfg.partition), x0, cycle, self.weights, self.params,
                         c_bat=cfg.c_bat_nom, freeze_grade=False)

    def sequence_cost(self, cycle: DriveCycle, x0: VehicleState, applied: pd.DataFrame) -> float:
        """Cost of an applied control table scored in the full-horizon NLP instance."""
        try:
            problem = self._full_problem(cycle, x0)
        except ValueError as exc:
            logger.debug("no comparable sequence cost: %s", exc)
            return math.nan
        if len(applied) != problem.transcription.mesh.n_intervals:
            return math.nan
        u0 = applied[["u0_ice", "u0_fr", "u0_em"]].to_numpy()
        u1 = applied[["u1_ice", "u1_fr", "u1_gen"]].to_numpy()
        _, cost = problem.transcription.score_controls(u0, u1, applied["v"].to_numpy())
        return float(cost)

    def run_full_horizon(self, cycle: DriveCycle, x0: VehicleState,
                         warm_start: Optional[pd.DataFrame] = None) -> TrajectoryLog:
        """Embedded solve over the whole cycle, projection to a switched schedule,
        re-solve for that schedule and plant replay of the result."""
        cfg = self.config.resolved(cycle, self.weights)
        problem = self._full_problem(cycle, x0)
        tx = problem.transcription
        guess = problem.initial_guess
        if warm_start is not None and len(warm_start) == tx.mesh.n_intervals:
            guess, _ = tx.score_controls(warm_start[["u0_ice", "u0_fr", "u0_em"]].to_numpy(),
                                         warm_start[["u1_ice", "u1_fr", "u1_gen"]].to_numpy(),
                                         warm_start["v"].to_numpy())
            guess = np.clip(guess, problem.lower, problem.upper)
        result = solve(problem, self.solver_config, guess)
        embedded_cost = tx.performance_index(result.x)
        logger.info("full-horizon embedded solve: %s, cost %.6g", result.status.value, embedded_cost)

        nodes = tx.mesh.nodes
        X, U0, U1, v = tx.unpack(result.x)
        embedded = pd.DataFrame(np.column_stack([nodes[:-1], v, U0, U1]), columns=APPLIED_COLUMNS)
        schedule = project_modes(nodes, v, U0, U1, cfg.t_min)
        resolved = resolve_controls_for_schedule(schedule, problem, self.solver_config, warm_start=result.x)

        applied = pd.DataFrame(np.column_stack([nodes[:-1], resolved.modes, resolved.u0, resolved.u1]),
                               columns=APPLIED_COLUMNS)
        applied[APPLIED_COLUMNS[1:]] = applied[APPLIED_COLUMNS[1:]].clip(0.0, 1.0)
        replay = self.sim.replay(cycle, x0, applied)

        windows = pd.DataFrame([
            {"t_s": 0.0, "n_intervals": tx.mesh.n_intervals, "c_bat": cfg.c_bat_nom, "stage": "embedded",
             "status": result.status.value, "iterations": result.iterations, "kkt": result.kkt,
             "objective": result.objective, "constraint_violation": result.constraint_violation,
             "restorations": result.restorations},
            {"t_s": 0.0, "n_intervals": tx.mesh.n_intervals, "c_bat": cfg.c_bat_nom, "stage": "switched",
             "status": resolved.result.status.value, "iterations": resolved.result.iterations,
             "kkt": resolved.result.kkt, "objective": resolved.result.objective,
             "constraint_violation": resolved.result.constraint_violation,
             "restorations": resolved.result.restorations},
        ])
        history = pd.DataFrame([{"window": 0, **rec} for rec in result.history]
                               + [{"window": 1, **rec} for rec in resolved.result.history])
        log = TrajectoryLog(frame=replay.frame, applied=applied, windows=windows, solver_history=history,
                            schedule=schedule, aborted=replay.aborted, clamp_events=replay.clamp_events,
                            embedded=embedded)
        log.costs.update({"embedded_cost": embedded_cost, "switched_cost": resolved.cost,
                          "closed_loop_cost": closed_loop_cost(replay.frame, self.weights, cfg.c_bat_nom)})
        return log


def nmpc_step(state: VehicleState, t_j: float, cycle: DriveCycle, params: VehicleParams, weights: CostWeights,
              config: Optional[NmpcConfig] = None, solver_config: Optional[SolverConfig] = None,
              warm_start=None, previous_mode: int = 0) -> NmpcStep:
    config = config or NmpcConfig()
    sim = Simulator(params, weights, config.max_substep)
    return NmpcController(sim, config, solver_config).step(state, t_j, cycle, warm_start, previous_mode)


def run_nmpc(cycle: DriveCycle, x0: VehicleState, params: VehicleParams, weights: CostWeights,
             config: Optional[NmpcConfig] = None, solver_config: Optional[SolverConfig] = None) -> TrajectoryLog:
    config = config or NmpcConfig()
    sim = Simulator(params, weights, config.max_substep)
    return NmpcController(sim, config, solver_config).run(cycle, x0)


def run_full_horizon(cycle: DriveCycle, x0: VehicleState, params: VehicleParams, weights: CostWeights,
                     config: Optional[NmpcConfig] = None, solver_config: Optional[SolverConfig] = None,
                     warm_start: Optional[pd.DataFrame] = None) -> TrajectoryLog:
    config = config or NmpcConfig()
    sim = Simulator(params, weights, config.max_substep)
    return NmpcController(sim, config, solver_config).run_full_horizon(cycle, x0, warm_start)
