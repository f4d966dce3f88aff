"""
Direct collocation of the embedded optimal control problem.

States use triangular (hat) basis functions on a uniform mesh, controls and the
embedded mode value are piecewise constant per interval. Dynamics are enforced
by midpoint defects, the integral cost by the trapezoid rule in the state
argument with interval-constant controls.

The NLP works in scaled variables (state value / typical magnitude) so the
quasi-Newton solver sees comparable curvatures; `CollocationNlp.pack` and
`unpack` convert to and from physical units.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import root

from phevoc.cost import CostWeights, barrier_terms, stage_cost_terms, terminal_terms
from phevoc.model import (CONTROL_FIELDS, STATE_FIELDS, VehicleParams, VehicleState,
                          rates_and_jacobians, state_bounds)

logger = logging.getLogger(__name__)

WARM_START_CONTROL = (0.3, 0.0, 0.3)
WARM_START_MODE = 0.5
_FLAGGED_RESIDUAL = 1e10


@dataclass(frozen=True)
class Mesh:
    t0: float
    n_intervals: int
    h: float

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ValueError("mesh needs at least one interval")
        if not self.h > 0:
            raise ValueError(f"mesh step must be positive, got {self.h}")

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_intervals + 1, dtype=float)

    @property
    def t_end(self) -> float:
        return self.t0 + self.h * self.n_intervals

    def node(self, j: int) -> float:
        return self.t0 + j * self.h


def basis_state(j: int, t: float, mesh: Mesh) -> float:
    """Hat function centred on node j, restricted to the horizon."""
    if t < mesh.t0 or t > mesh.t_end:
        return 0.0
    prev, mid, nxt = mesh.node(j - 1), mesh.node(j), mesh.node(j + 1)
    if prev < t <= mid:
        return (t - prev) / mesh.h
    if mid < t <= nxt:
        return (nxt - t) / mesh.h
    return 0.0


def basis_control(j: int, t: float, mesh: Mesh) -> float:
    """Indicator of the half-open interval (t_{j-1}, t_j]."""
    return 1.0 if mesh.node(j - 1) < t <= mesh.node(j) else 0.0


class SwitchedSystem(Protocol):
    """Two-mode system with costs, as consumed by the transcription.

    `rates` returns (f, df/dx, df/du) for stacked rows; `stage` returns
    (L, dL/dx, dL/du); `terminal` and `barrier` return (value, gradient).
    """
    n_state: int
    n_control: int
    state_names: Sequence[str]
    control_names: Sequence[str]
    state_lower: np.ndarray
    state_upper: np.ndarray
    state_scale: np.ndarray
    control_weight: float

    def rates(self, x, u, mode: int, alpha): ...

    def stage(self, x, u, v_ref): ...

    def terminal(self, x, c_bat: float): ...

    def barrier(self, x): ...


class HevSystem:
    """The vehicle model and performance index seen through the SwitchedSystem protocol."""
    n_state = 3
    n_control = 3
    state_names = STATE_FIELDS
    control_names = CONTROL_FIELDS
    # kW, SOC fraction, m/s
    state_scale = np.array([10.0, 0.01, 1.0])

    def __init__(self, params: VehicleParams, weights: CostWeights, exact_sign: bool = False):
        self.params = params
        self.weights = weights
        self.exact_sign = exact_sign
        self.state_lower, self.state_upper = state_bounds(params)
        self.control_weight = weights.c_u

    def rates(self, x, u, mode, alpha):
        return rates_and_jacobians(x, u, mode, alpha, self.params, exact_sign=self.exact_sign)

    def stage(self, x, u, v_ref):
        return stage_cost_terms(x, u, v_ref, self.params, self.weights)

    def terminal(self, x, c_bat):
        return terminal_terms(x, c_bat, self.weights)

    def barrier(self, x):
        return barrier_terms(x, self.weights)


@dataclass(frozen=True)
class Layout:
    """Decision vector: states x_0..x_N, then per interval (u0_j, u1_j, v_j)."""
    n_state: int
    n_control: int
    n_intervals: int

    @property
    def n_var(self) -> int:
        return self.n_state * (self.n_intervals + 1) + (2 * self.n_control + 1) * self.n_intervals

    @property
    def x_index(self) -> np.ndarray:
        return np.arange(self.n_state * (self.n_intervals + 1)).reshape(self.n_intervals + 1, self.n_state)

    def _interval_base(self) -> np.ndarray:
        stride = 2 * self.n_control + 1
        return self.n_state * (self.n_intervals + 1) + stride * np.arange(self.n_intervals)

    @property
    def u0_index(self) -> np.ndarray:
        return self._interval_base()[:, None] + np.arange(self.n_control)

    @property
    def u1_index(self) -> np.ndarray:
        return self._interval_base()[:, None] + self.n_control + np.arange(self.n_control)

    @property
    def v_index(self) -> np.ndarray:
        return self._interval_base() + 2 * self.n_control

    @property
    def element_index(self) -> np.ndarray:
        """Variables touched by interval j: x_{j-1}, x_j, u0_j, u1_j, v_j."""
        x = self.x_index
        return np.hstack([x[:-1], x[1:], self.u0_index, self.u1_index, self.v_index[:, None]])

    def names(self, state_names: Sequence[str], control_names: Sequence[str]) -> List[str]:
        out = [""] * self.n_var
        for j, row in enumerate(self.x_index):
            for i, name in zip(row, state_names):
                out[i] = f"x{j}.{name}"
        for j in range(self.n_intervals):
            for i, name in zip(self.u0_index[j], control_names):
                out[i] = f"u0_{j + 1}.{name}"
            for i, name in zip(self.u1_index[j], control_names):
                out[i] = f"u1_{j + 1}.{name}"
            out[self.v_index[j]] = f"v_{j + 1}"
        return out


@dataclass
class NlpProblem:
    """min f(z) s.t. c(z) = 0, lower <= z <= upper.

    When `blocks` is given, row k lists the variables of element k and
    `block_gradients(z, lam)` returns each element's share of grad f + J^T lam.
    """
    lower: np.ndarray
    upper: np.ndarray
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    constraints: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], sparse.csr_matrix]
    n_con: int
    blocks: Optional[np.ndarray] = None
    block_gradients: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    initial_guess: Optional[np.ndarray] = None
    names: Optional[List[str]] = None
    transcription: Optional["CollocationNlp"] = field(default=None, repr=False)

    @property
    def n_var(self) -> int:
        return int(self.lower.size)

    @classmethod
    def from_functions(cls, objective, gradient, lower, upper, constraints=None, jacobian=None,
                       initial_guess=None) -> "NlpProblem":
        """Wrap plain callables; dense constraint Jacobians are converted to CSR."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.size
        if constraints is None:
            constraints = lambda z: np.zeros(0)
            jacobian = lambda z: sparse.csr_matrix((0, n))
        start = np.clip(np.zeros(n) if initial_guess is None else np.asarray(initial_guess, dtype=float),
                        lower, upper)
        n_con = int(np.asarray(constraints(start)).size)
        dense_jacobian = jacobian
        return cls(lower=lower, upper=upper, objective=objective, gradient=gradient,
                   constraints=lambda z: np.asarray(constraints(z), dtype=float).reshape(-1),
                   jacobian=lambda z: sparse.csr_matrix(np.asarray(dense_jacobian(z), dtype=float).reshape(n_con, n))
                   if not sparse.issparse(dense_jacobian(z)) else dense_jacobian(z).tocsr(),
                   n_con=n_con, initial_guess=None if initial_guess is None else np.asarray(initial_guess, dtype=float))

    def lagrangian_gradient(self, z, lam) -> np.ndarray:
        g = np.asarray(self.gradient(z), dtype=float)
        if self.n_con:
            g = g + self.jacobian(z).T @ np.asarray(lam, dtype=float)
        return g

    def with_bounds(self, lower, upper) -> "NlpProblem":
        return replace(self, lower=np.asarray(lower, dtype=float), upper=np.asarray(upper, dtype=float))

    def with_fixed_modes(self, modes) -> "NlpProblem":
        if self.transcription is None:
            raise ValueError("problem carries no collocation layout")
        idx = self.transcription.layout.v_index
        modes = np.asarray(modes, dtype=float)
        if modes.shape != idx.shape:
            raise ValueError(f"need {idx.size} interval modes, got {modes.size}")
        lower, upper = self.lower.copy(), self.upper.copy()
        lower[idx] = modes
        upper[idx] = modes
        return self.with_bounds(lower, upper)

    def describe(self) -> dict:
        """Variable names, bounds and constraint sparsity for inspection."""
        point = np.clip(self.initial_guess if self.initial_guess is not None else np.zeros(self.n_var),
                        self.lower, self.upper)
        jac = self.jacobian(point).tocoo()
        names = self.names or [f"z{i}" for i in range(self.n_var)]
        doc = {
            "n_var": self.n_var,
            "n_con": self.n_con,
            "variables": [{"name": n, "lower": float(lo), "upper": float(hi)}
                          for n, lo, hi in zip(names, self.lower, self.upper)],
            "jacobian_sparsity": {"rows": jac.row.tolist(), "cols": jac.col.tolist()},
        }
        if self.transcription is not None:
            mesh = self.transcription.mesh
            doc["mesh"] = {"t0": mesh.t0, "n_intervals": mesh.n_intervals, "h": mesh.h}
            doc["c_bat"] = float(self.transcription.c_bat)
        return doc


@dataclass
class _Evaluation:
    objective: float
    index: float
    gradient: np.ndarray
    defects: np.ndarray
    jacobian: sparse.csr_matrix
    cost_elements: np.ndarray
    jac_blocks: np.ndarray


def _defect_terms(system, h, X, U0, U1, v, alpha):
    """Midpoint defects (N, nx) and per-element Jacobian blocks (N, nx, 2nx+2nu+1), physical units."""
    nx = X.shape[1]
    xm = 0.5 * (X[:-1] + X[1:])
    f0, A0, B0 = system.rates(xm, U0, 0, alpha)
    f1, A1, B1 = system.rates(xm, U1, 1, alpha)
    w0 = (1.0 - v)[:, None]
    w1 = v[:, None]
    defects = X[1:] - X[:-1] - h * (w0 * f0 + w1 * f1)
    a_embed = w0[:, :, None] * A0 + w1[:, :, None] * A1
    eye = np.eye(nx)[None]
    blocks = np.concatenate([
        -eye - 0.5 * h * a_embed,
        eye - 0.5 * h * a_embed,
        -h * w0[:, :, None] * B0,
        -h * w1[:, :, None] * B1,
        (-h * (f1 - f0))[:, :, None],
    ], axis=2)
    return defects, blocks


def _cost_terms(system, h, X, U0, U1, v, v_ref, c_bat):
    """Performance index, proximal control term and per-element gradients of their sum
    (N, 2nx+2nu+1) in physical units."""
    w0 = (1.0 - v)[:, None]
    w1 = v[:, None]
    la0, lxa0, lua0 = system.stage(X[1:], U0, v_ref[1:])
    la1, lxa1, lua1 = system.stage(X[1:], U1, v_ref[1:])
    lb0, lxb0, lub0 = system.stage(X[:-1], U0, v_ref[:-1])
    lb1, lxb1, lub1 = system.stage(X[:-1], U1, v_ref[:-1])
    reg = system.control_weight
    sq0 = np.sum(U0 ** 2, axis=1)
    sq1 = np.sum(U1 ** 2, axis=1)
    bar, bar_x = system.barrier(X[1:])
    term, term_x = system.terminal(X[-1], c_bat)

    trapezoid = 0.5 * h * ((1.0 - v) * (la0 + lb0) + v * (la1 + lb1))
    index = float(np.sum(trapezoid) + h * np.sum(bar) + term)
    proximal = float(h * reg * np.sum((1.0 - v) * sq0 + v * sq1))

    d_prev = 0.5 * h * (w0 * lxb0 + w1 * lxb1)
    d_next = 0.5 * h * (w0 * lxa0 + w1 * lxa1) + h * bar_x
    d_next[-1] += term_x
    d_u0 = 0.5 * h * w0 * (lua0 + lub0) + 2.0 * h * reg * w0 * U0
    d_u1 = 0.5 * h * w1 * (lua1 + lub1) + 2.0 * h * reg * w1 * U1
    d_v = 0.5 * h * ((la1 - la0) + (lb1 - lb0)) + h * reg * (sq1 - sq0)
    elements = np.hstack([d_prev, d_next, d_u0, d_u1, d_v[:, None]])
    return index, proximal, elements


def _as_interval_array(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()


def collocation_defects(X, U0, U1, v, mesh: Mesh, system, alpha) -> np.ndarray:
    """x_j - x_{j-1} - h[(1-v_j) f_0(x_mid, u0_j) + v_j f_1(x_mid, u1_j)] for j = 1..N."""
    X = np.asarray(X, dtype=float)
    defects, _ = _defect_terms(system, mesh.h, X, np.atleast_2d(U0), np.atleast_2d(U1),
                               _as_interval_array(v, mesh.n_intervals),
                               _as_interval_array(alpha, mesh.n_intervals))
    return defects


def discrete_cost(X, U0, U1, v, mesh: Mesh, system, v_ref, c_bat: float) -> float:
    """Terminal SOC penalty plus the trapezoidal embedded integral and the SOC barrier.

    The proximal control term the solver also minimizes is not part of it.
    """
    index, _, _ = _cost_terms(system, mesh.h, np.asarray(X, dtype=float), np.atleast_2d(U0),
                               np.atleast_2d(U1), _as_interval_array(v, mesh.n_intervals),
                               np.asarray(v_ref, dtype=float), c_bat)
    return index


def simulate_collocation(system, mesh: Mesh, x0, U0, U1, v, alpha) -> np.ndarray:
    """March the implicit midpoint rule forward so every defect vanishes."""
    n, nx = mesh.n_intervals, system.n_state
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    U1 = np.atleast_2d(np.asarray(U1, dtype=float))
    v = _as_interval_array(v, n)
    alpha = _as_interval_array(alpha, n)
    h = mesh.h
    X = np.empty((n + 1, nx))
    X[0] = np.asarray(x0, dtype=float)
    eye = np.eye(nx)
    for k in range(n):
        xk = X[k]

        def residual(xn, k=k, xk=xk):
            xm = 0.5 * (xk + xn)[None]
            f0, A0, _ = system.rates(xm, U0[k][None], 0, alpha[k])
            f1, A1, _ = system.rates(xm, U1[k][None], 1, alpha[k])
            r = xn - xk - h * ((1.0 - v[k]) * f0[0] + v[k] * f1[0])
            jac = eye - 0.5 * h * ((1.0 - v[k]) * A0[0] + v[k] * A1[0])
            return r, jac

        f_start, _ = residual(xk)
        sol = root(residual, xk - f_start, jac=True, method="hybr", options={"xtol": 1e-13})
        if not sol.success:
            logger.warning("implicit midpoint step %d did not converge: %s", k, sol.message)
        X[k + 1] = sol.x
    return X


class CollocationNlp:
    """Scaled collocation NLP for one horizon of a SwitchedSystem."""

    def __init__(self, system, mesh: Mesh, x0, v_ref, alpha, c_bat: float):
        self.system = system
        self.mesh = mesh
        self.x0 = np.asarray(x0, dtype=float)
        self.v_ref = np.asarray(v_ref, dtype=float)
        self.alpha = _as_interval_array(alpha, mesh.n_intervals)
        self.c_bat = float(c_bat)
        if self.v_ref.shape != (mesh.n_intervals + 1,):
            raise ValueError("reference speed needs one value per mesh node")
        self.layout = Layout(system.n_state, system.n_control, mesh.n_intervals)
        self.state_scale = np.asarray(system.state_scale, dtype=float)
        self.scale = np.ones(self.layout.n_var)
        self.scale[self.layout.x_index] = self.state_scale
        nu = system.n_control
        self._element_scale = np.concatenate([self.state_scale, self.state_scale, np.ones(2 * nu + 1)])
        self._cached = lru_cache(maxsize=8)(self._evaluate_bytes)

    # packing ------------------------------------------------------------------

    def pack(self, X, U0, U1, v) -> np.ndarray:
        z = np.empty(self.layout.n_var)
        z[self.layout.x_index] = X
        z[self.layout.u0_index] = U0
        z[self.layout.u1_index] = U1
        z[self.layout.v_index] = v
        return z / self.scale

    def unpack(self, z) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        y = np.asarray(z, dtype=float) * self.scale
        lay = self.layout
        return y[lay.x_index], y[lay.u0_index], y[lay.u1_index], y[lay.v_index]

    # evaluation ---------------------------------------------------------------

    def evaluate(self, z) -> _Evaluation:
        return self._cached(np.ascontiguousarray(z, dtype=float).tobytes())

    def _evaluate_bytes(self, key: bytes) -> _Evaluation:
        z = np.frombuffer(key, dtype=float)
        X, U0, U1, v = self.unpack(z)
        h = self.mesh.h
        defects, blocks = _defect_terms(self.system, h, X, U0, U1, v, self.alpha)
        index, proximal, elements = _cost_terms(self.system, h, X, U0, U1, v, self.v_ref, self.c_bat)

        sx = self.state_scale
        defects = defects / sx
        blocks = blocks / sx[None, :, None] * self._element_scale[None, None, :]
        elements = elements * self._element_scale[None, :]

        bad = ~np.isfinite(defects)
        if bad.any():
            logger.warning("non-finite dynamics in %d defect entries; flagged", int(bad.sum()))
            defects[bad] = _FLAGGED_RESIDUAL
            blocks[np.any(bad, axis=1)] = 0.0

        element_index = self.layout.element_index
        n, nx = defects.shape
        rows = np.repeat(np.arange(n * nx).reshape(n, nx)[:, :, None], element_index.shape[1], axis=2)
        cols = np.broadcast_to(element_index[:, None, :], blocks.shape)
        jac = sparse.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())),
                                shape=(n * nx, self.layout.n_var))
        gradient = np.zeros(self.layout.n_var)
        np.add.at(gradient, element_index, elements)
        return _Evaluation(index + proximal, index, gradient, defects.ravel(), jac, elements, blocks)

    def objective(self, z) -> float:
        return self.evaluate(z).objective

    def performance_index(self, z) -> float:
        """Objective without the proximal control term."""
        return self.evaluate(z).index

    def gradient(self, z) -> np.ndarray:
        return self.evaluate(z).gradient.copy()

    def constraints(self, z) -> np.ndarray:
        return self.evaluate(z).defects.copy()

    def jacobian(self, z) -> sparse.csr_matrix:
        return self.evaluate(z).jacobian.copy()

    def block_gradients(self, z, lam) -> np.ndarray:
        ev = self.evaluate(z)
        lam = np.asarray(lam, dtype=float).reshape(self.mesh.n_intervals, self.system.n_state)
        return ev.cost_elements + np.einsum("ki,kib->kb", lam, ev.jac_blocks)

    # trajectories ---------------------------------------------------------------

    def forward_guess(self, U0, U1, v) -> np.ndarray:
        """Defect-feasible point for the given controls, states clipped into their box."""
        X = simulate_collocation(self.system, self.mesh, self.x0, U0, U1, v, self.alpha)
        X = np.clip(X, self.system.state_lower, self.system.state_upper)
        return self.pack(X, U0, U1, v)

    def default_guess(self) -> np.ndarray:
        n = self.mesh.n_intervals
        u = np.tile(np.asarray(WARM_START_CONTROL[: self.system.n_control], dtype=float), (n, 1))
        return self.forward_guess(u, u, np.full(n, WARM_START_MODE))

    def score_controls(self, U0, U1, v) -> Tuple[np.ndarray, float]:
        """Performance index of a control sequence along its own (unclipped) defect-feasible trajectory."""
        X = simulate_collocation(self.system, self.mesh, self.x0, U0, U1, v, self.alpha)
        z = self.pack(X, U0, U1, v)
        return z, self.performance_index(z)

    def problem(self, initial_guess: Optional[np.ndarray] = None) -> NlpProblem:
        lay = self.layout
        lower = np.empty(lay.n_var)
        upper = np.empty(lay.n_var)
        lower[lay.x_index] = self.system.state_lower
        upper[lay.x_index] = self.system.state_upper
        x0 = np.clip(self.x0, self.system.state_lower, self.system.state_upper)
        if not np.allclose(x0, self.x0, rtol=0.0, atol=1e-12):
            logger.warning("initial state %s clamped into the state box", self.x0)
        lower[lay.x_index[0]] = x0
        upper[lay.x_index[0]] = x0
        for idx in (lay.u0_index, lay.u1_index, lay.v_index):
            lower[idx] = 0.0
            upper[idx] = 1.0
        lower /= self.scale
        upper /= self.scale
        guess = self.default_guess() if initial_guess is None else np.asarray(initial_guess, dtype=float)
        guess = np.clip(guess, lower, upper)
        return NlpProblem(
            lower=lower, upper=upper, objective=self.objective, gradient=self.gradient,
            constraints=self.constraints, jacobian=self.jacobian,
            n_con=self.mesh.n_intervals * self.system.n_state,
            blocks=lay.element_index, block_gradients=self.block_gradients,
            initial_guess=guess, names=lay.names(self.system.state_names, self.system.control_names),
            transcription=self)


def transcribe(system, mesh: Mesh, x0, v_ref, alpha, c_bat: float,
               initial_guess: Optional[np.ndarray] = None) -> NlpProblem:
    return CollocationNlp(system, mesh, x0, v_ref, alpha, c_bat).problem(initial_guess)


def build_nlp(window: Mesh, x0: VehicleState, cycle, weights: CostWeights, params: VehicleParams,
              c_bat: Optional[float] = None, freeze_grade: bool = True,
              initial_guess: Optional[np.ndarray] = None) -> NlpProblem:
    """Transcribe the vehicle problem on `window` against a drive cycle.

    With freeze_grade the road grade is held at its window-start value,
    otherwise each interval takes the grade at its start.
    """
    if window.t0 < -1e-9 or window.t_end > cycle.duration + 1e-9:
        raise ValueError(f"window [{window.t0:g}, {window.t_end:g}] s lies outside the "
                         f"{cycle.duration:g} s cycle")
    nodes = window.nodes
    v_ref = cycle.speed_at(nodes)
    alpha = cycle.grade_at(nodes[0]) if freeze_grade else cycle.grade_at(nodes[:-1])
    system = HevSystem(params, weights)
    c_bat = weights.c_bat_nom if c_bat is None else c_bat
    return transcribe(system, window, x0.to_array(), v_ref, alpha, c_bat, initial_guess)
