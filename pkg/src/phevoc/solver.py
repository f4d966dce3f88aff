"""
Sequential quadratic programming for equality constrained NLPs with simple bounds.

Each iteration solves
    min_d  1/2 d^T B d + grad_f^T d   s.t.  J d = -c,  lower - z <= d <= upper - z
with a primal active-set method, then takes a backtracking step on the l1 merit
function f + mu ||c||_1. B is a damped BFGS approximation of the Lagrangian
Hessian, kept as one small dense block per problem element when the problem
declares a partition and as a single dense block otherwise.

Multiplier convention: grad_f + J^T lam + nu = 0 at a KKT point, with nu_i >= 0
on variables at their upper bound and nu_i <= 0 at their lower bound.

`solve` never raises on numerical trouble; it reports a status and the best
iterate it reached.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import lsq_linear
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)


class SolverStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    LINE_SEARCH_FAILURE = "line_search_failure"
    INFEASIBLE = "infeasible"


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class SolverConfig:
    kkt_tol: float = 1e-6
    max_iter: int = 200
    penalty_growth: float = 2.0
    initial_penalty: float = 1.0
    backtrack_ratio: float = 0.5
    armijo: float = 1e-4
    min_step: float = 1e-10
    hessian_floor: float = 1e-8
    damping_threshold: float = 0.2
    active_tol: float = 1e-9
    qp_tol: float = 1e-10
    qp_regularization: float = 1e-10
    qp_max_iter: Optional[int] = None
    dense_limit: int = 150
    # Stop once stationarity / max(1, ||grad f||_inf) meets kkt_tol; the reported kkt stays absolute.
    relative_stationarity: bool = False

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.max_iter < 1:
            raise ValueError("kkt_tol must be positive and max_iter at least 1")
        if not 0.0 < self.backtrack_ratio < 1.0:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if not 0.0 < self.armijo < 0.5:
            raise ValueError("armijo constant must lie in (0, 0.5)")
        if self.penalty_growth <= 1.0:
            raise ValueError("penalty_growth must exceed 1")
        if not 0.0 < self.damping_threshold < 1.0:
            raise ValueError("damping_threshold must lie in (0, 1)")


@dataclass
class QpResult:
    step: np.ndarray
    multipliers: np.ndarray
    bound_multipliers: np.ndarray
    active: np.ndarray          # -1 at lower bound, +1 at upper bound, 0 free
    status: QpStatus
    iterations: int


@dataclass
class SolverResult:
    x: np.ndarray
    objective: float
    kkt: float
    iterations: int
    status: SolverStatus
    multipliers: np.ndarray
    bound_multipliers: np.ndarray
    constraint_violation: float
    history: List[Dict[str, float]] = field(default_factory=list)
    restorations: int = 0

    @property
    def success(self) -> bool:
        return self.status is SolverStatus.OPTIMAL


# --- quadratic subproblem ----------------------------------------------------

def _kkt_solve(H, A, free, rhs_top, rhs_bottom, delta, dense):
    """Solve [H_FF A_F^T; A_F -delta I] [p_F; lam] = [rhs_top; rhs_bottom]."""
    m = A.shape[0]
    Hff = H[free][:, free]
    if m == 0:
        if dense:
            return np.linalg.solve(Hff.toarray(), rhs_top), np.zeros(0)
        return splu(Hff.tocsc()).solve(rhs_top), np.zeros(0)
    Af = A[:, free]
    rhs = np.concatenate([rhs_top, rhs_bottom])
    if dense:
        Hd, Ad = Hff.toarray(), Af.toarray()
        K = np.block([[Hd, Ad.T], [Ad, -delta * np.eye(m)]])
        sol = np.linalg.solve(K, rhs)
    else:
        K = sparse.bmat([[Hff, Af.T], [Af, -delta * sparse.identity(m)]], format="csc")
        sol = splu(K).solve(rhs)
    return sol[:free.size], sol[free.size:]


def _phase_one(A, b, lower, upper, fixed, working_set, tol, dense):
    """A point with A d = b inside the bounds, or the bounded least-squares point when none exists."""
    n = lower.size
    attempts = []
    if working_set is not None and np.any(working_set[~fixed] != 0):
        attempts.append((working_set != 0) & ~fixed)
    attempts.append(np.zeros(n, dtype=bool))
    feas_tol = tol * max(1.0, float(np.max(np.abs(b), initial=0.0)))
    d = np.clip(np.zeros(n), lower, upper)
    for pins in attempts:
        d = np.where(fixed, lower, 0.0)
        if pins.any():
            d[pins] = np.where(working_set[pins] > 0, upper[pins], lower[pins])
        free = ~(fixed | pins)
        rhs = b - A[:, ~free] @ d[~free] if A.shape[0] else b
        if A.shape[0] == 0:
            d[free] = np.clip(0.0, lower[free], upper[free])
        elif free.any():
            A_free = A[:, free]
            if dense:
                sol = lsq_linear(A_free.toarray(), rhs, bounds=(lower[free], upper[free]), method="bvls",
                                 tol=1e-12)
            else:
                sol = lsq_linear(A_free, rhs, bounds=(lower[free], upper[free]), method="trf",
                                 lsmr_tol="auto", tol=1e-12)
            d[free] = np.clip(sol.x, lower[free], upper[free])
        residual = float(np.max(np.abs(A @ d - b), initial=0.0))
        if residual <= feas_tol:
            return d, True
    return d, False


def _active_from_point(d, lower, upper, fixed, tol):
    active = np.zeros(d.size, dtype=int)
    active[d <= lower + tol] = -1
    active[d >= upper - tol] = 1
    active[fixed] = -1
    return active


def qp_subsolve(hessian, gradient, eq_matrix, eq_rhs, lower, upper, working_set=None,
                max_iter: Optional[int] = None, tol: float = 1e-10, regularization: float = 1e-10,
                dense_limit: int = 150) -> QpResult:
    """Primal active-set solution of min 1/2 d^T H d + g^T d s.t. A d = b, lower <= d <= upper.

    H must be positive definite. `working_set` (same encoding as QpResult.active)
    seeds the active set when it still admits a feasible point.
    """
    g = np.asarray(gradient, dtype=float)
    n = g.size
    H = sparse.csr_matrix(hessian)
    A = sparse.csr_matrix(eq_matrix) if np.size(eq_rhs) else sparse.csr_matrix((0, n))
    b = np.asarray(eq_rhs, dtype=float).reshape(-1)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = b.size
    dense = n + m <= dense_limit
    fixed = upper - lower <= tol
    max_iter = max_iter or 5 * n + 100

    d, feasible = _phase_one(A, b, lower, upper, fixed, working_set, 1e-8, dense)
    active = _active_from_point(d, lower, upper, fixed, tol)
    if not feasible:
        logger.debug("QP linearization infeasible; returning least-squares restoration step")
        return QpResult(d, np.zeros(m), np.zeros(n), active, QpStatus.INFEASIBLE, 0)

    dual_tol = tol * max(1.0, float(np.max(np.abs(g), initial=0.0)))
    lam = np.zeros(m)
    for it in range(1, max_iter + 1):
        free = np.flatnonzero(active == 0)
        q = H @ d + g
        residual = b - A @ d if m else np.zeros(0)
        step = np.zeros(n)
        if free.size:
            p_free, lam = _kkt_solve(H, A, free, -q[free], residual, regularization, dense)
            step[free] = p_free
        elif m:
            lam = np.linalg.lstsq(A.T.toarray(), -q, rcond=None)[0]

        if np.max(np.abs(step), initial=0.0) <= tol * max(1.0, float(np.max(np.abs(d), initial=0.0))):
            nu = -(q + (A.T @ lam if m else 0.0))
            nu[active == 0] = 0.0
            wrong = np.where(active == -1, nu, np.where(active == 1, -nu, 0.0))
            wrong[fixed] = 0.0
            k = int(np.argmax(wrong)) if n else 0
            if n == 0 or wrong[k] <= dual_tol:
                return QpResult(d, lam, nu, active, QpStatus.OPTIMAL, it)
            active[k] = 0
            continue

        with np.errstate(divide="ignore", invalid="ignore"):
            to_lower = np.where(step < 0, (lower - d) / step, np.inf)
            to_upper = np.where(step > 0, (upper - d) / step, np.inf)
        ratio = np.maximum(np.minimum(to_lower, to_upper), 0.0)
        ratio[active != 0] = np.inf
        k = int(np.argmin(ratio))
        alpha = min(1.0, float(ratio[k]))
        d = d + alpha * step
        if alpha < 1.0:
            if step[k] < 0:
                active[k], d[k] = -1, lower[k]
            else:
                active[k], d[k] = 1, upper[k]

    q = H @ d + g
    nu = -(q + (A.T @ lam if m else 0.0))
    nu[active == 0] = 0.0
    logger.debug("QP active set hit %d iterations", max_iter)
    return QpResult(d, lam, nu, active, QpStatus.MAX_ITER, max_iter)


# --- Hessian approximation ---------------------------------------------------

class PartitionedBfgs:
    """Damped BFGS on per-element blocks, assembled into one sparse matrix.

    An element block is reset to the identity when s^T y < -s^T B s, and
    rescaled by y^T y / s^T y on its first update.
    """

    def __init__(self, blocks: np.ndarray, n: int, config: SolverConfig):
        self.blocks = np.atleast_2d(np.asarray(blocks, dtype=int))
        self.n = n
        self.config = config
        k, b = self.blocks.shape
        self.mats = np.tile(np.eye(b), (k, 1, 1))
        self.fresh = np.ones(k, dtype=bool)
        self._rows = np.repeat(self.blocks[:, :, None], b, axis=2).ravel()
        self._cols = np.repeat(self.blocks[:, None, :], b, axis=1).ravel()
        covered = np.zeros(n, dtype=bool)
        covered[self.blocks.ravel()] = True
        self._diag = np.where(covered, 0.0, 1.0) + config.hessian_floor

    def matrix(self) -> sparse.csr_matrix:
        H = sparse.coo_matrix((self.mats.ravel(), (self._rows, self._cols)), shape=(self.n, self.n)).tocsr()
        return H + sparse.diags(self._diag)

    def update(self, s_blocks: np.ndarray, y_blocks: np.ndarray) -> None:
        B = self.mats
        Bs = np.einsum("kij,kj->ki", B, s_blocks)
        sBs = np.einsum("ki,ki->k", s_blocks, Bs)
        sy = np.einsum("ki,ki->k", s_blocks, y_blocks)
        moving = sBs > 1e-16 * np.maximum(1.0, np.einsum("ki,ki->k", s_blocks, s_blocks))

        reset = moving & (sy < -sBs)
        if reset.any():
            logger.debug("resetting %d Hessian blocks", int(reset.sum()))
            B[reset] = np.eye(B.shape[1])
            self.fresh[reset] = True

        update = moving & ~reset
        scale = update & self.fresh & (sy > 0)
        if scale.any():
            yy = np.einsum("ki,ki->k", y_blocks[scale], y_blocks[scale])
            factor = np.clip(yy / sy[scale], 1e-6, 1e8)
            B[scale] = factor[:, None, None] * np.eye(B.shape[1])
            Bs[scale] = factor[:, None] * s_blocks[scale]
            sBs[scale] = factor * np.einsum("ki,ki->k", s_blocks[scale], s_blocks[scale])

        idx = np.flatnonzero(update)
        if idx.size == 0:
            return
        threshold = self.config.damping_threshold
        sBs_u, sy_u = sBs[idx], sy[idx]
        theta = np.where(sy_u >= threshold * sBs_u, 1.0,
                         (1.0 - threshold) * sBs_u / np.maximum(sBs_u - sy_u, 1e-300))
        r = theta[:, None] * y_blocks[idx] + (1.0 - theta)[:, None] * Bs[idx]
        sr = np.einsum("ki,ki->k", s_blocks[idx], r)
        B[idx] += (np.einsum("ki,kj->kij", r, r) / sr[:, None, None]
                   - np.einsum("ki,kj->kij", Bs[idx], Bs[idx]) / sBs_u[:, None, None])
        B[idx] = 0.5 * (B[idx] + np.transpose(B[idx], (0, 2, 1)))
        self.fresh[idx] = False


# --- optimality measures -----------------------------------------------------

def estimate_bound_multipliers(problem, z, lam, active_tol: float = 1e-9) -> np.ndarray:
    """nu from stationarity on variables sitting at a bound, with the sign the bound allows."""
    residual = -problem.lagrangian_gradient(z, lam)
    tol = active_tol * np.maximum(1.0, np.abs(z))
    at_lower = z <= problem.lower + tol
    at_upper = z >= problem.upper - tol
    fixed = at_lower & at_upper
    nu = np.zeros_like(z)
    nu[at_lower & (residual < 0)] = residual[at_lower & (residual < 0)]
    nu[at_upper & (residual > 0)] = residual[at_upper & (residual > 0)]
    nu[fixed] = residual[fixed]
    return nu


def _kkt_parts(problem, z, lam, nu, active_tol: float) -> Tuple[float, float, float]:
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if nu is None:
        nu = estimate_bound_multipliers(problem, z, lam, active_tol)
    lagr = problem.lagrangian_gradient(z, lam) + nu
    stationarity = float(np.max(np.abs(lagr), initial=0.0))
    feasibility = max(_violation(problem, z),
                      float(np.max(np.maximum(problem.lower - z, 0.0), initial=0.0)),
                      float(np.max(np.maximum(z - problem.upper, 0.0), initial=0.0)))
    gap = np.where(nu > 0, problem.upper - z, z - problem.lower)
    complementarity = float(np.max(np.abs(nu) * np.abs(np.where(nu != 0, gap, 0.0)), initial=0.0))
    return stationarity, feasibility, complementarity


def kkt_residual(problem, z, lam, nu=None, active_tol: float = 1e-9) -> float:
    """max(stationarity, primal infeasibility, complementarity), all in the infinity norm."""
    return max(_kkt_parts(problem, z, lam, nu, active_tol))


def _violation(problem, z) -> float:
    if not problem.n_con:
        return 0.0
    return float(np.max(np.abs(problem.constraints(z)), initial=0.0))


def _l1(problem, z) -> float:
    return float(np.sum(np.abs(problem.constraints(z)))) if problem.n_con else 0.0


def _safe(fn, *args) -> float:
    try:
        value = float(fn(*args))
    except (ArithmeticError, ValueError) as exc:
        logger.debug("evaluation failed at trial point: %s", exc)
        return np.inf
    return value if np.isfinite(value) else np.inf


# --- main loop ----------------------------------------------------------------

def solve(problem, config: Optional[SolverConfig] = None, warm_start=None) -> SolverResult:
    """SQP with partitioned BFGS, active-set QP subproblems and an l1-merit line search."""
    config = config or SolverConfig()
    n, m = problem.n_var, problem.n_con
    start = warm_start if warm_start is not None else problem.initial_guess
    z = np.clip(np.zeros(n) if start is None else np.array(start, dtype=float), problem.lower, problem.upper)

    if problem.blocks is not None and problem.block_gradients is not None:
        blocks = problem.blocks
        block_grad = problem.block_gradients
    else:
        blocks = np.arange(n)[None, :]
        block_grad = lambda x, lam: problem.lagrangian_gradient(x, lam)[None, :]
    hessian = PartitionedBfgs(blocks, n, config)

    lam = np.zeros(m)
    nu = np.zeros(n)
    mu = config.initial_penalty
    working = None
    history: List[Dict[str, float]] = []
    restorations = 0
    status = SolverStatus.MAX_ITER
    iteration = 0

    for iteration in range(1, config.max_iter + 1):
        try:
            f = float(problem.objective(z))
            g = np.asarray(problem.gradient(z), dtype=float)
            c = np.asarray(problem.constraints(z), dtype=float) if m else np.zeros(0)
            J = problem.jacobian(z) if m else sparse.csr_matrix((0, n))
        except (ArithmeticError, ValueError) as exc:
            logger.warning("evaluation failed at iterate %d: %s", iteration, exc)
            status = SolverStatus.LINE_SEARCH_FAILURE
            break
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(c))):
            logger.warning("non-finite problem data at iterate %d", iteration)
            status = SolverStatus.LINE_SEARCH_FAILURE
            break

        try:
            qp = qp_subsolve(hessian.matrix(), g, J, -c, problem.lower - z, problem.upper - z,
                             working_set=working, max_iter=config.qp_max_iter, tol=config.qp_tol,
                             regularization=config.qp_regularization, dense_limit=config.dense_limit)
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            logger.warning("QP subproblem failed at iterate %d: %s", iteration, exc)
            status = SolverStatus.LINE_SEARCH_FAILURE
            break
        working = qp.active
        d = qp.step
        restoring = qp.status is QpStatus.INFEASIBLE

        if not restoring:
            lam_trial = qp.multipliers
            nu_trial = estimate_bound_multipliers(problem, z, lam_trial, config.active_tol)
            parts = _kkt_parts(problem, z, lam_trial, nu_trial, config.active_tol)
            lam, nu = lam_trial, nu_trial
        else:
            restorations += 1
            parts = _kkt_parts(problem, z, lam, None, config.active_tol)
        kkt = max(parts)
        stationarity, feasibility, complementarity = parts
        if config.relative_stationarity:
            stationarity /= max(1.0, float(np.max(np.abs(g), initial=0.0)))

        lam_norm = float(np.max(np.abs(lam), initial=0.0))
        if mu < 1.1 * lam_norm:
            mu = max(1.1 * lam_norm, config.penalty_growth * mu)
        record = {"iter": iteration, "objective": f, "kkt": kkt, "step_norm": float(np.max(np.abs(d), initial=0.0)),
                  "merit_penalty": mu, "merit": f + mu * float(np.sum(np.abs(c)))}
        history.append(record)
        logger.debug("iter %3d  f=%.8g  kkt=%.3e  |d|=%.3e  mu=%.3g%s", iteration, f, kkt,
                     record["step_norm"], mu, "  (restoration)" if restoring else "")

        if max(stationarity, feasibility, complementarity) <= config.kkt_tol and not restoring:
            status = SolverStatus.OPTIMAL
            break

        # Restoration steps are judged on ||c||_1 alone.
        c_lin = float(np.sum(np.abs(c + J @ d))) if m else 0.0
        c_now = float(np.sum(np.abs(c)))
        if restoring:
            merit = lambda x: _l1(problem, x)
            phi0, slope = c_now, c_lin - c_now
        else:
            merit = lambda x: problem.objective(x) + mu * _l1(problem, x)
            phi0 = f + mu * c_now
            slope = float(g @ d) + mu * (c_lin - c_now)
        if slope >= 0.0:
            slope = -config.armijo * float(d @ d)

        alpha = 1.0
        accepted = False
        while alpha >= config.min_step:
            trial = np.clip(z + alpha * d, problem.lower, problem.upper)
            if _safe(merit, trial) <= phi0 + config.armijo * alpha * slope:
                accepted = True
                break
            alpha *= config.backtrack_ratio
        if not accepted:
            status = SolverStatus.INFEASIBLE if restoring else SolverStatus.LINE_SEARCH_FAILURE
            logger.debug("line search failed at iterate %d", iteration)
            break

        s = trial - z
        try:
            y = block_grad(trial, lam) - block_grad(z, lam)
        except (ArithmeticError, ValueError) as exc:
            logger.debug("skipping Hessian update: %s", exc)
            y = None
        if y is not None and np.all(np.isfinite(y)):
            hessian.update(s[blocks], y)
        z = trial

    final_kkt = kkt_residual(problem, z, lam, None, config.active_tol)
    violation = _violation(problem, z)
    if status is SolverStatus.MAX_ITER and restorations and violation > config.kkt_tol:
        status = SolverStatus.INFEASIBLE
    objective = _safe(problem.objective, z)
    result = SolverResult(x=z, objective=objective, kkt=final_kkt, iterations=iteration, status=status,
                          multipliers=lam, bound_multipliers=estimate_bound_multipliers(problem, z, lam, config.active_tol),
                          constraint_violation=violation, history=history, restorations=restorations)
    log = logger.debug if result.success else logger.warning
    log("SQP finished: %s after %d iterations, f=%.8g, kkt=%.3e, |c|=%.3e",
        status.value, iteration, objective, final_kkt, violation)
    return result
