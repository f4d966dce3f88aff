"""
Bi-modal parallel HEV power-flow model.

State x = [P_ICE (kW), SOC (-), V (m/s)].
Controls u = [u_ICE, u_FR, u_mode]; u_mode is u_EM in mode 0 (motoring)
and u_GEN in mode 1 (generating).

The vectorized core (`rates_and_jacobians`) evaluates any number of
(x, u) pairs at once together with df/dx and df/du; the scalar operations
below are thin views on the same arithmetic.
"""
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

STATE_FIELDS = ("p_ice", "soc", "v")
CONTROL_FIELDS = ("u_ice", "u_fr", "u_mode")
MODES = (0, 1)

P_ICE_MIN = 0.0
V_MIN = 0.0
_TINY = 1e-9


class DomainError(ValueError):
    """Battery logarithm argument d2 + d1*SOC is not positive."""


@dataclass(frozen=True, eq=False)
class Map1D:
    """Piecewise-linear table. Queries outside the breakpoints clamp to the end values."""
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or bp.size == 0 or bp.shape != vals.shape:
            raise ValueError("map needs matching non-empty breakpoint and value vectors")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("map breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_pairs(cls, pairs) -> "Map1D":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    def to_pairs(self):
        return [[float(b), float(v)] for b, v in zip(self.breakpoints, self.values)]

    def __call__(self, x):
        return np.interp(x, self.breakpoints, self.values)

    def slope(self, x):
        """Right derivative; zero wherever the table clamps."""
        x = np.asarray(x, dtype=float)
        bp = self.breakpoints
        if bp.size < 2:
            return np.zeros_like(x)
        seg = np.diff(self.values) / np.diff(bp)
        k = np.searchsorted(bp, x, side="right") - 1
        inside = (k >= 0) & (k < bp.size - 1)
        return np.where(inside, seg[np.clip(k, 0, bp.size - 2)], 0.0)

    @property
    def max_value(self) -> float:
        return float(self.values.max())


@dataclass(frozen=True, eq=False)
class Map2D:
    """Bilinear table over (x, y); table[i, j] sits at (x_breakpoints[i], y_breakpoints[j])."""
    x_breakpoints: np.ndarray
    y_breakpoints: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        xb = np.asarray(self.x_breakpoints, dtype=float)
        yb = np.asarray(self.y_breakpoints, dtype=float)
        tab = np.asarray(self.table, dtype=float)
        if xb.size < 2 or yb.size < 2 or tab.shape != (xb.size, yb.size):
            raise ValueError("2-D map needs >= 2 breakpoints per axis and a matching table")
        if np.any(np.diff(xb) <= 0) or np.any(np.diff(yb) <= 0):
            raise ValueError("map breakpoints must be strictly increasing")
        object.__setattr__(self, "x_breakpoints", xb)
        object.__setattr__(self, "y_breakpoints", yb)
        object.__setattr__(self, "table", tab)

    @staticmethod
    def _locate(bp, q):
        qc = np.clip(q, bp[0], bp[-1])
        k = np.clip(np.searchsorted(bp, qc, side="right") - 1, 0, bp.size - 2)
        width = bp[k + 1] - bp[k]
        w = (qc - bp[k]) / width
        inside = (q >= bp[0]) & (q < bp[-1])
        return k, w, np.where(inside, 1.0 / width, 0.0)

    def evaluate(self, x, y):
        """Value and right partial derivatives (d/dx, d/dy)."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        i, wx, sx = self._locate(self.x_breakpoints, x)
        j, wy, sy = self._locate(self.y_breakpoints, y)
        t = self.table
        t00, t10, t01, t11 = t[i, j], t[i + 1, j], t[i, j + 1], t[i + 1, j + 1]
        value = (1 - wx) * (1 - wy) * t00 + wx * (1 - wy) * t10 + (1 - wx) * wy * t01 + wx * wy * t11
        d_x = ((1 - wy) * (t10 - t00) + wy * (t11 - t01)) * sx
        d_y = ((1 - wx) * (t01 - t00) + wx * (t11 - t10)) * sy
        return value, d_x, d_y

    def __call__(self, x, y):
        return self.evaluate(x, y)[0]


@dataclass(frozen=True, eq=False)
class VehicleParams:
    # ICE (kW, rad/s, s)
    tau_ice: float
    p_ice_max_map: Map1D
    eng_threshold: float
    omega_min_map: Map1D
    omega_max_map: Map1D
    eta_ice_map: Map2D
    # Battery (kJ, kW)
    w_bat_max: float
    battery_d: Tuple[Tuple[float, float, float, float], Tuple[float, float, float, float]]
    p_bat_nom: Tuple[float, float]
    # Longitudinal motion
    m_c: float
    k_v1: float
    k_v2: float
    eps_v: float
    p_fr_max_map: Map1D
    # Electric drive
    beta: float
    eta_ed_map: Tuple[Map1D, Map1D]
    p_ed_in_max_map: Map1D
    # CVT / coupling device
    eta_cvt: float
    eta_cdd1: float
    eta_cdd2: float
    fuel_energy_density: float
    g: float = 9.81
    eng_band: float = 2.0
    eta_ice_floor: float = 0.05
    v_max: float = 45.0

    @property
    def p_ice_max(self) -> float:
        return self.p_ice_max_map.max_value


@dataclass(frozen=True)
class VehicleState:
    p_ice: float
    soc: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.p_ice, self.soc, self.v], dtype=float)

    @classmethod
    def from_array(cls, y) -> "VehicleState":
        return cls(p_ice=float(y[0]), soc=float(y[1]), v=float(y[2]))


@dataclass(frozen=True)
class StateRate:
    """Time derivative of a VehicleState (kW/s, 1/s, m/s^2)."""
    p_ice: float
    soc: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.p_ice, self.soc, self.v], dtype=float)

    @classmethod
    def from_array(cls, y) -> "StateRate":
        return cls(p_ice=float(y[0]), soc=float(y[1]), v=float(y[2]))


@dataclass(frozen=True)
class ControlVector:
    u_ice: float
    u_fr: float
    u_mode: float

    def __post_init__(self):
        for name in CONTROL_FIELDS:
            value = getattr(self, name)
            if not -1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"control {name}={value} outside [0, 1]")

    def to_array(self) -> np.ndarray:
        return np.array([self.u_ice, self.u_fr, self.u_mode], dtype=float)

    @classmethod
    def from_array(cls, y) -> "ControlVector":
        return cls(u_ice=float(y[0]), u_fr=float(y[1]), u_mode=float(y[2]))

    @classmethod
    def zero(cls) -> "ControlVector":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PowerFlows:
    p_cvt_out: float
    p_cdd_wh: float
    p_ed_out: float
    p_ed_in: float
    p_bat: float
    p_fr: float
    p_fuel: float
    omega_ice: float
    omega_ed: float


def _check_mode(mode: int) -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be 0 or 1, got {mode!r}")
    return int(mode)


# --- engine -----------------------------------------------------------------

def engine_speed(v, p, params: VehicleParams):
    """Engine speed on the speed envelope: p=0 gives omega_min(V), p=1 omega_max(V)."""
    return (1.0 - p) * params.omega_min_map(v) + p * params.omega_max_map(v)


def _engine_terms(p_ice, v, params):
    w_min, dw_min = params.omega_min_map(v), params.omega_min_map.slope(v)
    w_max, dw_max = params.omega_max_map(v), params.omega_max_map.slope(v)
    cap = np.maximum(params.p_ice_max_map(w_min), _TINY)
    dcap_dv = params.p_ice_max_map.slope(w_min) * dw_min
    raw = p_ice / cap
    inside = (raw >= 0.0) & (raw < 1.0)
    p = np.clip(raw, 0.0, 1.0)
    dp_dp = np.where(inside, 1.0 / cap, 0.0)
    dp_dv = np.where(inside, -p_ice * dcap_dv / cap ** 2, 0.0)
    span = w_max - w_min
    omega = w_min + p * span
    domega_dp = span * dp_dp
    domega_dv = (1.0 - p) * dw_min + p * dw_max + span * dp_dv
    return omega, domega_dp, domega_dv


def engagement(omega, params: VehicleParams):
    """Clutch engagement eng(omega) in [0, 1] and its right derivative.

    A linear ramp over eng_band rad/s ending at eng_threshold; eng_band == 0 is a hard step.
    """
    omega = np.asarray(omega, dtype=float)
    if params.eng_band <= 0:
        return (omega >= params.eng_threshold).astype(float), np.zeros_like(omega)
    ramp = (omega - params.eng_threshold + params.eng_band) / params.eng_band
    eng = np.clip(ramp, 0.0, 1.0)
    deng = np.where((ramp >= 0.0) & (ramp < 1.0), 1.0 / params.eng_band, 0.0)
    return eng, deng


def available_ice_power(omega, params: VehicleParams):
    """P_ICE^max(omega) * eng(omega) and its derivative in omega."""
    cap = params.p_ice_max_map(omega)
    dcap = params.p_ice_max_map.slope(omega)
    eng, deng = engagement(omega, params)
    return cap * eng, dcap * eng + cap * deng


def ice_dynamics(state: VehicleState, u_ice: float, params: VehicleParams) -> float:
    """First-order engine power lag: dP/dt = (-P + P_max(w) eng(w) u_ICE) / tau."""
    omega, _, _ = _engine_terms(state.p_ice, state.v, params)
    avail, _ = available_ice_power(omega, params)
    return float((-state.p_ice + avail * u_ice) / params.tau_ice)


# --- battery ----------------------------------------------------------------

def _soc_terms(soc, p_bat, mode, params):
    d1, d2, d3, d4 = params.battery_d[mode]
    p_nom = params.p_bat_nom[mode]
    w_max = params.w_bat_max
    arg = d2 + d1 * np.asarray(soc, dtype=float)
    if np.any(arg <= 0):
        raise DomainError(f"d2 + d1*SOC must be positive (mode {mode}, min {np.min(arg):.4g})")
    bracket = np.log(arg) + 2.0 * d3 * p_nom + d4
    rate = d3 * p_nom ** 2 / w_max - bracket * p_bat / w_max
    d_soc = -(d1 / arg) * p_bat / w_max
    d_pbat = -bracket / w_max
    return rate, d_soc, d_pbat


def soc_dynamics(state: VehicleState, p_bat: float, mode: int, params: VehicleParams) -> float:
    """SOC rate from the partially linearized battery model (kW over kJ gives 1/s)."""
    mode = _check_mode(mode)
    rate, _, _ = _soc_terms(state.soc, p_bat, mode, params)
    return float(rate)


# --- vehicle ----------------------------------------------------------------

def _vehicle_terms(v, p_wh, p_fr, alpha, params, exact_sign):
    v = np.asarray(v, dtype=float)
    if exact_sign:
        sign, dsign = np.sign(v), np.zeros_like(v)
    else:
        denom = np.abs(v) + params.eps_v
        sign, dsign = v / denom, params.eps_v / denom ** 2
    resist = params.k_v1 / params.m_c * v ** 2 + params.k_v2 * np.cos(alpha)
    gain = 1000.0 / (params.m_c * (v + params.eps_v))
    net = p_wh - p_fr
    rate = -resist * sign - params.g * np.sin(alpha) + gain * net
    d_v = -(2.0 * params.k_v1 / params.m_c * v) * sign - resist * dsign - gain / (v + params.eps_v) * net
    return rate, d_v, gain, -gain


def vehicle_dynamics(state: VehicleState, p_cdd_wh: float, p_fr: float, grade_alpha: float,
                     params: VehicleParams, exact_sign: bool = False) -> float:
    """Longitudinal acceleration from the wheel power balance.

    sgn(V) is V / (|V| + eps_V) unless exact_sign is set (plant integration).
    """
    if p_fr < 0:
        raise ValueError(f"friction power must be non-negative, got {p_fr}")
    rate, _, _, _ = _vehicle_terms(state.v, p_cdd_wh, p_fr, grade_alpha, params, exact_sign)
    return float(rate)


def friction_power(v, u_fr, params: VehicleParams):
    return params.p_fr_max_map(v) * u_fr


# --- electric drive and drivetrain -------------------------------------------

def _ed_terms(v, mode, params):
    omega_ed = params.beta * np.asarray(v, dtype=float)
    p_max = params.p_ed_in_max_map(omega_ed)
    dp_max = params.p_ed_in_max_map.slope(omega_ed) * params.beta
    eta_map = params.eta_ed_map[mode]
    eta = eta_map(omega_ed)
    deta = eta_map.slope(omega_ed) * params.beta
    return omega_ed, p_max, dp_max, eta, deta


def ed_power(v: float, u_mode: float, mode: int, params: VehicleParams) -> Tuple[float, float]:
    """(P_ED,out, P_ED,in) in kW for the given modulation."""
    mode = _check_mode(mode)
    _, p_max, _, eta, _ = _ed_terms(v, mode, params)
    p_in = p_max * u_mode
    return float(eta * p_in), float(p_in)


def fuel_power(p_ice, v, params: VehicleParams):
    """Fuel power P_ICE / eta_ICE(P_ICE, V) with the efficiency floored, plus partials."""
    eta, deta_dp, deta_dv = params.eta_ice_map.evaluate(p_ice, v)
    floored = eta <= params.eta_ice_floor
    eta = np.maximum(eta, params.eta_ice_floor)
    deta_dp = np.where(floored, 0.0, deta_dp)
    deta_dv = np.where(floored, 0.0, deta_dv)
    fuel = p_ice / eta
    return fuel, 1.0 / eta - p_ice * deta_dp / eta ** 2, -p_ice * deta_dv / eta ** 2


def flow_arrays(x, u, mode: int, params: VehicleParams) -> Dict[str, np.ndarray]:
    """Every algebraic power flow for stacked states (n, 3) and controls (n, 3)."""
    mode = _check_mode(mode)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    p_ice, v = x[:, 0], x[:, 2]
    omega_ice, _, _ = _engine_terms(p_ice, v, params)
    omega_ed, p_max, _, eta, _ = _ed_terms(v, mode, params)
    p_in = p_max * u[:, 2]
    p_out = eta * p_in
    p_cvt = params.eta_cvt * p_ice
    if mode == 0:
        p_wh = params.eta_cdd1 * p_cvt + params.eta_cdd2 * p_out
        p_bat = p_in
    else:
        p_wh = p_cvt - p_in / params.eta_cdd2
        p_bat = -p_out
    fuel, _, _ = fuel_power(p_ice, v, params)
    return {
        "p_cvt_out": p_cvt, "p_cdd_wh": p_wh, "p_ed_out": p_out, "p_ed_in": p_in,
        "p_bat": p_bat, "p_fr": friction_power(v, u[:, 1], params), "p_fuel": fuel,
        "omega_ice": omega_ice, "omega_ed": omega_ed,
    }


def drivetrain_flows(state: VehicleState, controls: ControlVector, mode: int,
                     grade_alpha: float, params: VehicleParams) -> PowerFlows:
    """CVT and coupling-device power balance for one operating point.

    The grade does not enter the algebraic flows; it is accepted so every
    per-mode evaluation shares one signature.
    """
    flows = flow_arrays(state.to_array(), controls.to_array(), mode, params)
    return PowerFlows(**{k: float(val[0]) for k, val in flows.items()})


# --- assembled vector field --------------------------------------------------

def rates_and_jacobians(x, u, mode: int, alpha, params: VehicleParams,
                        exact_sign: bool = False, jacobians: bool = True):
    """f_v(x, u) for stacked rows, with df/dx and df/du of shape (n, 3, 3).

    Derivatives are the right derivatives of the piecewise-linear maps.
    Returns (f, A, B); A and B are None when jacobians is False.
    """
    mode = _check_mode(mode)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n = x.shape[0]
    p_ice, soc, v = x[:, 0], x[:, 1], x[:, 2]
    u_ice, u_fr, u_mode = u[:, 0], u[:, 1], u[:, 2]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
    tau = params.tau_ice

    omega, domega_dp, domega_dv = _engine_terms(p_ice, v, params)
    avail, davail = available_ice_power(omega, params)

    _, ped_max, dped_max, eta_ed, deta_ed = _ed_terms(v, mode, params)
    p_in = ped_max * u_mode
    if mode == 0:
        p_bat = p_in
        dpbat_dv = dped_max * u_mode
        dpbat_du = ped_max
        p_wh = params.eta_cdd1 * params.eta_cvt * p_ice + params.eta_cdd2 * eta_ed * p_in
        dwh_dp = params.eta_cdd1 * params.eta_cvt
        dwh_dv = params.eta_cdd2 * (deta_ed * ped_max + eta_ed * dped_max) * u_mode
        dwh_du = params.eta_cdd2 * eta_ed * ped_max
    else:
        p_bat = -eta_ed * p_in
        dpbat_dv = -(deta_ed * ped_max + eta_ed * dped_max) * u_mode
        dpbat_du = -eta_ed * ped_max
        p_wh = params.eta_cvt * p_ice - p_in / params.eta_cdd2
        dwh_dp = params.eta_cvt
        dwh_dv = -dped_max * u_mode / params.eta_cdd2
        dwh_du = -ped_max / params.eta_cdd2

    soc_rate, dsoc_ds, dsoc_dpbat = _soc_terms(soc, p_bat, mode, params)

    pfr_max = params.p_fr_max_map(v)
    dpfr_max = params.p_fr_max_map.slope(v)
    p_fr = pfr_max * u_fr
    v_rate, dv_dv, dv_dwh, dv_dfr = _vehicle_terms(v, p_wh, p_fr, alpha, params, exact_sign)

    f = np.empty((n, 3))
    f[:, 0] = (-p_ice + avail * u_ice) / tau
    f[:, 1] = soc_rate
    f[:, 2] = v_rate
    if not jacobians:
        return f, None, None

    A = np.zeros((n, 3, 3))
    B = np.zeros((n, 3, 3))
    A[:, 0, 0] = (-1.0 + davail * domega_dp * u_ice) / tau
    A[:, 0, 2] = davail * domega_dv * u_ice / tau
    B[:, 0, 0] = avail / tau

    A[:, 1, 1] = dsoc_ds
    A[:, 1, 2] = dsoc_dpbat * dpbat_dv
    B[:, 1, 2] = dsoc_dpbat * dpbat_du

    A[:, 2, 0] = dv_dwh * dwh_dp
    A[:, 2, 2] = dv_dv + dv_dwh * dwh_dv + dv_dfr * dpfr_max * u_fr
    B[:, 2, 1] = dv_dfr * pfr_max
    B[:, 2, 2] = dv_dwh * dwh_du
    return f, A, B


def mode_dynamics(state: VehicleState, controls: ControlVector, mode: int, grade_alpha: float,
                  params: VehicleParams, exact_sign: bool = False) -> Tuple[StateRate, PowerFlows]:
    """Mode-v vector field f_v(x, u) and the power flows behind it."""
    mode = _check_mode(mode)
    f, _, _ = rates_and_jacobians(state.to_array(), controls.to_array(), mode, grade_alpha,
                                  params, exact_sign=exact_sign, jacobians=False)
    flows = drivetrain_flows(state, controls, mode, grade_alpha, params)
    return StateRate.from_array(f[0]), flows


def state_bounds(params: VehicleParams) -> Tuple[np.ndarray, np.ndarray]:
    """Invariant box for [P_ICE, SOC, V]."""
    return (np.array([P_ICE_MIN, 0.0, V_MIN]),
            np.array([params.p_ice_max, 1.0, params.v_max]))
