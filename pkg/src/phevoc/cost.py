"""Performance index: mode integrands, embedded integrand, terminal SOC penalty."""
from dataclasses import dataclass

import numpy as np

from phevoc.model import ControlVector, PowerFlows, VehicleParams, VehicleState, fuel_power


@dataclass(frozen=True)
class CostWeights:
    c_v: float = 10.0          # (m/s)^-2
    c_ice: float = 1e-3        # kW^-2
    c_fr: float = 1e-4         # kW^-2
    c_bat_nom: float = 1e5
    soc_nom: float = 0.6
    soc_min: float = 0.4
    soc_max: float = 0.8
    soc_barrier: bool = True
    barrier_factor: float = 10.0
    # Transcription-only proximal term on the controls; pins directions the
    # integrand leaves flat (e.g. u_ICE while the clutch is open).
    c_u: float = 1e-4

    def __post_init__(self):
        for name in ("c_v", "c_ice", "c_fr", "c_bat_nom", "barrier_factor", "c_u"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be non-negative")
        if not 0.0 < self.soc_min < self.soc_nom < self.soc_max < 1.0:
            raise ValueError("need 0 < soc_min < soc_nom < soc_max < 1")


def stage_cost(state: VehicleState, controls: ControlVector, mode: int, v_des: float,
               flows: PowerFlows, weights: CostWeights) -> float:
    """L_v = C_V (V - V_des)^2 + C_ICE (P_ICE / eta_ICE)^2 + C_FR P_FR^2, same for both modes."""
    return float(weights.c_v * (state.v - v_des) ** 2
                 + weights.c_ice * flows.p_fuel ** 2
                 + weights.c_fr * flows.p_fr ** 2)


def embedded_stage_cost(state: VehicleState, u0: ControlVector, u1: ControlVector, v_embed: float,
                        v_des: float, params: VehicleParams, weights: CostWeights) -> float:
    if not 0.0 <= v_embed <= 1.0:
        raise ValueError(f"embedded mode value {v_embed} outside [0, 1]")
    x = state.to_array()
    l0, _, _ = stage_cost_terms(x, u0.to_array(), v_des, params, weights)
    l1, _, _ = stage_cost_terms(x, u1.to_array(), v_des, params, weights)
    return float((1.0 - v_embed) * l0[0] + v_embed * l1[0])


def terminal_cost(soc_final: float, c_bat: float, weights: CostWeights) -> float:
    return float(c_bat * (soc_final - weights.soc_nom) ** 2)


def soc_barrier(soc, weights: CostWeights):
    """Quadratic penalty outside [soc_min, soc_max], scaled by barrier_factor * c_bat_nom."""
    if not weights.soc_barrier:
        return np.zeros_like(np.asarray(soc, dtype=float))
    k = weights.barrier_factor * weights.c_bat_nom
    below = np.maximum(weights.soc_min - soc, 0.0)
    above = np.maximum(soc - weights.soc_max, 0.0)
    return k * (below ** 2 + above ** 2)


# Vectorized forms with gradients, used by the transcription.

def stage_cost_terms(x, u, v_des, params: VehicleParams, weights: CostWeights):
    """L(x, u) for stacked rows with dL/dx (n, 3) and dL/du (n, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    p_ice, v = x[:, 0], x[:, 2]
    fuel, dfuel_dp, dfuel_dv = fuel_power(p_ice, v, params)
    pfr_max = params.p_fr_max_map(v)
    p_fr = pfr_max * u[:, 1]
    err = v - v_des

    cost = weights.c_v * err ** 2 + weights.c_ice * fuel ** 2 + weights.c_fr * p_fr ** 2
    grad_x = np.zeros_like(x)
    grad_x[:, 0] = 2.0 * weights.c_ice * fuel * dfuel_dp
    grad_x[:, 2] = (2.0 * weights.c_v * err + 2.0 * weights.c_ice * fuel * dfuel_dv
                    + 2.0 * weights.c_fr * p_fr * params.p_fr_max_map.slope(v) * u[:, 1])
    grad_u = np.zeros_like(u)
    grad_u[:, 1] = 2.0 * weights.c_fr * p_fr * pfr_max
    return cost, grad_x, grad_u


def terminal_terms(x, c_bat: float, weights: CostWeights):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    grad[1] = 2.0 * c_bat * (x[1] - weights.soc_nom)
    return terminal_cost(x[1], c_bat, weights), grad


def barrier_terms(x, weights: CostWeights):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    soc = x[:, 1]
    grad = np.zeros_like(x)
    if weights.soc_barrier:
        k = weights.barrier_factor * weights.c_bat_nom
        grad[:, 1] = 2.0 * k * (np.minimum(soc - weights.soc_min, 0.0) + np.maximum(soc - weights.soc_max, 0.0))
    return soc_barrier(soc, weights), grad


def stage_cost_from_flows(x, flows, v_des, weights: CostWeights):
    """Integrand for logged rows, given `flow_arrays` output."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return (weights.c_v * (x[:, 2] - v_des) ** 2 + weights.c_ice * flows["p_fuel"] ** 2
            + weights.c_fr * flows["p_fr"] ** 2)
