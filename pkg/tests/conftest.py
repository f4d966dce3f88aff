from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from phevoc.io import load_parameters
from phevoc.model import VehicleState

PARAMS_DIR = Path(__file__).resolve().parents[1] / "params"


@pytest.fixture(scope="session")
def params_path():
    return PARAMS_DIR / "vehicle.yml"


@pytest.fixture(scope="session")
def default_setup(params_path):
    return load_parameters(params_path)


@pytest.fixture
def params(default_setup):
    return default_setup[0]


@pytest.fixture
def weights(default_setup):
    return default_setup[1]


@pytest.fixture
def no_drift_params(params):
    """Default vehicle with d3 = 0, so the battery is at rest when P_bat = 0."""
    (a1, a2, _, a4), (b1, b2, _, b4) = params.battery_d
    return replace(params, battery_d=((a1, a2, 0.0, a4), (b1, b2, 0.0, b4)))


@pytest.fixture
def rest_state(weights):
    return VehicleState(p_ice=0.0, soc=weights.soc_nom, v=0.0)


class BilinearToy:
    """Scalar two-mode system: f0 = -x + u(2 - x), f1 = -2x, L = (x - r)^2 + rho u^2.

    The reference speed slot of the transcription carries r.
    """
    n_state = 1
    n_control = 1
    state_names = ("x",)
    control_names = ("u",)
    state_lower = np.array([-10.0])
    state_upper = np.array([10.0])
    state_scale = np.array([1.0])
    control_weight = 0.0

    def __init__(self, rho: float = 0.1):
        self.rho = rho

    def rates(self, x, u, mode, alpha):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        n = x.shape[0]
        if mode == 0:
            f = -x + u * (2.0 - x)
            A = (-1.0 - u)[:, :, None]
            B = (2.0 - x)[:, :, None]
        else:
            f = -2.0 * x
            A = np.full((n, 1, 1), -2.0)
            B = np.zeros((n, 1, 1))
        return f, A, B

    def stage(self, x, u, v_ref):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        err = x[:, 0] - np.asarray(v_ref, dtype=float)
        return err ** 2 + self.rho * u[:, 0] ** 2, 2.0 * err[:, None], 2.0 * self.rho * u

    def terminal(self, x, c_bat):
        return 0.0, np.zeros(1)

    def barrier(self, x):
        x = np.atleast_2d(x)
        return np.zeros(x.shape[0]), np.zeros_like(x)


class LinearDecay(BilinearToy):
    """x' = -x in both modes, no control authority."""

    def rates(self, x, u, mode, alpha):
        x = np.atleast_2d(x)
        n = x.shape[0]
        return -x, np.full((n, 1, 1), -1.0), np.zeros((n, 1, 1))


class ConstantField(BilinearToy):
    """x' = c in both modes, L = level."""

    def __init__(self, c: float = 0.7, level: float = 2.5):
        super().__init__()
        self.c = c
        self.level = level

    def rates(self, x, u, mode, alpha):
        x = np.atleast_2d(x)
        n = x.shape[0]
        return np.full_like(x, self.c), np.zeros((n, 1, 1)), np.zeros((n, 1, 1))

    def stage(self, x, u, v_ref):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        return np.full(x.shape[0], self.level), np.zeros_like(x), np.zeros_like(u)


@pytest.fixture
def bilinear_toy():
    return BilinearToy()


@pytest.fixture
def linear_decay():
    return LinearDecay()


@pytest.fixture
def constant_field():
    return ConstantField()


def bilinear_lattice_cost(modes, grid, x0=0.0, h=1.0, r=1.0, rho=0.1):
    """Smallest discrete cost of the bilinear toy over a control lattice, for a fixed mode sequence.

    Implicit-midpoint steps are solved in closed form; mode-1 intervals take u = 0,
    the only value the cost can prefer there.
    """
    axes = [np.asarray(grid, dtype=float) if m == 0 else np.zeros(1) for m in modes]
    controls = np.meshgrid(*axes, indexing="ij")
    x_prev = np.full(controls[0].shape, float(x0))
    total = np.zeros_like(x_prev)
    for mode, u in zip(modes, controls):
        a = -1.0 - u if mode == 0 else np.full_like(u, -2.0)
        b = 2.0 * u if mode == 0 else np.zeros_like(u)
        x_next = (x_prev * (1.0 + 0.5 * h * a) + h * b) / (1.0 - 0.5 * h * a)
        total += 0.5 * h * ((x_next - r) ** 2 + (x_prev - r) ** 2 + 2.0 * rho * u ** 2)
        x_prev = x_next
    return float(total.min())
