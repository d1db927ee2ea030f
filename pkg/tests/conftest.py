import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fraflow.spectral import BoundaryMassWarning, Grid

settings.register_profile(
    "fraflow", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("fraflow")


def band_limited(grid: Grid, rng: np.random.Generator, kmax: int = 4) -> np.ndarray:
    """Random real trigonometric polynomial with ``|k_j| <= kmax`` on the grid."""
    coef = np.zeros(grid.spectral_shape, dtype=complex)
    kint = [np.rint(k * grid.L / np.pi).astype(int) for k in grid.xi]
    mask = np.ones(grid.spectral_shape, dtype=bool)
    for k in kint:
        mask &= np.abs(k) <= kmax
    coef[mask] = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    w = grid.ifft(coef)
    return w / np.max(np.abs(w))


def positive_field(grid: Grid, rng: np.random.Generator, kmax: int = 3, amp: float = 0.5) -> np.ndarray:
    """Smooth strictly positive periodic field ``exp(amp * band_limited)``."""
    return np.exp(amp * band_limited(grid, rng, kmax))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_boundary():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryMassWarning)
        yield


# ----------------------------------------------------------------------
# shared expensive objects
GEN = (2, 0.25, 0.8)  # generic fractional point used across modules


@pytest.fixture(scope="session")
def grid_gen():
    return Grid(2, 64, 12.0)


@pytest.fixture(scope="session")
def numerical_barenblatt(grid_gen):
    """Stationary rescaled profile for ``(d, s, m) = (2, 1/4, 4/5)``, mass 1."""
    from fraflow.gns import barenblatt_profile
    from fraflow.profiles import ModelParams

    return barenblatt_profile(grid_gen, ModelParams(*GEN))
