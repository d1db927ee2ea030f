"""Model parameters, closed-form constants and reference profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .spectral import DEFAULT_BOUNDARY_TOL, Grid

__all__ = [
    "DerivedExponents",
    "ModelParams",
    "ProfileKind",
    "ProfileSpec",
    "at_constant",
    "barenblatt_constant",
    "barenblatt_evolution",
    "barenblatt_s0",
    "exponents",
    "gns_exponents",
    "kappa",
    "kappa_exponent",
    "kappa_star",
    "make_profile",
    "periodic_r2",
    "rescale",
    "scale_R",
    "sobolev_constant",
    "special_m",
]


@dataclass(frozen=True)
class ModelParams:
    """Dimension ``d``, fractional order ``s``, diffusion exponent ``m``, mass ``M``.

    With ``alpha = 2 (1 - s)`` the constraints are ``alpha < d`` (waived for
    the local case ``s = 0``), ``m1 <= m < 1`` with ``m1 = 1 - alpha/(2d)`` and
    ``m > 1/2`` so that ``p = 1/(2m - 1)`` is finite.
    """

    d: int
    s: float
    m: float
    M: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not 0.0 <= self.s < 1.0:
            raise ValueError(f"s must lie in [0, 1), got {self.s}")
        if self.s > 0 and not self.alpha < self.d:
            raise ValueError(
                f"alpha = 2(1-s) must lie in (0, d): alpha = {self.alpha:g}, d = {self.d}"
            )
        if not self.m < 1.0:
            raise ValueError(f"m must be < 1, got {self.m}")
        if not self.m > 0.5:
            raise ValueError(f"m must be > 1/2 so that p = 1/(2m-1) is finite, got {self.m}")
        if self.m < self.m1 - 1e-14:
            raise ValueError(f"m = {self.m:g} is below m1 = 1 - alpha/(2d) = {self.m1:.12g}")
        if not self.M > 0:
            raise ValueError(f"mass M must be positive, got {self.M}")

    @property
    def alpha(self) -> float:
        return 2.0 * (1.0 - self.s)

    @property
    def m1(self) -> float:
        return 1.0 - self.alpha / (2 * self.d)

    @property
    def mc(self) -> float:
        return 1.0 - self.alpha / self.d

    @property
    def p(self) -> float:
        return 1.0 / (2 * self.m - 1)

    @property
    def mu(self) -> float:
        return self.d * (self.m - self.mc)

    def with_mass(self, M: float) -> ModelParams:
        return ModelParams(self.d, self.s, self.m, M)


@dataclass(frozen=True)
class DerivedExponents:
    d: int
    alpha: float
    m: float
    q: float
    p: float
    theta: float
    sigma: float
    sigma_alt: float
    m1: float
    mc: float
    mu: float
    gamma: float

    @property
    def kappa_exponent(self) -> float:
        return 1.0 / (self.p * self.theta)


def _theta(d: int, alpha: float, p: float) -> float:
    return (d / p) * (p - 1) / (d + alpha - p * (d - alpha))


def exponents(params: ModelParams) -> DerivedExponents:
    """All derived exponents, with the two expressions for sigma cross-checked."""
    d, alpha, m = params.d, params.alpha, params.m
    q = 2 * d / (d - alpha) if alpha < d else math.inf
    p = params.p
    theta = _theta(d, alpha, p)
    mc = params.mc
    sigma = (m - mc) / (1 - m)
    sigma_alt = (2 / theta) * (1 - theta) / (p + 1) + 1
    gamma = (d + alpha - p * (d - alpha)) / (d - p * (d - 2 * alpha))
    if not abs(sigma - sigma_alt) <= 1e-10 * max(1.0, abs(sigma)):
        raise ArithmeticError(f"sigma mismatch: {sigma!r} vs {sigma_alt!r}")
    return DerivedExponents(
        d=d, alpha=alpha, m=m, q=q, p=p, theta=theta, sigma=sigma, sigma_alt=sigma_alt,
        m1=params.m1, mc=mc, mu=params.mu, gamma=gamma,
    )


def gns_exponents(d: int, alpha: float, p: float) -> DerivedExponents:
    """Exponents for a bare GNS problem given ``(d, alpha, p)``.

    Used where no flow is involved, e.g. the critical Sobolev case
    ``p = d/(d - alpha)`` which corresponds to ``m = m1``.
    """
    m = 0.5 * (1 + 1 / p)
    s = 1 - alpha / 2
    return exponents(ModelParams(d, s, m))


# ----------------------------------------------------------------------
# constants
def _check_alpha(d: int, alpha: float) -> None:
    if not 0 < alpha < d:
        raise ValueError(f"need 0 < alpha < d, got alpha={alpha}, d={d}")


def sobolev_constant(d: int, alpha: float) -> float:
    """Optimal constant in ``||w||_{H^{alpha/2}}^2 >= S ||w||_q^2``."""
    _check_alpha(d, alpha)
    g = math.gamma
    return (
        2**alpha * math.pi ** (alpha / 2)
        * g((d + alpha) / 2) / g((d - alpha) / 2)
        * (g(d / 2) / g(d)) ** (alpha / d)
    )


def at_constant(d: int, alpha: float) -> float:
    """Constant in ``(-Delta)^{alpha/2} w* = C w*^{(d+alpha)/(d-alpha)}``."""
    _check_alpha(d, alpha)
    return 2**alpha * math.gamma((d + alpha) / 2) / math.gamma((d - alpha) / 2)


def special_m(d: int, s: float) -> float:
    """Exceptional exponent for which GNS extremals are stationary."""
    return (d + 1) / (d + 2 * (1 - s))


# ----------------------------------------------------------------------
# profiles
class ProfileKind(str, Enum):
    AUBIN_TALENTI = "aubin_talenti"
    VSTAR = "vstar"
    BARENBLATT_S0 = "barenblatt_s0"
    SPECIAL = "special_profile"
    SPECIAL_STATIONARY = "special_stationary"


@dataclass(frozen=True)
class ProfileSpec:
    """Closed-form radial profile centred at the origin.

    ``scale`` dilates the profile: it is evaluated at ``x / scale``.  For the
    Barenblatt kind the mass ``M`` fixes the additive constant instead.
    """

    kind: ProfileKind
    d: int
    alpha: float = 2.0
    m: float = 0.75
    M: float = 1.0
    scale: float = 1.0
    extra: dict = field(default_factory=dict, compare=False)


def _bar_k(m: float) -> float:
    return (1 - m) / (2 * m - 1)


def barenblatt_s0(r2: np.ndarray, m: float, C: float) -> np.ndarray:
    """Stationary rescaled profile ``(C + (1-m)/(2m-1) |x|^2)^(-1/(1-m))``."""
    return (C + _bar_k(m) * r2) ** (-1.0 / (1 - m))


def periodic_r2(grid: Grid) -> np.ndarray:
    """Smooth periodic stand-in for ``|x|^2``: ``sum (2L/pi)^2 sin^2(pi x_j / 2L)``.

    Agrees with ``|x|^2`` to fourth order at the origin and has no kink at the
    seam, so profiles built on it are smooth on the torus.
    """
    c = (2 * grid.L / np.pi) ** 2
    return sum(c * np.sin(np.pi * x / (2 * grid.L)) ** 2 for x in grid.x)


def barenblatt_constant(grid: Grid, m: float, M: float, rtol: float = 1e-10,
                        boundary_tol: float = DEFAULT_BOUNDARY_TOL,
                        r2: np.ndarray | None = None) -> float:
    """Bisect on ``C`` so the grid mass of the s=0 Barenblatt profile is ``M``.

    ``r2`` replaces ``|x|^2``, e.g. by ``periodic_r2``.
    """
    r2 = grid.r2 if r2 is None else r2

    def mass(C):
        return grid.integrate(barenblatt_s0(r2, m, C))

    lo, hi = 1e-3, 1.0
    while mass(lo) < M:
        lo *= 0.5
        if lo < 1e-12:
            raise ValueError("mass too large for this box; check boundary_mass_fraction")
    while mass(hi) > M:
        hi *= 2.0
    # mass is decreasing in C; bisect in log C
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if mass(mid) > M:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < rtol * 1e-2:
            break
    C = math.sqrt(lo * hi)
    frac = grid.boundary_mass_fraction(barenblatt_s0(r2, m, C))
    if frac > boundary_tol:
        raise ValueError(
            f"Barenblatt profile of mass {M} does not fit the box: "
            f"boundary_mass_fraction = {frac:.2e} > {boundary_tol:.1e}"
        )
    return C


def make_profile(spec: ProfileSpec, grid: Grid) -> np.ndarray:
    if spec.d != grid.d:
        raise ValueError(f"profile dimension {spec.d} does not match grid dimension {grid.d}")
    r2 = grid.r2 / spec.scale**2
    d, alpha = spec.d, spec.alpha
    kind = ProfileKind(spec.kind)
    if kind is ProfileKind.AUBIN_TALENTI:
        return (1 + r2) ** (-(d - alpha) / 2)
    if kind is ProfileKind.VSTAR:
        return (1 + r2) ** (-float(d))
    if kind is ProfileKind.SPECIAL:
        p = 1 / (2 * spec.m - 1)
        return (1 + r2) ** (1 / (1 - p))
    if kind is ProfileKind.SPECIAL_STATIONARY:
        # (-Delta)^-s (1+r^2)^(-(d+2s)/2) is a multiple of (1+r^2)^(-(d-2s)/2),
        # which makes this w = v^(m-1/2) stationary exactly at m = special_m
        s = 1 - alpha / 2
        return (1 + r2) ** (-(d + 2 * s) / 2)
    if kind is ProfileKind.BARENBLATT_S0:
        C = spec.extra.get("C")
        if C is None:
            C = barenblatt_constant(grid, spec.m, spec.M)
        return barenblatt_s0(grid.r2, spec.m, C)
    raise ValueError(f"unknown profile kind {spec.kind!r}")


def scale_R(t: float, mu: float) -> float:
    """Solution of ``R^(mu-1) R' = 1``, ``R(0) = 1``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if not mu > 0:
        raise ValueError("mu must be positive")
    return (1 + mu * t) ** (1 / mu)


def barenblatt_evolution(grid: Grid, params: ModelParams, t: float, C: float) -> np.ndarray:
    """Self-similar s=0 solution ``R^-d B(x/R)`` in original variables."""
    if params.s != 0:
        raise ValueError("closed-form Barenblatt evolution exists only for s = 0")
    R = scale_R(t, params.mu)
    return R ** (-params.d) * barenblatt_s0(grid.r2 / R**2, params.m, C)


def rescale(grid: Grid, u: np.ndarray, t: float, params: ModelParams,
            direction: str = "forward", boundary_tol: float = DEFAULT_BOUNDARY_TOL) -> np.ndarray:
    """Map between original and self-similar variables at time ``t``.

    ``forward``: ``v(y) = R^d u(R y)``; ``backward``: ``u(x) = R^-d v(x/R)``.
    """
    R = scale_R(t, params.mu)
    if direction == "forward":
        out = R**grid.d * grid.resample(u, R)
    elif direction == "backward":
        out = R ** (-grid.d) * grid.resample(u, 1.0 / R)
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    frac = grid.boundary_mass_fraction(out)
    if frac > boundary_tol:
        raise ValueError(
            f"rescaled field leaves the box: boundary_mass_fraction = {frac:.2e} > {boundary_tol:.1e}"
        )
    return out


# ----------------------------------------------------------------------
# entropy-power growth constants
def kappa_exponent(params: ModelParams) -> float:
    d, a, p = params.d, params.alpha, params.p
    return (d + a - p * (d - a)) / (d * (p - 1))


def kappa(params: ModelParams, C_gns: float) -> float:
    """Lower bound on ``F'`` implied by the GNS inequality with constant ``C_gns``."""
    if not C_gns > 0:
        raise ValueError("C_gns must be positive")
    m, p = params.m, params.p
    log_base = math.log(params.M) - 2 * p * math.log(C_gns)
    return (2 * m / (2 * m - 1)) * (m - params.mc) * math.exp(kappa_exponent(params) * log_base)


def kappa_star(params: ModelParams, F_of_B: float) -> float:
    """Growth rate of ``F`` along the self-similar solution, ``mu F[B]``."""
    if not F_of_B > 0:
        raise ValueError("F[B] must be positive")
    return params.mu * F_of_B
