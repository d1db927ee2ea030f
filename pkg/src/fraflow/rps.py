"""Carre du champ computations for the local case ``s = 0``.

With the pressure-like variable ``f = u^(m-1/2)`` the flow reads
``f_t = u^(m-1) [(m - 1/2) Lap f + |grad f|^2 / (2 f)]`` and the chain rule
``grad u^(m-1) = k u^(m-1) grad f / f`` holds with ``k = 2(m-1)/(2m-1)``.
Integrations by parts are exact on the torus, so the identities below hold
to round-off on smooth positive periodic fields.

Shorthand for the weighted integrals (weight ``u^(m-1)``)::

    P = int Hf : (grad f x grad f) / f      K = int |grad f|^4 / f^2
    H = int ||Hf||^2                          J = int Lap f |grad f|^2 / f
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import DEFAULT_FLOOR_REL, FlowTrace, rhs_original
from .profiles import ModelParams
from .spectral import Grid

__all__ = [
    "DecompositionReport",
    "IdentityReport",
    "df_dt_formula",
    "fractional_f",
    "g_functional",
    "id1_residual",
    "id2_residual",
    "iprime_decomposition",
    "iprime_formula",
    "iprime_from_trace",
    "iprime_instant",
    "lm_matrices",
    "pressure_f",
    "renyi_second_derivative",
    "sigma_local",
    "uv_coefficient",
    "weighted_integrals",
]


def pressure_f(u: np.ndarray, m: float, floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    """``f = u^(m-1/2)`` with the positivity floor."""
    u = np.asarray(u, dtype=float)
    umax = float(np.max(u))
    return np.maximum(u, floor_rel * umax) ** (m - 0.5)


def df_dt_formula(grid: Grid, u: np.ndarray, m: float) -> np.ndarray:
    """``u^(m-1) [(m-1/2) Lap f + |grad f|^2 / (2f)]``."""
    f = pressure_f(u, m)
    g = grid.gradient(f)
    return u ** (m - 1) * ((m - 0.5) * grid.laplacian(f) + 0.5 * np.sum(g**2, axis=0) / f)


def uv_coefficient(m: float) -> float:
    """``k`` in ``grad u^(m-1) = k u^(m-1) grad f / f``."""
    return 2 * (m - 1) / (2 * m - 1)


def _require_positive(u: np.ndarray, floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("u contains non-finite values")
    if np.min(u) <= floor_rel * np.max(u):
        raise ValueError("identity requires u strictly above the positivity floor")
    return u


@dataclass(frozen=True)
class _Fields:
    u: np.ndarray
    f: np.ndarray
    w: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    lap: np.ndarray
    g2: np.ndarray


def _fields(grid: Grid, u: np.ndarray, m: float, floor_rel: float = DEFAULT_FLOOR_REL) -> _Fields:
    u = _require_positive(grid.check(u, "u"), floor_rel)
    f = u ** (m - 0.5)
    grad = grid.gradient(f)
    hess = grid.hessian(f)
    lap = np.trace(hess, axis1=0, axis2=1)
    return _Fields(u, f, u ** (m - 1), grad, hess, lap, np.sum(grad**2, axis=0))


def weighted_integrals(grid: Grid, u: np.ndarray, m: float,
                       floor_rel: float = DEFAULT_FLOOR_REL) -> dict[str, float]:
    """``P, K, H, J`` plus ``LapSq = int u^(m-1) (Lap f)^2``."""
    F = _fields(grid, u, m, floor_rel)
    HGG = np.einsum("ij...,i...,j...->...", F.hess, F.grad, F.grad)
    return {
        "P": grid.integrate(F.w * HGG / F.f),
        "K": grid.integrate(F.w * F.g2**2 / F.f**2),
        "H": grid.integrate(F.w * np.sum(F.hess**2, axis=(0, 1))),
        "J": grid.integrate(F.w * F.lap * F.g2 / F.f),
        "LapSq": grid.integrate(F.w * F.lap**2),
    }


@dataclass(frozen=True)
class IdentityReport:
    name: str
    lhs: float
    rhs: float
    min_u: float
    boundary_frac: float

    @property
    def residual(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return abs(self.lhs - self.rhs) / scale if scale > 0 else 0.0


def id1_residual(grid: Grid, u: np.ndarray, m: float, k: float | None = None) -> IdentityReport:
    """``-int u^(m-1) Lap f |grad f|^2/f = 2P + (k-1)K``; ``k = 2(m-1)/(2m-1)``.

    ``k`` may be overridden to mis-code the chain rule on purpose.
    """
    k = uv_coefficient(m) if k is None else k
    W = weighted_integrals(grid, u, m)
    return IdentityReport("Id1", -W["J"], 2 * W["P"] + (k - 1) * W["K"],
                          float(np.min(u)), grid.boundary_mass_fraction(u))


def id2_residual(grid: Grid, u: np.ndarray, m: float, k: float | None = None) -> IdentityReport:
    """``-(2m-1) int u^(m-1) (Lap f)^2`` against its expansion in ``H, P, K``.

    For the true ``k`` the right side is ``-(2m-1)H - 6(m-1)P + 2(m-1)/(2m-1) K``.
    """
    k = uv_coefficient(m) if k is None else k
    W = weighted_integrals(grid, u, m)
    J = -(2 * W["P"] + (k - 1) * W["K"])
    rhs = (2 * m - 1) * (1.5 * k * J + 0.5 * k * (k - 1) * W["K"] - W["H"])
    return IdentityReport("Id2", -(2 * m - 1) * W["LapSq"], rhs,
                          float(np.min(u)), grid.boundary_mass_fraction(u))


def lm_matrices(grid: Grid, f: np.ndarray) -> dict:
    """Traceless parts ``Lf = Hf - Lap f Id/d`` and ``Mf = grad f x grad f / f - |grad f|^2/(d f) Id``.

    The returned ``checks`` are max pointwise relative errors of
    ``|Lf|^2 = |Hf|^2 - (Lap f)^2/d``, ``|Mf|^2 = (1-1/d)|grad f|^4/f^2``
    and ``Hf:Mf = Lf:Mf``.
    """
    f = grid.check(f, "f")
    if np.any(f <= 0):
        raise ValueError("lm_matrices needs f > 0")
    d = grid.d
    Hf = grid.hessian(f)
    g = grid.gradient(f)
    lap = np.trace(Hf, axis1=0, axis2=1)
    g2 = np.sum(g**2, axis=0)
    eye = np.eye(d).reshape((d, d) + (1,) * d)
    Lf = Hf - lap / d * eye
    Mf = np.einsum("i...,j...->ij...", g, g) / f - g2 / (d * f) * eye

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))

    dot = lambda A, B: np.sum(A * B, axis=(0, 1))
    checks = {
        "L_norm": rel(dot(Lf, Lf), dot(Hf, Hf) - lap**2 / d),
        "M_norm": rel(dot(Mf, Mf), (1 - 1 / d) * g2**2 / f**2),
        "HM_LM": rel(dot(Hf, Mf), dot(Lf, Mf)),
    }
    return {"Lf": Lf, "Mf": Mf, "Hf": Hf, "checks": checks}


# ----------------------------------------------------------------------
def sigma_local(d: int, m: float) -> float:
    """``(2/d)/(1-m) - 1``."""
    return (2 / d) / (1 - m) - 1


def _check_local(params: ModelParams) -> None:
    if params.s != 0:
        raise ValueError(
            "the I' decomposition needs s = 0: there is no chain rule for a "
            "nonlocal pressure variable (see fractional_f for the experimental hook)"
        )


def iprime_formula(grid: Grid, u: np.ndarray, m: float,
                   floor_rel: float = DEFAULT_FLOOR_REL) -> float:
    """``-(2m-1)H - 2(3m-4)P - (3-2m)/(2m-1) K``."""
    W = weighted_integrals(grid, u, m, floor_rel)
    return -(2 * m - 1) * W["H"] - 2 * (3 * m - 4) * W["P"] - (3 - 2 * m) / (2 * m - 1) * W["K"]


def iprime_instant(grid: Grid, u: np.ndarray, params: ModelParams) -> float:
    """``dI/dt = -2 int Lap f f_t`` with ``f_t`` from the discrete right-hand side."""
    _check_local(params)
    m = params.m
    f = pressure_f(u, m)
    ft = (m - 0.5) * u ** (m - 1.5) * rhs_original(grid, u, params)
    return -2 * grid.inner(grid.laplacian(f), ft)


def iprime_from_trace(trace: FlowTrace) -> tuple[np.ndarray, np.ndarray]:
    """Centred differences of the Fisher information at interior records."""
    t = trace.times
    I = trace.column("fisher")
    return t[1:-1], (I[2:] - I[:-2]) / (t[2:] - t[:-2])


@dataclass(frozen=True)
class DecompositionReport:
    iprime_direct: float
    iprime_formula: float
    iprime_squares: float
    square: float
    shifted_square: float
    remainder: float
    E: float
    I: float
    sigma: float
    G_definition: float
    G_squares: float

    @property
    def iprime_gap(self) -> float:
        return abs(self.iprime_direct - self.iprime_formula)

    @property
    def G_agreement(self) -> float:
        scale = max(abs(self.G_definition), abs(self.G_squares), 1e-300)
        return abs(self.G_definition - self.G_squares) / scale


def iprime_decomposition(grid: Grid, u: np.ndarray, params: ModelParams,
                         iprime_direct: float | None = None,
                         floor_rel: float = DEFAULT_FLOOR_REL) -> DecompositionReport:
    """Collected ``I'``, its sum-of-squares form and the concavity functional ``G``.

    ``m1 = (d-1)/d`` and ``sigma = (2/d)/(1-m) - 1``.  Without a measured
    ``iprime_direct`` the instantaneous value from the right-hand side is used.
    ``floor_rel = 0`` admits closed-form profiles whose tails sit below the
    flow floor.
    """
    _check_local(params)
    m, d = params.m, grid.d
    F = _fields(grid, u, m, floor_rel)
    m1 = (d - 1) / d
    c = 1.0 / (2 * m - 1)
    E = grid.integrate(F.u**m)
    I = grid.integrate(F.g2)
    base = F.lap - c * F.g2 / F.f
    square = grid.integrate(F.w * base**2)
    L = lm_matrices(grid, F.f)
    R = (2 * m - 1) / m * grid.integrate(F.w * np.sum((L["Lf"] - c * L["Mf"]) ** 2, axis=(0, 1)))
    ipf = iprime_formula(grid, F.u, m, floor_rel)
    ips = -(2 * m - 1) * (1 - m1 / m) * square - R
    sigma = sigma_local(d, m)
    coef = 2 * m * (1 - m) / (2 * m - 1)
    G_def = (sigma - 1) * coef * I**2 + E * ipf
    shifted = base + (2 * m / (2 * m - 1)) * (I / E) * np.sqrt(F.u)
    shifted_square = grid.integrate(F.w * shifted**2)
    G_sq = -(2 * m - 1) * (1 - m1 / m) * E * shifted_square - E * R
    ipd = iprime_instant(grid, F.u, params) if iprime_direct is None else iprime_direct
    return DecompositionReport(
        iprime_direct=ipd, iprime_formula=ipf, iprime_squares=ips, square=square,
        shifted_square=shifted_square, remainder=R, E=E, I=I, sigma=sigma,
        G_definition=G_def, G_squares=G_sq,
    )


def g_functional(grid: Grid, u: np.ndarray, params: ModelParams,
                 floor_rel: float = DEFAULT_FLOOR_REL) -> tuple[float, float]:
    """``G`` from its definition and from the final two-square display."""
    rep = iprime_decomposition(grid, u, params, floor_rel=floor_rel)
    return rep.G_definition, rep.G_squares


# ----------------------------------------------------------------------
# experimental hook for s > 0
def fractional_f(grid: Grid, u: np.ndarray, params: ModelParams) -> np.ndarray:
    """Nonlocal pressure ``(-Delta)^(-s/2) u^(m-1/2)``; no identity chain is claimed."""
    w = pressure_f(u, params.m)
    if params.s == 0:
        return w
    return grid.frac_laplacian(w, -params.s / 2)


def renyi_second_derivative(trace: FlowTrace) -> tuple[np.ndarray, np.ndarray]:
    """Second differences of ``F`` at interior records (uniform stride)."""
    t = trace.times
    F = trace.column("renyi")
    tau = t[1] - t[0]
    return t[1:-1], (F[2:] - 2 * F[1:-1] + F[:-2]) / tau**2
