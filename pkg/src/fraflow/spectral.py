"""Periodic tensor grids and Fourier-multiplier operators.

Every field in the package is a real ``numpy`` array of shape ``(n,) * d``
sampled on the box ``[-L, L)^d``.  Vector fields carry a leading axis of
length ``d`` and matrix fields two leading axes ``(d, d)``.  All derivatives
and fractional powers are applied in Fourier space with the normalisation
``ifft(fft(w)) == w``, and integrals use the rectangle rule, so discrete
integration by parts holds to round-off.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import fft as sp_fft

__all__ = [
    "DEFAULT_BOUNDARY_TOL",
    "BoundaryMassWarning",
    "Grid",
]

DEFAULT_BOUNDARY_TOL = 1e-3


class BoundaryMassWarning(UserWarning):
    """Too much of a field sits near the edge of the periodic box."""


def _check_finite(w: np.ndarray, name: str = "field") -> None:
    if not np.all(np.isfinite(w)):
        bad = np.count_nonzero(~np.isfinite(w))
        raise ValueError(f"{name} contains {bad} non-finite values")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[-L, L)^d`` with ``n`` points per axis.

    Frequencies are ``xi_k = pi k / L`` for ``k`` in ``[-n/2, n/2)``.  Odd
    symbols (first derivatives) drop the Nyquist mode so that real fields
    stay real; even symbols keep it.
    """

    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if self.n < 8 or self.n % 2:
            raise ValueError(f"n must be even and >= 8, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    # ------------------------------------------------------------------
    # geometry
    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def volume(self) -> float:
        return (2.0 * self.L) ** self.d

    @property
    def cell(self) -> float:
        return self.h**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def x(self) -> np.ndarray:
        """Coordinates, shape ``(d, n, ..., n)``."""
        return np.stack(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def r2(self) -> np.ndarray:
        return np.sum(self.x**2, axis=0)

    @cached_property
    def sup_norm_x(self) -> np.ndarray:
        return np.max(np.abs(self.x), axis=0)

    @cached_property
    def _inner_weight(self) -> np.ndarray:
        # indicator of the half box |x_j| <= L/2 with weight 1/2 on each face
        # point, so that constants give exactly 2^-d
        a = np.abs(self.axis)
        tol = 1e-12 * self.L
        w1 = np.where(a < self.L / 2 - tol, 1.0, np.where(a <= self.L / 2 + tol, 0.5, 0.0))
        out = np.ones(self.shape)
        for j in range(self.d):
            shp = [1] * self.d
            shp[j] = self.n
            out = out * w1.reshape(shp)
        return out

    # ------------------------------------------------------------------
    # spectral data (rfftn layout: last axis is half-length)
    @cached_property
    def _k_axes(self) -> list[np.ndarray]:
        full = np.fft.fftfreq(self.n, d=1.0 / self.n)
        half = np.fft.rfftfreq(self.n, d=1.0 / self.n)
        out = []
        for j in range(self.d):
            k = half if j == self.d - 1 else full
            shp = [1] * self.d
            shp[j] = k.size
            out.append((np.pi / self.L) * k.reshape(shp))
        return out

    @cached_property
    def xi(self) -> list[np.ndarray]:
        """Broadcastable wavenumber arrays (Nyquist kept, with sign -)."""
        spec = self.spectral_shape
        return [np.broadcast_to(k, spec) for k in self._k_axes]

    @cached_property
    def xi_odd(self) -> list[np.ndarray]:
        """Wavenumbers for odd symbols: the Nyquist frequency is zeroed."""
        nyq = np.pi / self.L * (self.n // 2)
        return [np.where(np.abs(k) == nyq, 0.0, k) for k in self.xi]

    @cached_property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.d - 1) + (self.n // 2 + 1,)

    @cached_property
    def abs_xi(self) -> np.ndarray:
        return np.sqrt(sum(k**2 for k in self.xi))

    @property
    def xi_max(self) -> float:
        """Largest ``|xi|`` on the grid (corner mode)."""
        return float(np.pi / self.h * np.sqrt(self.d))

    def _power_symbol(self, expo: float) -> np.ndarray:
        """``|xi|**expo`` with the zero mode set to 0 (or 1 when expo == 0)."""
        if expo == 0:
            return np.ones(self.spectral_shape)
        a = self.abs_xi
        with np.errstate(divide="ignore"):
            out = np.where(a > 0, a, 1.0) ** expo
        out[(0,) * self.d] = 0.0
        return out

    def fft(self, w: np.ndarray) -> np.ndarray:
        return sp_fft.rfftn(w, axes=tuple(range(-self.d, 0)))

    def ifft(self, wh: np.ndarray) -> np.ndarray:
        return sp_fft.irfftn(wh, s=self.shape, axes=tuple(range(-self.d, 0)))

    def check(self, w: np.ndarray, name: str = "field") -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != self.shape:
            raise ValueError(f"{name} has shape {w.shape}, grid expects {self.shape}")
        _check_finite(w, name)
        return w

    # ------------------------------------------------------------------
    # operators
    def frac_laplacian(self, w: np.ndarray, beta: float) -> np.ndarray:
        """Apply ``(-Delta)**beta`` with symbol ``|xi|**(2 beta)``.

        ``beta`` must lie in ``(-1, 1]``.  For ``beta != 0`` the mean of the
        output is zero; in particular negative powers annihilate constants.
        """
        if not -1.0 < beta <= 1.0:
            raise ValueError(f"beta must lie in (-1, 1], got {beta}")
        w = self.check(w)
        if beta == 0:
            return w.copy()
        return self.ifft(self._power_symbol(2.0 * beta) * self.fft(w))

    def riesz_gradient(self, w: np.ndarray, s: float) -> np.ndarray:
        """``grad (-Delta)**(-s) w``, symbol ``i xi_j |xi|**(-2 s)``."""
        if not 0.0 <= s < 1.0:
            raise ValueError(f"s must lie in [0, 1), got {s}")
        w = self.check(w)
        wh = self.fft(w)
        if s > 0:
            wh = wh * self._power_symbol(-2.0 * s)
        return np.stack([self.ifft(1j * k * wh) for k in self.xi_odd])

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.riesz_gradient(w, 0.0)

    def divergence(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if V.shape != (self.d,) + self.shape:
            raise ValueError(f"vector field has shape {V.shape}")
        _check_finite(V, "vector field")
        acc = sum(1j * k * self.fft(V[j]) for j, k in enumerate(self.xi_odd))
        acc[(0,) * self.d] = 0.0
        return self.ifft(acc)

    def hessian(self, w: np.ndarray) -> np.ndarray:
        """Full symmetric Hessian, shape ``(d, d) + grid.shape``."""
        wh = self.fft(self.check(w))
        H = np.empty((self.d, self.d) + self.shape)
        for i in range(self.d):
            for j in range(i, self.d):
                if i == j:
                    sym = -self.xi[i] ** 2
                else:
                    sym = -self.xi_odd[i] * self.xi_odd[j]
                H[i, j] = self.ifft(sym * wh)
                H[j, i] = H[i, j]
        return H

    def laplacian(self, w: np.ndarray) -> np.ndarray:
        """Plain ``Delta w`` (note the sign: ``-frac_laplacian(w, 1)``)."""
        return -self.frac_laplacian(w, 1.0)

    # ------------------------------------------------------------------
    # quadrature
    def integrate(self, w: np.ndarray) -> float:
        return float(self.cell * np.sum(w))

    def inner(self, w1: np.ndarray, w2: np.ndarray) -> float:
        return float(self.cell * np.sum(w1 * w2))

    def lp_norm(self, w: np.ndarray, r: float) -> float:
        if r < 1:
            raise ValueError(f"lp_norm needs r >= 1, got {r}")
        return float((self.cell * np.sum(np.abs(w) ** r)) ** (1.0 / r))

    def hs_seminorm(self, w: np.ndarray, alpha: float) -> float:
        """``<w, (-Delta)**(alpha/2) w>``, the squared homogeneous norm.

        ``alpha`` may range over ``(0, 2]``; the bound ``alpha < d`` matters
        only for Sobolev-type inequalities, not for the operator.
        """
        if not 0.0 < alpha <= 2.0:
            raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
        w = self.check(w)
        wh = self.fft(w)
        return self._spectral_energy(self._power_symbol(alpha) * np.abs(wh) ** 2)

    def _spectral_energy(self, dens: np.ndarray) -> float:
        # rfft stores half the spectrum; interior columns count twice
        wts = np.full(dens.shape[-1], 2.0)
        wts[0] = 1.0
        if self.n % 2 == 0:
            wts[-1] = 1.0
        return float(self.cell / self.size * np.sum(dens * wts))

    def parseval_l2(self, w: np.ndarray) -> float:
        """Squared L2 norm computed on the transform side."""
        return self._spectral_energy(np.abs(self.fft(self.check(w))) ** 2)

    def boundary_mass_fraction(self, w: np.ndarray) -> float:
        """Share of ``int |w|`` carried where ``max_j |x_j| > L/2``.

        Grid points on the faces ``|x_j| = L/2`` count half.
        """
        aw = np.abs(w)
        total = np.sum(aw)
        if total == 0:
            return 0.0
        return float(max(0.0, 1.0 - np.sum(aw * self._inner_weight) / total))

    def warn_boundary(self, w: np.ndarray, tol: float = DEFAULT_BOUNDARY_TOL, what: str = "field") -> float:
        frac = self.boundary_mass_fraction(w)
        if frac > tol:
            warnings.warn(
                f"{what}: boundary mass fraction {frac:.2e} exceeds {tol:.1e}; "
                "the periodic box is too small",
                BoundaryMassWarning,
                stacklevel=2,
            )
        return frac

    # ------------------------------------------------------------------
    # trigonometric interpolation along tensor-product point sets
    def interp_matrix(self, pts: np.ndarray) -> np.ndarray:
        """Matrix evaluating the 1D trigonometric interpolant at ``pts``.

        Points outside ``[-L, L)`` get zero rows: fields are assumed to vanish
        beyond the box, which the boundary-mass monitor is there to check.
        """
        n, L = self.n, self.L
        k = np.fft.fftfreq(n, d=1.0 / n)
        xi = np.pi / L * k
        # forward DFT matrix (samples -> coefficients)
        F = np.exp(-1j * np.outer(xi, self.axis + L)) / n
        E = np.exp(1j * np.outer(pts + L, xi))
        nyq = n // 2
        # symmetric treatment of the Nyquist mode: cos instead of exp
        E[:, nyq] = np.cos(xi[nyq] * (pts + L))
        M = np.real(E @ F)
        M[(pts < -L) | (pts >= L)] = 0.0
        return M

    def resample(self, w: np.ndarray, scale: float) -> np.ndarray:
        """Evaluate ``w(scale * x)`` on the grid by Fourier interpolation."""
        M = self.interp_matrix(scale * self.axis)
        out = self.check(w)
        for ax in range(self.d):
            out = np.moveaxis(np.tensordot(M, out, axes=([1], [ax])), 0, ax)
        return out
