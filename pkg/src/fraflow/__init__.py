"""Numerical laboratory for a fractional fast-diffusion flow.

Modules: ``spectral`` (periodic pseudo-spectral grid), ``profiles``
(exponents, constants, reference profiles), ``flow`` (time integration and
diagnostics), ``gns`` (GNS quotient ascent and self-similar comparison),
``linstab`` (linearized quadratic form and spectral gap), ``rps`` (carre du
champ identities for s = 0) and ``cli`` (experiment runner).
"""

__version__ = "0.1.0"

from .profiles import ModelParams, exponents
from .spectral import Grid

__all__ = ["Grid", "ModelParams", "__version__", "exponents"]
