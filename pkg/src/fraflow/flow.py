"""Time integration of the fractional fast diffusion equation.

Original variables::

    u_t = div( sqrt(u) grad (-Delta)^{-s} u^{m-1/2} )

Self-similar variables (``v``, confinement by the box coordinate ``x``)::

    v_t = div( sqrt(v) [ grad (-Delta)^{-s} v^{m-1/2} + x sqrt(v) ] )

Both right-hand sides are assembled in divergence form so the discrete mass
is conserved to round-off by any Runge-Kutta method.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .profiles import ModelParams, exponents
from .spectral import DEFAULT_BOUNDARY_TOL, Grid

log = logging.getLogger(__name__)

__all__ = [
    "ORIGINAL",
    "RESCALED",
    "DiagRecord",
    "EIResult",
    "FlowError",
    "FlowOptions",
    "FlowState",
    "FlowTrace",
    "RenyiResult",
    "SpectralRadius",
    "check_ei",
    "diagnostics",
    "relative_entropy",
    "renyi_slope",
    "rhs",
    "rhs_jvp",
    "rhs_original",
    "rhs_rescaled",
    "run",
    "stable_dt",
    "stationary_profile",
    "step",
]

ORIGINAL = "original"
RESCALED = "rescaled"
DEFAULT_FLOOR_REL = 1e-12

# RK4 is stable for dt * lambda up to ~2.78 on the negative real axis; with
# D_eff = lambda h^2 / pi^2 the default c = 0.2 gives dt * lambda = 0.2 pi^2.
DEFAULT_CFL = 0.2


class FlowError(RuntimeError):
    """Integration aborted; ``state`` holds the last valid state."""

    def __init__(self, msg: str, state: FlowState | None = None):
        super().__init__(msg)
        self.state = state


@dataclass
class FlowState:
    t: float
    u: np.ndarray
    params: ModelParams
    frame: str = ORIGINAL

    def __post_init__(self):
        if self.frame not in (ORIGINAL, RESCALED):
            raise ValueError(f"frame must be {ORIGINAL!r} or {RESCALED!r}")


@dataclass(frozen=True)
class DiagRecord:
    t: float
    mass: float
    entropy: float
    fisher: float
    renyi: float
    boundary_frac: float
    min_u: float

    FIELDS = ("t", "mass", "entropy", "fisher", "renyi", "boundary_frac", "min_u")

    def as_row(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in self.FIELDS)


@dataclass
class FlowOptions:
    """Integrator settings.

    ``record_dt`` is the diagnostic stride in time; steps are shortened so
    that records land exactly on multiples of it.  ``snapshot_every`` stores
    the field every that many records (0 disables snapshots).
    """

    record_dt: float = 0.01
    cfl: float = DEFAULT_CFL
    floor_rel: float = DEFAULT_FLOOR_REL
    max_floor_fraction: float = 1e-2
    degraded_floor_mass: float = 1e-8
    dt_min: float = 1e-12
    dt_max: float = math.inf
    snapshot_every: int = 0
    boundary_tol: float = DEFAULT_BOUNDARY_TOL
    # test hook: replaces the physical right-hand side
    rhs_override: Callable[[Grid, np.ndarray], np.ndarray] | None = None


@dataclass
class FlowTrace:
    params: ModelParams
    frame: str
    records: list[DiagRecord] = field(default_factory=list)
    snapshots: list[tuple[float, np.ndarray]] = field(default_factory=list)
    dt_history: list[float] = field(default_factory=list)
    floor_activations: int = 0
    floor_mass: float = 0.0
    warnings: list[str] = field(default_factory=list)
    final: FlowState | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def degraded(self) -> bool:
        M0 = self.records[0].mass if self.records else 1.0
        return self.floor_mass > 1e-8 * M0


# ----------------------------------------------------------------------
# right-hand sides
def _floored(u: np.ndarray, floor_rel: float) -> np.ndarray:
    umax = float(np.max(u))
    if not umax > 0:
        raise FlowError("field is not positive anywhere")
    return np.maximum(u, floor_rel * umax)


def _flux(grid: Grid, u: np.ndarray, params: ModelParams, floor_rel: float) -> tuple[np.ndarray, np.ndarray]:
    uc = _floored(u, floor_rel)
    w = uc ** (params.m - 0.5)
    drift = grid.riesz_gradient(w, params.s)
    return uc, np.sqrt(uc) * drift


def rhs_original(grid: Grid, u: np.ndarray, params: ModelParams,
                 floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    """``div(sqrt(u) grad (-Delta)^{-s} u^{m-1/2})``, exactly mean free."""
    u = grid.check(u, "u")
    _, P = _flux(grid, u, params, floor_rel)
    return grid.divergence(P)


def rhs_rescaled(grid: Grid, v: np.ndarray, params: ModelParams,
                 floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    """Self-similar right-hand side with confinement ``div(x v)``."""
    v = grid.check(v, "v")
    vc, P = _flux(grid, v, params, floor_rel)
    P += grid.x * vc
    return grid.divergence(P)


def rhs(grid: Grid, u: np.ndarray, params: ModelParams, frame: str,
        floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    if frame == ORIGINAL:
        return rhs_original(grid, u, params, floor_rel)
    return rhs_rescaled(grid, u, params, floor_rel)


def rhs_jvp(grid: Grid, u: np.ndarray, du: np.ndarray, params: ModelParams, frame: str,
            floor_rel: float = DEFAULT_FLOOR_REL) -> np.ndarray:
    """Directional derivative of the right-hand side at ``u`` along ``du``."""
    uc = _floored(u, floor_rel)
    m, s = params.m, params.s
    w = uc ** (m - 0.5)
    dw = (m - 0.5) * uc ** (m - 1.5) * du
    P = 0.5 * du / np.sqrt(uc) * grid.riesz_gradient(w, s) + np.sqrt(uc) * grid.riesz_gradient(dw, s)
    if frame == RESCALED:
        P += grid.x * du
    return grid.divergence(P)


def _local_rate(grid: Grid, u: np.ndarray, params: ModelParams, frame: str, floor_rel: float) -> float:
    uc = _floored(u, floor_rel)
    lam = (params.m - 0.5) * float(np.max(uc ** (params.m - 1))) * grid.xi_max**params.alpha
    if frame == RESCALED:
        lam += grid.L * math.sqrt(grid.d) * grid.xi_max + grid.d
    return lam


class SpectralRadius:
    """Warm-started power iteration for the linearised right-hand side.

    Pseudo-spectral products couple grid-scale modes in the tails (large
    ``u^(m-3/2)``) with the core (large ``sqrt(u)``), so the operator norm can
    exceed the local diffusivity bound by an order of magnitude.
    """

    def __init__(self, grid: Grid, every: int = 25, iters: int = 6, first_iters: int = 40,
                 safety: float = 1.15, seed: int = 0):
        self.grid = grid
        self.every = every
        self.iters = iters
        self.first_iters = first_iters
        self.safety = safety
        self._vec = np.random.default_rng(seed).standard_normal(grid.shape)
        self._count = 0
        self.value = None

    def __call__(self, u: np.ndarray, params: ModelParams, frame: str, floor_rel: float) -> float:
        if self.value is None or self._count % self.every == 0:
            iters = self.first_iters if self.value is None else self.iters
            v = self._vec / np.linalg.norm(self._vec)
            est = 0.0
            for _ in range(iters):
                Jv = rhs_jvp(self.grid, u, v, params, frame, floor_rel)
                est = float(np.linalg.norm(Jv))
                if est == 0:
                    break
                v = Jv / est
            self._vec = v
            local = _local_rate(self.grid, u, params, frame, floor_rel)
            self.value = max(self.safety * est, local)
        self._count += 1
        return self.value


def stable_dt(grid: Grid, u: np.ndarray, params: ModelParams, frame: str,
              cfl: float = DEFAULT_CFL, floor_rel: float = DEFAULT_FLOOR_REL,
              radius: SpectralRadius | None = None) -> float:
    """``dt = c h^2 / D_eff`` with ``D_eff = lambda h^2 / pi^2``.

    ``lambda`` bounds the spectral radius of the linearised operator: the
    local rate ``(m - 1/2) max u^(m-1) |xi|_max^alpha`` (plus the transport
    rate ``|x|_max |xi|_max + d`` in self-similar variables), raised to the
    power-iteration estimate when a ``SpectralRadius`` tracker is given.
    """
    if radius is not None:
        lam = radius(u, params, frame, floor_rel)
    else:
        lam = _local_rate(grid, u, params, frame, floor_rel)
    D_eff = lam * grid.h**2 / math.pi**2
    return cfl * grid.h**2 / D_eff


# ----------------------------------------------------------------------
# stepping
def _rk4(f: Callable[[np.ndarray], np.ndarray], u: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def step(grid: Grid, state: FlowState, dt: float, opts: FlowOptions | None = None,
         trace: FlowTrace | None = None) -> FlowState:
    """One classical RK4 step, followed by flooring of negative values."""
    opts = opts or FlowOptions()
    if not dt > 0:
        raise ValueError("dt must be positive")
    if opts.rhs_override is not None:
        def f(u):
            return opts.rhs_override(grid, u)
    else:
        def f(u):
            return rhs(grid, u, state.params, state.frame, opts.floor_rel)

    u_new = _rk4(f, state.u, dt)
    if not np.all(np.isfinite(u_new)):
        raise FlowError(f"non-finite values at t = {state.t + dt:g}", state)
    if opts.rhs_override is None:
        neg = u_new < 0
        nneg = int(np.count_nonzero(neg))
        if nneg:
            frac = nneg / u_new.size
            if frac > opts.max_floor_fraction:
                raise FlowError(
                    f"{nneg} points ({frac:.1%}) went negative at t = {state.t + dt:g}; "
                    "reduce cfl or refine the grid", state)
            eps = opts.floor_rel * float(np.max(u_new))
            added = grid.cell * float(np.sum(eps - u_new[neg]))
            u_new = np.where(neg, eps, u_new)
            if trace is not None:
                trace.floor_activations += nneg
                trace.floor_mass += added
    return FlowState(state.t + dt, u_new, state.params, state.frame)


def diagnostics(grid: Grid, u: np.ndarray, params: ModelParams,
                t: float = 0.0, floor_rel: float = DEFAULT_FLOOR_REL) -> DiagRecord:
    """Mass, entropy ``int u^m``, Fisher information and Renyi power ``E^sigma``."""
    u = grid.check(u, "u")
    uc = _floored(u, floor_rel)
    E = grid.integrate(uc**params.m)
    w = uc ** (params.m - 0.5)
    I = grid.hs_seminorm(w, params.alpha)
    sigma = exponents(params).sigma
    return DiagRecord(
        t=t,
        mass=grid.integrate(u),
        entropy=E,
        fisher=I,
        renyi=E**sigma,
        boundary_frac=grid.boundary_mass_fraction(u),
        min_u=float(np.min(u)),
    )


def run(grid: Grid, state: FlowState, T: float, opts: FlowOptions | None = None) -> FlowTrace:
    """Integrate to time ``state.t + T`` recording diagnostics every ``record_dt``."""
    opts = opts or FlowOptions()
    if not opts.record_dt > 0:
        raise ValueError("record_dt must be positive")
    nrec = round(T / opts.record_dt)
    if abs(nrec * opts.record_dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of record_dt")
    trace = FlowTrace(params=state.params, frame=state.frame)
    t0 = state.t
    radius = SpectralRadius(grid)

    def record(st: FlowState, k: int) -> None:
        rec = diagnostics(grid, st.u, st.params, t=st.t, floor_rel=opts.floor_rel)
        trace.records.append(rec)
        if rec.boundary_frac > opts.boundary_tol:
            msg = f"t={st.t:g}: boundary mass fraction {rec.boundary_frac:.2e}"
            if not trace.warnings or not trace.warnings[-1].startswith("t="):
                log.warning(msg)
            trace.warnings.append(msg)
        if opts.snapshot_every and k % opts.snapshot_every == 0:
            trace.snapshots.append((st.t, st.u.copy()))

    record(state, 0)
    for k in range(1, nrec + 1):
        t_target = t0 + k * opts.record_dt
        while state.t < t_target - 1e-14 * max(1.0, abs(t_target)):
            if opts.rhs_override is not None:
                dt = opts.dt_max
            else:
                dt = stable_dt(grid, state.u, state.params, state.frame, opts.cfl, opts.floor_rel, radius)
            dt = min(dt, opts.dt_max)
            remaining = t_target - state.t
            if dt >= remaining:
                dt = remaining
            elif dt > 0.5 * remaining:
                # split the remainder evenly rather than leave a sliver
                dt = 0.5 * remaining
            if dt < opts.dt_min:
                raise FlowError(f"dt underflow ({dt:.3e}) at t = {state.t:g}", state)
            state = step(grid, state, dt, opts, trace)
            trace.dt_history.append(dt)
        state = FlowState(t_target, state.u, state.params, state.frame)
        record(state, k)
    trace.final = state
    if trace.degraded:
        trace.warnings.append(f"degraded: floor added mass {trace.floor_mass:.3e}")
    return trace


# ----------------------------------------------------------------------
# identities along traces
@dataclass(frozen=True)
class EIResult:
    times: np.ndarray
    dE_dt: np.ndarray
    predicted: np.ndarray
    abs_residual: np.ndarray
    rel_residual: np.ndarray

    @property
    def max_rel(self) -> float:
        return float(np.max(self.rel_residual))


def _uniform_stride(trace: FlowTrace) -> float:
    t = trace.times
    if t.size < 3:
        raise ValueError("need at least 3 records")
    dt = np.diff(t)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * abs(dt[0]):
        raise ValueError("records are not at a uniform stride")
    return float(dt[0])


def check_ei(trace: FlowTrace) -> EIResult:
    """Compare centred-difference ``dE/dt`` with ``2m(1-m)/(2m-1) I``.

    In self-similar variables the confinement contributes ``-d(1-m) E``.
    The two terms cancel at the stationary profile, so residuals there are
    relative to the larger term rather than to their difference.
    """
    tau = _uniform_stride(trace)
    p = trace.params
    E = trace.column("entropy")
    I = trace.column("fisher")
    dE = (E[2:] - E[:-2]) / (2 * tau)
    pred = (2 * p.m * (1 - p.m) / (2 * p.m - 1)) * I[1:-1]
    scale = np.abs(pred)
    if trace.frame == RESCALED:
        conf = p.d * (1 - p.m) * E[1:-1]
        scale = np.maximum(scale, conf)
        pred = pred - conf
    absr = np.abs(dE - pred)
    scale = np.maximum(scale, np.finfo(float).tiny)
    return EIResult(trace.times[1:-1], dE, pred, absr, absr / scale)


@dataclass(frozen=True)
class RenyiResult:
    times: np.ndarray
    slope: np.ndarray
    kappa_ref: float
    passed: bool
    margin: float
    fit_slope: float
    fit_residual: float


def renyi_slope(trace: FlowTrace, kappa_ref: float, tol: float = 1e-2) -> RenyiResult:
    """Centred-difference ``F'`` against a reference rate.

    PASS iff ``F' >= kappa_ref (1 - tol)`` at every interior record.  The
    affine least-squares fit of ``F(t)`` is reported alongside.
    """
    tau = _uniform_stride(trace)
    F = trace.column("renyi")
    t = trace.times
    dF = (F[2:] - F[:-2]) / (2 * tau)
    margin = float(np.min(dF / kappa_ref - (1 - tol)))
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, F, rcond=None)
    fit_res = float(np.max(np.abs(A @ coef - F)) / np.max(np.abs(F)))
    return RenyiResult(t[1:-1], dF, kappa_ref, margin >= 0, margin, float(coef[0]), fit_res)


def relative_entropy(grid: Grid, u: np.ndarray, uref: np.ndarray, m: float,
                     mass_rtol: float = 1e-6) -> float:
    """``1/(m-1) int (u^m - uref^m - m uref^(m-1) (u - uref))``, nonnegative."""
    Mu, Mr = grid.integrate(u), grid.integrate(uref)
    if abs(Mu - Mr) > mass_rtol * abs(Mr):
        raise ValueError(f"mass mismatch: {Mu!r} vs {Mr!r}")
    if np.any(u < 0) or np.any(uref <= 0):
        raise ValueError("relative entropy needs u >= 0 and uref > 0")
    dens = u**m - uref**m - m * uref ** (m - 1) * (u - uref)
    return grid.integrate(dens) / (m - 1)


# ----------------------------------------------------------------------
# numerical self-similar profile
def stationary_profile(grid: Grid, params: ModelParams, v0: np.ndarray | None = None,
                       tol: float = 1e-8, t_max: float = 200.0, chunk: float = 0.5,
                       cfl: float = DEFAULT_CFL) -> tuple[np.ndarray, dict]:
    """Run the self-similar flow until ``||rhs||_2 / ||v||_2 <= tol``.

    The initial guess defaults to the s=0 Barenblatt profile of the same mass.
    Returns the profile and a small info dict (time used, final residual).
    """
    from .profiles import ProfileKind, ProfileSpec, make_profile

    if v0 is None:
        v0 = make_profile(ProfileSpec(ProfileKind.BARENBLATT_S0, grid.d, m=params.m, M=params.M), grid)
    state = FlowState(0.0, v0.copy(), params, RESCALED)
    opts = FlowOptions(record_dt=chunk, cfl=cfl)
    history = []
    res = math.inf
    while state.t < t_max:
        res = grid.lp_norm(rhs_rescaled(grid, state.u, params), 2) / grid.lp_norm(state.u, 2)
        history.append((state.t, res))
        if res <= tol:
            break
        tr = run(grid, state, chunk, opts)
        state = tr.final
    else:
        res = grid.lp_norm(rhs_rescaled(grid, state.u, params), 2) / grid.lp_norm(state.u, 2)
    info = {"t": state.t, "residual": res, "history": history, "converged": res <= tol}
    if not res <= tol:
        log.warning("stationary profile not converged: residual %.3e after t = %g", res, state.t)
    return state.u, info
