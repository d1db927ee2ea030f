"""Acceptance suite: one test per criterion, each printing a one-line verdict."""

import itertools
import json
import math
import time

import numpy as np
import pytest
from conftest import GEN, positive_field
from scipy.optimize import minimize_scalar

from fraflow.cli import main
from fraflow.flow import FlowOptions, FlowState, check_ei, renyi_slope, run
from fraflow.gns import (
    GnsOptions,
    estimate_cgns,
    selfsim_vs_optimal,
    stationarity_residual,
)
from fraflow.linstab import (
    GapOptions,
    PerturbationSpec,
    constraint_residual,
    entropy_expansion_check,
    project_orthogonal,
    q_form,
    spectral_gap,
)
from fraflow.profiles import (
    ModelParams,
    ProfileKind,
    ProfileSpec,
    at_constant,
    barenblatt_constant,
    barenblatt_evolution,
    barenblatt_s0,
    exponents,
    gns_exponents,
    kappa,
    make_profile,
    periodic_r2,
    scale_R,
    sobolev_constant,
    special_m,
)
from fraflow.rps import id1_residual, id2_residual, iprime_decomposition
from fraflow.spectral import Grid


@pytest.fixture
def verdict(capsys):
    """Print ``C<k> PASS|FAIL: detail`` on the terminal, then assert."""

    def _report(k: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nC{k:<2d} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail

    return _report


def _wstar(g: Grid, scale: float = 1.0) -> np.ndarray:
    return make_profile(ProfileSpec(ProfileKind.AUBIN_TALENTI, g.d, alpha=1.0, scale=scale), g)


def _closed_form(g: Grid, m: float) -> tuple[np.ndarray, float]:
    C = barenblatt_constant(g, m, 1.0)
    return barenblatt_s0(g.r2, m, C), C


@pytest.fixture(scope="module")
def d2_runs():
    """d=2 runs from the closed-form s=0 profile at two record strides."""
    g = Grid(2, 64, 12.0)
    out = {}
    for s, m in [(0.0, 0.75), (0.25, 0.8)]:
        p = ModelParams(2, s, m)
        B, _ = _closed_form(g, m)
        out[s] = [run(g, FlowState(0.0, B, p), 1.0, FlowOptions(record_dt=rd)) for rd in (0.025, 0.0125)]
    return out


@pytest.fixture(scope="module")
def s0_d1_run():
    """Barenblatt evolution at s=0, d=1 with steep tails, to T=1."""
    g = Grid(1, 128, 12.0)
    p = ModelParams(1, 0.0, 0.85)
    B, C = _closed_form(g, p.m)
    return g, p, C, run(g, FlowState(0.0, B, p), 1.0, FlowOptions(record_dt=0.05))


def test_c01_aubin_talenti_residual(verdict):
    t0 = time.perf_counter()
    g = Grid(2, 256, 20.0)
    w = _wstar(g)
    lhs = g.frac_laplacian(w, 0.5)
    rhs = at_constant(2, 1.0) * w**3
    mask = g.sup_norm_x <= g.L / 2
    res = np.linalg.norm((lhs - rhs)[mask]) / np.linalg.norm(rhs[mask])
    dt = time.perf_counter() - t0
    verdict(1, res <= 1e-3 and dt <= 5.0,
            f"interior AT residual {res:.3e} (tol 1e-3), {dt:.3f}s (limit 5s)")


def test_c02_sobolev_endpoint(verdict):
    S = sobolev_constant(2, 1.0)
    crit = gns_exponents(2, 1.0, 2.0)
    errs = []
    for n, L in [(512, 80.0), (1024, 160.0), (2048, 320.0)]:
        g = Grid(2, n, L)
        w = _wstar(g)
        ray = g.hs_seminorm(w, crit.alpha) / g.lp_norm(w, 4) ** 2
        errs.append(abs(ray / S - 1))
    ok = errs[-1] <= 2e-2 and all(a > b for a, b in itertools.pairwise(errs))
    verdict(2, ok, "Rayleigh/S - 1 under (L, n) doubling: " + ", ".join(f"{e:.3%}" for e in errs))


def test_c03_mass_conservation(verdict, d2_runs):
    drift = {}
    for s, trs in d2_runs.items():
        mass = trs[1].column("mass")
        drift[s] = float(np.max(np.abs(mass - mass[0])) / mass[0])
    verdict(3, max(drift.values()) <= 1e-9,
            "relative mass drift over T=1: " + ", ".join(f"s={s}: {v:.1e}" for s, v in drift.items()))


def test_c04_entropy_identity(verdict, d2_runs):
    parts, ok = [], True
    for s, (coarse, fine) in d2_runs.items():
        r1, r2 = check_ei(coarse).max_rel, check_ei(fine).max_rel
        ok &= r2 <= 1e-3 and r1 / r2 >= 3.5
        parts.append(f"s={s}: max {r2:.2e}, halving ratio {r1 / r2:.2f}")
    verdict(4, ok, "; ".join(parts) + " (tol 1e-3, ratio >= 3.5)")


def test_c05_renyi_affine(verdict, s0_d1_run):
    _, p, _, tr = s0_d1_run
    k_star = p.mu * tr.records[0].renyi
    res = renyi_slope(tr, k_star)
    err = abs(res.fit_slope / k_star - 1)
    verdict(5, err <= 5e-3, f"fitted F slope vs mu F[B]: rel err {err:.2e} (tol 5e-3), "
            f"fit residual {res.fit_residual:.1e}")


def test_c06_entropy_power_growth(verdict):
    g = Grid(2, 64, 12.0)
    parts, ok = [], True
    for s in (0.0, 0.25):
        m1 = ModelParams(2, s, 0.75).m1
        # m1 = 1/2 at s = 0 has no finite p; only the midpoint is admissible
        for m in ([m1] if m1 > 0.5 else []) + [(m1 + 1) / 2]:
            p = ModelParams(2, s, m)
            k = kappa(p, estimate_cgns(g, exponents(p)).C_GNS_est)
            B = barenblatt_s0(g.r2, m, barenblatt_constant(g, m, 1.0, boundary_tol=1e-2))
            u0 = B * (1 + 0.3 * np.cos(g.x[0]) * np.exp(-g.r2 / 4))
            u0 /= g.integrate(u0)
            tr = run(g, FlowState(0.0, u0, p), 0.3, FlowOptions(record_dt=0.02))
            r = renyi_slope(tr, k, tol=1e-2)
            ok &= r.passed
            parts.append(f"s={s:g},m={m:g}: min F'/kappa {np.min(r.slope) / k:.4f}")
    verdict(6, ok, "; ".join(parts) + " (need >= 0.99)")


def test_c07_selfsim_estimate(verdict, grid_gen, numerical_barenblatt):
    s, m = GEN[1], GEN[2]
    rows = selfsim_vs_optimal(grid_gen, [(0.0, 0.75), (s, m)], barenblatt={(s, m): numerical_barenblatt})
    r0, rg = rows
    err0 = abs(r0.kappa_est / r0.kappa_star_est - 1)
    ok = not (r0.error or rg.error) and rg.margin > 0 and err0 <= 1e-2
    verdict(7, ok, f"s={s}: kappa* - kappa = {rg.margin:+.3e} ({rg.margin / rg.kappa_star_est:+.2%}); "
            f"s=0: |kappa/kappa* - 1| = {err0:.2e} (tol 1e-2)")


def test_c08_gns_optimizer(verdict):
    e = exponents(ModelParams(*GEN))
    rep = estimate_cgns(Grid(2, 256, 24.0), e)
    g = Grid(2, 256, 40.0)
    crit = estimate_cgns(g, gns_exponents(2, 1.0, 2.0), GnsOptions(max_iter=3000))
    w = crit.w_opt

    def mismatch(log_scale):
        ws = _wstar(g, math.exp(log_scale))
        a = g.inner(ws, w) / g.inner(ws, ws)
        return g.lp_norm(a * ws - w, 2) / g.lp_norm(w, 2)

    match = minimize_scalar(mismatch, bounds=(-2, 2), method="bounded").fun
    ok = rep.monotone and crit.monotone and rep.el_residual <= 1e-4 and match <= 1e-2
    verdict(8, ok, f"monotone {rep.monotone and crit.monotone}, el_residual {rep.el_residual:.2e} "
            f"(tol 1e-4), critical w* mismatch {match:.2%} (tol 1%)")


def test_c09_selfsim_el_exhibit(verdict, grid_gen, numerical_barenblatt):
    p = ModelParams(*GEN)
    e = exponents(p)
    v = estimate_cgns(grid_gen, e).w_opt ** (2 * e.p)
    v /= grid_gen.integrate(v)
    base = stationarity_residual(grid_gen, numerical_barenblatt, p, fit_scale=True)
    ratio = stationarity_residual(grid_gen, v, p, fit_scale=True) / base
    # special exponent: the closed-form stationary profile seeds the ascent
    g = Grid(2, 128, 12.0)
    ms = special_m(2, 0.25)
    ps = ModelParams(2, 0.25, ms)
    w = make_profile(ProfileSpec(ProfileKind.SPECIAL_STATIONARY, 2, alpha=ps.alpha), g)
    vs = w ** (2 * exponents(ps).p)
    vs /= g.integrate(vs)
    row = selfsim_vs_optimal(g, [(0.25, ms)], barenblatt={(0.25, ms): vs})[0]
    ok = ratio >= 10 and row.stationarity_wopt <= 1e-3
    verdict(9, ok, f"generic ratio {ratio:.2e} (need >= 10); m=6/7: w_opt residual "
            f"{row.stationarity_wopt:.2e} (tol 1e-3), closed-form stationary profile {row.stationarity_B:.1e}")


def test_c10_s0_oracle(verdict, s0_d1_run):
    g, p, C, tr = s0_d1_run
    ref = barenblatt_evolution(g, p, 1.0, C)
    err = g.integrate(np.abs(tr.final.u - ref)) / g.integrate(ref)
    verdict(10, err <= 1e-3, f"relative L1 error at T=1: {err:.2e} (tol 1e-3)")


def test_c11_bakry_emery_identities(verdict):
    worst, mut = 0.0, math.inf
    rng = np.random.default_rng(11)
    for d in (1, 2):
        g = Grid(d, 64, math.pi)
        for m in (0.6, 0.75, 0.9):
            u = positive_field(g, rng, kmax=2, amp=0.5)
            worst = max(worst, id1_residual(g, u, m).residual, id2_residual(g, u, m).residual)
            mut = min(mut, id1_residual(g, u, m, k=(m - 1) / (2 * m - 1)).residual)
    verdict(11, worst <= 1e-8 and mut >= 1e-2,
            f"max identity residual {worst:.1e} (tol 1e-8), mutated residual {mut:.2e} (need >= 1e-2)")


def _periodized(g: Grid, m: float) -> np.ndarray:
    r2 = periodic_r2(g)
    B = barenblatt_s0(r2, m, barenblatt_constant(g, m, 1.0, r2=r2))
    u = B * (1 + 0.2 * np.cos(np.pi * g.x[0] / g.L) * np.exp(-r2 / 4))
    return u / g.integrate(u)


def test_c12_concavity(verdict):
    runs = []
    g1, p1 = Grid(1, 256, 12.0), ModelParams(1, 0.0, 0.75)
    runs.append((g1, p1, _periodized(g1, p1.m), 0.3))
    g2, p2 = Grid(2, 32, math.pi), ModelParams(2, 0.0, 0.8)
    u2 = np.exp(np.cos(g2.x[0]) + 0.5 * np.cos(g2.x[1]))
    runs.append((g2, p2, u2 / g2.integrate(u2), 0.2))
    worst_G, worst_agree, nsnap = -math.inf, 0.0, 0
    for g, p, u0, T in runs:
        tr = run(g, FlowState(0.0, u0, p), T, FlowOptions(record_dt=0.01, snapshot_every=2))
        for _, u in tr.snapshots:
            r = iprime_decomposition(g, u, p)
            worst_G = max(worst_G, r.G_definition / abs(r.E * r.iprime_formula))
            worst_agree = max(worst_agree, r.G_agreement)
            nsnap += 1
    gb = Grid(1, 256, 20.0)
    pb = ModelParams(1, 0.0, 0.9)
    B, _ = _closed_form(gb, pb.m)
    rb = iprime_decomposition(gb, B, pb, floor_rel=0.0)
    at_B = abs(rb.G_definition) / abs(rb.E * rb.iprime_formula)
    ok = worst_G <= 1e-10 and worst_agree <= 1e-6 and at_B <= 1e-5
    verdict(12, ok, f"{nsnap} snapshots: max G/|E I'| {worst_G:.2e} (tol 1e-10), "
            f"form agreement {worst_agree:.1e} (tol 1e-6), |G|/|E I'| at B {at_B:.1e}")


def test_c13_linear_stability(verdict):
    g = Grid(1, 256, 20.0)
    p = ModelParams(1, 0.0, 0.75)
    B, C = _closed_form(g, p.m)
    rng = np.random.default_rng(13)

    def smooth():
        return g.ifft(g.fft(rng.standard_normal(g.shape)) * np.exp(-g.abs_xi**2)) * np.sqrt(B)

    homog = parall = cons = 0.0
    for _ in range(10):
        f, h = smooth(), smooth()
        lam = rng.uniform(-10, 10)
        q = q_form(g, f, B, p)
        homog = max(homog, abs(q_form(g, lam * f, B, p) - lam**2 * q) / abs(lam**2 * q))
        lhs = q_form(g, f + h, B, p) + q_form(g, f - h, B, p)
        rhs = 2 * q + 2 * q_form(g, h, B, p)
        parall = max(parall, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
        cons = max(cons, constraint_residual(g, project_orthogonal(g, f + np.sqrt(B), B, p.m), B, p.m))
    rep = spectral_gap(g, B, p, GapOptions(n_init=3, seed=0))
    R = scale_R(1.0, p.mu)
    rep_t = spectral_gap(g, barenblatt_evolution(g, p, 1.0, C), p, GapOptions(n_init=1))
    scal = abs(rep_t.Lambda_est / rep.Lambda_est / R**-p.mu - 1)
    ok = (homog <= 1e-10 and parall <= 1e-10 and cons <= 1e-10 and rep.Lambda_est > 0
          and rep.spread <= 0.05 and scal <= 2e-2)
    verdict(13, ok, f"homogeneity {homog:.1e}, parallelogram {parall:.1e}, constraint {cons:.1e}, "
            f"Lambda {rep.Lambda_est:.4f} spread {rep.spread:.1e}, R^-mu scaling err {scal:.1e}")


def test_c14_perturbation_expansion(verdict):
    g = Grid(1, 512, 20.0)
    p = ModelParams(1, 0.0, 0.75)
    B, _ = _closed_form(g, p.m)
    f = np.exp(-g.r2) * (1 + g.x[0])
    r = entropy_expansion_check(g, PerturbationSpec(B, f, 0.0), p)
    ok = (abs(r.entropy_slope - 2) <= 0.02 and abs(r.rate_slope - 2) <= 0.02
          and r.entropy_prefactor_err <= 0.02 and r.rate_prefactor_err <= 0.05)
    verdict(14, ok, f"slopes {r.entropy_slope:.4f}/{r.rate_slope:.4f} (2 +- 0.02), prefactor errors "
            f"{r.entropy_prefactor_err:.1e} (tol 2e-2) / {r.rate_prefactor_err:.1e} (tol 5e-2)")


def test_c15_reproducibility(verdict, tmp_path):
    cfg = tmp_path / "repro.ini"
    cfg.write_text("[params]\nd = 1\ns = 0\nm = 0.85\n[grid]\nn = 128\nL = 12\n"
                   "[integrator]\nT = 0.1\nrecord_dt = 0.01\nsnapshot_every = 5\n")
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        main(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "5", "--threads", "1"])
        blobs.append((out / "summary.json").read_bytes())
    same = blobs[0] == blobs[1]
    status = json.loads(blobs[0])["status"]
    verdict(15, same, f"summary.json bit-identical across two runs: {same} (run status {status})")
