"""Acceptance criteria for the toolkit.

Each test prints exactly one ``CRITERION n: PASS|FAIL ...`` line and asserts
at the stated tolerance.  The lines are also collected and repeated in the
pytest terminal summary.  Run just this file with

    pytest tests/test_acceptance.py -v -s

The whole file takes about half an hour on one core once references are cached.
"""
import math

import numpy as np
import pytest
from gmpy2 import mpfr

from lorenzcg.adjoint import DualConfig, solve_dual
from lorenzcg.cli import main
from lorenzcg.errormodel import (
    ErrorModel,
    apriori_bound,
    calibrate,
    computability,
    fit_loglog_slope,
    optimal_timestep,
    synthetic_sweep,
)
from lorenzcg.galerkin import SolverConfig, integrate, orthogonality_defects
from lorenzcg.harness import (
    computability_study,
    order_study,
    pair_divergence,
    stability_study,
    sweep_k,
)
from lorenzcg.precision import make_context
from lorenzcg.problem import lorenz_system
from lorenzcg.quadrature import gauss_legendre, gauss_lobatto
from lorenzcg.trajectory import load, save

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

VERDICTS = []


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line, flush=True)
    VERDICTS.append(line)
    return ok


def within(x, want, tol):
    return x is not None and abs(x - want) <= tol


def v_branches(table, saturation=1.0):
    """Slopes of the two branches of a V-shaped sweep, split at the minimum error.

    The minimum itself and saturated points (error >= ``saturation``) are
    left out of both fits.  A branch with fewer than two points gives None.
    """
    dts = [float(k) for k in table.column("dt")]
    errs = [float(e) for e in table.column("error")]
    i_min = int(np.argmin(errs))
    left = [(k, e) for i, (k, e) in enumerate(zip(dts, errs)) if i < i_min and e < saturation]
    right = [(k, e) for i, (k, e) in enumerate(zip(dts, errs)) if i > i_min and e < saturation]
    fit = lambda pts: fit_loglog_slope(pts)[0] if len(pts) >= 2 else None  # noqa: E731
    return fit(left), fit(right), list(zip(dts, errs))


def fmt(x):
    return "n/a" if x is None else f"{x:.3f}"


@pytest.fixture(scope="module")
def stability():
    return stability_study(["10", "20", "30", "40", "50"], digits=64)


def test_criterion_1_order_verification():
    slopes = {q: order_study(q, digits=64).slope for q in (1, 2, 3)}
    ok = all(within(slopes[q], 2 * q, 0.2) for q in slopes)
    verdict(1, ok, "order slopes " + ", ".join(f"q={q}: {s:.3f} (want {2 * q} +- 0.2)" for q, s in slopes.items()))
    assert ok


def test_criterion_2_roundoff_scaling():
    dts1 = [f"{m}e-{e}" for e in range(1, 6) for m in (5, 2, 1)][2:]  # 1e-1 .. 1e-5
    t1 = sweep_k(1, dts1, 16, "30")
    l1, r1, _ = v_branches(t1)
    dts5 = [f"{m}e-{e}" for e in range(1, 4) for m in (5, 2, 1)][2:]  # 1e-1 .. 1e-3
    t5 = sweep_k(5, dts5, 16, "40")
    l5, r5, _ = v_branches(t5)
    ok = (within(r1, 1.95, 0.3) and within(l1, -0.35, 0.15)
          and within(r5, 10.0, 0.5) and within(l5, -0.49, 0.15))
    verdict(2, ok, f"cG1 T=30 right {fmt(r1)} (1.95 +- 0.3) left {fmt(l1)} (-0.35 +- 0.15); "
                   f"cG5 T=40 right {fmt(r5)} (10 +- 0.5) left {fmt(l5)} (-0.49 +- 0.15)")
    assert ok


def test_criterion_3_stability_growth_rate(stability):
    rate = getattr(stability, "rate", None)
    ok = within(rate, 0.39, 0.10)
    verdict(3, ok, f"log10 S_C growth rate {fmt(rate)} (want 0.39 +- 0.10)")
    assert ok


def test_criterion_4_sixteen_digit_computability():
    r16 = pair_divergence(2, 4, "0.001", 16, "60", tol="1e-16").report
    r32 = pair_divergence(2, 4, "0.001", 32, "60", tol="1e-16").report
    t16 = None if r16.never else float(r16.t_div)
    t32 = math.inf if r32.never else float(r32.t_div)
    ok = t16 is not None and 20 <= t16 <= 55 and t32 > t16
    verdict(4, ok, f"t_div 16 digits {t16} (want [20, 55]); 32 digits {t32} (want > 16-digit value)")
    assert ok


def test_criterion_5_computability_slope():
    table = computability_study((8, 16, 24, 32), q=4)
    slope = getattr(table, "slope", None)
    ok = within(slope, 2.5, 0.5)
    tds = ", ".join(f"n={n}: {t}" for n, t in zip(table.column("n_mach"), table.column("t_div")))
    verdict(5, ok, f"slope {fmt(slope)} (want 2.5 +- 0.5); {tds}")
    assert ok


def test_criterion_6_formula_identities():
    c = make_context(500)
    k = float(optimal_timestep(100, c.scalar("1e-420")))
    horizons = [float(computability(c.scalar(f"1e-{n}"))) for n in (6, 16, 420)]
    e16 = c.scalar("1e-16")
    # exact crossing of exp(33 T) eps = 1, then check the bound there
    T_star = math.log(1e16) / 33
    at_star = float(apriori_bound(c.scalar(33), c.scalar(repr(T_star)), e16))
    below = float(apriori_bound(c.scalar(33), c.scalar("1.0"), e16))
    above = float(apriori_bound(c.scalar(33), c.scalar("1.2"), e16))
    ok = (0.007 <= k <= 0.009 and all(abs(h - w) < 1e-9 for h, w in zip(horizons, (15, 40, 1050)))
          and abs(T_star - 1.1) <= 0.05 and abs(at_star - 1) < 1e-12 and below < 1 < above)
    verdict(6, ok, f"k_opt(100, 1e-420) {k:.5f}; horizons {horizons}; bound reaches 1 at T={T_star:.4f}")
    assert ok


def _property_checks(tmp_path):
    checks = {}
    ctx = make_context(32)
    system = lorenz_system(ctx)
    cfg = SolverConfig(3, "0.02", ctx)
    traj = integrate(system, [1, 0, 0], 1, cfg)

    worst = 0.0
    for n in range(traj.M):
        scale = max(1, max(abs(float(v)) for v in traj.nodes[n][0]))
        worst = max([worst] + [float(d) / (float(cfg.residual_tol) * scale) for d in orthogonality_defects(traj, system, n)])
    checks["orthogonality"] = worst <= 1

    checks["continuity"] = all(traj.nodes[i][0] == traj.nodes[i - 1][-1] and traj.evaluate(traj.times[i]).raw == traj.nodes[i][0]
                               for i in range(1, traj.M))

    z1 = solve_dual(traj, DualConfig(z_T=["0.3", "-1", "2"]), system)
    z2 = solve_dual(traj, DualConfig(z_T=["0.6", "-2", "4"]), system)
    with ctx.local():
        checks["dual linearity"] = all(abs(2 * x - y) <= 1000 * ctx.eps.value * max(1, abs(y))
                                       for n1, n2 in zip(z1.trajectory.nodes, z2.trajectory.nodes)
                                       for a, b in zip(n1, n2) for x, y in zip(a, b))

    ok = True
    for d in (16, 50):
        c = make_context(d)
        t = integrate(lorenz_system(c), [1, 0, 0], "0.3", SolverConfig(3, "0.1", c))
        p = tmp_path / f"rt{d}.traj"
        save(t, p)
        back = load(p)
        ok = ok and back.nodes == t.nodes and back.times == t.times
    checks["serialization"] = ok

    a, b = tmp_path / "a.traj", tmp_path / "b.traj"
    main(["solve", "-q", "3", "--dt", "0.05", "--tmax", "1", "--out", str(a)])
    main(["replay", str(a), "--out", str(b)])
    checks["replay determinism"] = a.read_bytes() == b.read_bytes()

    ok = True
    for d in (32, 64, 420):
        c = make_context(d)
        for family in (gauss_legendre, gauss_lobatto):
            for n in (2, 3, 6, 11):
                r = family(n, c)
                with c.local():
                    ok = ok and all(abs(r.integrate([x ** k for x in r.points]) - mpfr(1) / (k + 1)) <= 20 * c.eps.value
                                    for k in range(r.exactness_degree + 1))
    checks["quadrature exactness"] = ok

    c = make_context(40)
    truth = ErrorModel(C2={2: "0.00073", 3: "0.00041"}, C3={2: "0.0031", 3: "0.0037"},
                       C2_default=None, C3_default=None)
    dts = [f"{k:.6g}" for k in np.logspace(-1, -5, 17)]
    pts = []
    for q in (2, 3):
        pts += synthetic_sweep(truth, q, dts, c.scalar("1e-16"), c.scalar(0))
    m = calibrate(pts, gamma="0.388", saturation=1e300)
    checks["inverse crime"] = all(abs(float(m.C2[q]) / float(truth.C2[q]) - 1) < 1e-4
                                  and abs(float(m.C3[q]) / float(truth.C3[q]) - 1) < 1e-4 for q in (2, 3))
    return checks


def test_criterion_7_property_suite(tmp_path):
    checks = _property_checks(tmp_path)
    ok = all(checks.values())
    verdict(7, ok, "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


def test_criterion_8_extrapolation(stability):
    rate = getattr(stability, "rate", None)
    logS = float(stability.meta["log10_S_C_at_1000"]) if rate is not None else None
    ok = within(logS, 388, 100)
    verdict(8, ok, f"extrapolated log10 S_C(1000) {fmt(logS)} (want 388 +- 100)")
    assert ok
