import gmpy2
import numpy as np
import pytest
from gmpy2 import mpfr
from hypothesis import given, settings, strategies as st

from lorenzcg.errors import ConfigError
from lorenzcg.galerkin import SolverConfig, integrate
from lorenzcg.precision import make_context, spectral_norm
from lorenzcg.problem import (
    LorenzParams,
    averaged_state,
    dual_rhs,
    fixed_points,
    lipschitz_estimate,
    lorenz_jacobian,
    lorenz_rhs,
    lorenz_system,
    make_problem,
)
from lorenzcg.quadrature import gauss_legendre
from lorenzcg.trajectory import Trajectory

coord = st.integers(-30000, 30000).map(lambda i: f"{i / 1000:.3f}")
state = st.tuples(coord, coord, coord.map(lambda s: str(abs(float(s)))))


def test_rhs_examples(ctx32):
    assert lorenz_rhs(ctx32.vector([0, 0, 0])).raw == [0, 0, 0]
    assert lorenz_rhs(ctx32.vector([1, 0, 0])).raw == [-10, 28, 0]


def test_rhs_vanishes_at_fixed_points():
    ctx = make_context(64)
    p = LorenzParams.default(ctx)
    pts = fixed_points(p)
    assert pts[0].raw == [0, 0, 0]
    for P in pts:
        f = lorenz_rhs(P, p)
        assert all(abs(v) <= 100 * ctx.eps.value for v in f.raw)
    # P+ = (6 sqrt 2, 6 sqrt 2, 27)
    with ctx.local():
        c = 6 * gmpy2.sqrt(mpfr(2))
    assert abs(pts[1][0].value - c) <= 10 * ctx.eps.value
    assert pts[1][2] == 27


def test_jacobian_examples(ctx32):
    J = lorenz_jacobian(ctx32.vector([0, 0, 0])).raw
    assert J[0] == [-10, 10, 0] and J[1] == [28, -1, 0]
    with ctx32.local():
        assert abs(J[2][2] + mpfr(8) / 3) < mpfr("1e-30")
    J = lorenz_jacobian(ctx32.vector([1, 0, 0])).raw
    assert J[1] == [28, -1, -1] and J[2][:2] == [0, 1]


@settings(max_examples=20, deadline=None)
@given(u=state)
def test_jacobian_matches_central_differences(u):
    d = 40
    ctx = make_context(d)
    x = [ctx.raw(s) for s in u]
    J = lorenz_jacobian(ctx.vector(x)).raw
    with ctx.local():
        h = mpfr(10) ** (-d // 2)
        for j in range(3):
            xp = list(x)
            xm = list(x)
            xp[j] += h
            xm[j] -= h
            fp = lorenz_rhs(ctx.vector(xp)).raw
            fm = lorenz_rhs(ctx.vector(xm)).raw
            for i in range(3):
                fd = (fp[i] - fm[i]) / (2 * h)
                assert abs(fd - J[i][j]) <= mpfr(10) ** (-d // 2 + 4) * max(1, abs(J[i][j]))


@settings(max_examples=50, deadline=None)
@given(z=state, ub=state)
def test_dual_rhs_is_minus_jacobian_transpose(z, ub):
    ctx = make_context(32)
    zv, uv = ctx.vector(z), ctx.vector(ub)
    Jt = lorenz_jacobian(uv).transpose()
    want = Jt @ zv
    got = dual_rhs(zv, uv)
    for a, b in zip(got.raw, want.raw):
        assert abs(a + b) <= 100 * ctx.eps.value * max(1, abs(b))


def test_dual_rhs_examples(ctx32):
    p = LorenzParams.default(ctx32)
    got = dual_rhs(ctx32.vector([1, 0, 0]), fixed_points(p)[1])
    assert got[0] == 10
    assert dual_rhs(ctx32.vector([0, 0, 0]), fixed_points(p)[1]).raw == [0, 0, 0]


def test_averaged_state(ctx32):
    a = ctx32.vector(["1.5", "-2", "3"])
    assert averaged_state(a, a).raw == a.raw
    assert averaged_state(ctx32.vector([2, 0, 0]), ctx32.vector([0, 2, 0])).raw == [1, 1, 0]


def test_averaged_jacobian_equals_midpoint_jacobian(ctx64):
    U = ctx64.vector(["1.25", "-3.5", "20.75"])
    u = ctx64.vector(["-0.5", "2", "17"])
    rule = gauss_legendre(10, ctx64)
    with ctx64.local():
        avg = [[mpfr(0)] * 3 for _ in range(3)]
        for s, w in zip(rule.points, rule.weights):
            pt = ctx64.vector([s * a + (1 - s) * b for a, b in zip(U.raw, u.raw)])
            J = lorenz_jacobian(pt).raw
            for i in range(3):
                for j in range(3):
                    avg[i][j] += w * J[i][j]
    Jm = lorenz_jacobian(averaged_state(U, u)).raw
    for i in range(3):
        for j in range(3):
            assert abs(avg[i][j] - Jm[i][j]) <= 1000 * ctx64.eps.value


def test_origin_spectral_norm_by_bisection():
    ctx = make_context(32)
    J = lorenz_jacobian(ctx.vector([0, 0, 0]))
    # A^T A is block diagonal: 2x2 block [[884, -128], [-128, 101]] and (8/3)^2
    def charpoly(lam):
        return (884 - lam) * (101 - lam) - 128 * 128

    lo, hi = mpfr(500), mpfr(2000)
    with gmpy2.context(precision=200):
        for _ in range(200):
            mid = (lo + hi) / 2
            if charpoly(mid) < 0:
                lo = mid
            else:
                hi = mid
        want = gmpy2.sqrt(lo)
    got = spectral_norm(J)
    assert abs(got.value - want) / want < 1e-8


def _constant_trajectory(ctx, value, T="1"):
    times = [mpfr(0, ctx.bits), ctx.raw(T)]
    nodes = [[list(value), list(value)]]
    return Trajectory(times, nodes, 1, ctx, {"name": "lorenz", "params": {}})


def test_lipschitz_constant_trajectory(ctx32):
    traj = _constant_trajectory(ctx32, [mpfr(0)] * 3)
    got = lipschitz_estimate(traj, "0.25")
    want = spectral_norm(lorenz_jacobian(ctx32.vector([0, 0, 0])))
    assert got == want


def test_lipschitz_large_sample_dt(ctx32):
    times = [mpfr(0), mpfr(1)]
    a, b = [ctx32.raw(1), mpfr(0), mpfr(0)], [ctx32.raw(5), mpfr(0), mpfr(0)]
    traj = Trajectory(times, [[a, b]], 1, ctx32, {"name": "lorenz", "params": {}})
    got = lipschitz_estimate(traj, "10")
    assert got == spectral_norm(lorenz_jacobian(ctx32.vector(a)))
    with pytest.raises(ValueError):
        lipschitz_estimate(traj, "0")


@pytest.mark.slow
def test_lipschitz_on_attractor():
    ctx = make_context(16)
    traj = integrate(lorenz_system(ctx), [1, 0, 0], 50, SolverConfig(4, "0.01", ctx))
    L = float(lipschitz_estimate(traj))
    assert 30 <= L <= 36


def test_make_problem_registry(ctx16):
    s = make_problem("lorenz", ctx16, {"r": "24.5"})
    assert s.params["r"].startswith("2.45")
    with pytest.raises(ConfigError):
        make_problem("lorenz", ctx16, {"rho": "1"})
    with pytest.raises(ConfigError):
        make_problem("rossler", ctx16)
    lin = make_problem("linear", ctx16, {"A": [["-1"]]})
    assert lin.linear and lin.f(ctx16.vector([2])).raw == [-2]


def test_params_default_b_is_eight_thirds(ctx64):
    p = LorenzParams.default(ctx64)
    assert abs(p.b.value * 3 - 8) <= 4 * ctx64.eps.value
