import math

import pytest
from gmpy2 import mpfr
from hypothesis import given, settings, strategies as st

from lorenzcg.errors import (
    CapabilityError,
    DomainError,
    FormatVersionError,
    PrecisionMismatchError,
    TrajectoryFormatError,
    TruncatedFileError,
)
from lorenzcg.galerkin import SolverConfig, integrate
from lorenzcg.precision import make_context
from lorenzcg.problem import linear_system, lorenz_system
from lorenzcg.quadrature import nodal_basis
from lorenzcg.trajectory import (
    Trajectory,
    divergence_time,
    load,
    read_header,
    save,
    uniform_partition,
)


def poly_trajectory(ctx, q, f, times):
    """Piecewise interpolant of scalar ``f`` on Lobatto nodes."""
    basis = nodal_basis(q, ctx)
    nodes = []
    with ctx.local():
        for a, b in zip(times, times[1:]):
            nodes.append([[f(a + x * (b - a))] for x in basis.nodes])
        for i in range(1, len(nodes)):
            nodes[i][0] = nodes[i - 1][-1]
    return Trajectory(times, nodes, q, ctx, {"name": "test"})


def test_uniform_partition(ctx32):
    t = uniform_partition(mpfr(0), ctx32.raw(1), ctx32.raw("0.1"), ctx32)
    assert len(t) == 11 and t[-1] == 1
    t = uniform_partition(mpfr(0), ctx32.raw("0.35"), ctx32.raw("0.1"), ctx32)
    assert len(t) == 5 and t[-1] == ctx32.raw("0.35")
    with pytest.raises(DomainError):
        uniform_partition(mpfr(1), ctx32.raw(1), ctx32.raw("0.1"), ctx32)


def test_evaluate_reproduces_polynomial(ctx64):
    times = [ctx64.raw(x) for x in ("0", "0.5", "1.25", "2")]
    traj = poly_trajectory(ctx64, 3, lambda t: 2 * t ** 3 - t + 1, times)
    for s in ("0.1", "0.5", "0.9", "1.7", "2"):
        t = ctx64.raw(s)
        with ctx64.local():
            want = 2 * t ** 3 - t + 1
            assert abs(traj.evaluate(s)[0].value - want) <= 100 * ctx64.eps.value


@pytest.mark.parametrize("q", [1, 2, 4, 7])
def test_qth_derivative_is_factorial(ctx64, q):
    times = [mpfr(0), ctx64.raw(1)]
    traj = poly_trajectory(ctx64, q, lambda t: t ** q, times)
    d = traj.derivative("0.3", q)[0].value
    assert abs(d - math.factorial(q)) <= 1e-50 * math.factorial(q) * 10 ** 4


def test_derivative_beyond_degree(ctx32):
    traj = poly_trajectory(ctx32, 2, lambda t: t * t, [mpfr(0), mpfr(1)])
    with pytest.raises(CapabilityError):
        traj.derivative("0.5", 3)
    assert traj.derivative("0.5", 3, allow_zero=True).raw == [0]


def test_derivative_one_sided_flag(ctx32):
    times = [mpfr(0), ctx32.raw("0.5"), mpfr(1)]
    traj = poly_trajectory(ctx32, 2, lambda t: t * t, times)
    _, flag = traj.derivative("0.5", 1, return_flag=True)
    assert flag
    _, flag = traj.derivative("0.25", 1, return_flag=True)
    assert not flag


def test_evaluate_outside_span(ctx32):
    traj = poly_trajectory(ctx32, 1, lambda t: t, [mpfr(0), mpfr(1)])
    with pytest.raises(DomainError):
        traj.evaluate("1.5")


def test_continuity_bit_exact_at_nodes(ctx32):
    traj = integrate(lorenz_system(ctx32), [1, 0, 0], 1, SolverConfig(3, "0.05", ctx32))
    for i in range(1, traj.M):
        assert traj.nodes[i][0] == traj.nodes[i - 1][-1]
        assert traj.evaluate(traj.times[i]).raw == traj.nodes[i][0]


def test_window(ctx32):
    traj = integrate(linear_system(ctx32, [[-1]]), [1], 1, SolverConfig(2, "0.1", ctx32))
    w = traj.window(ctx32.raw("0.25"), ctx32.raw("0.55"))
    assert w.M == 4
    assert w.evaluate("0.4").raw == traj.evaluate("0.4").raw


def test_divergence_identical_never(ctx32):
    traj = integrate(linear_system(ctx32, [[-1]]), [1], 2, SolverConfig(2, "0.1", ctx32))
    rep = divergence_time(traj, traj, "1e-30")
    assert rep.never and rep.max_gap_before == 0


def test_divergence_constant_offset_at_start(ctx32):
    a = poly_trajectory(ctx32, 1, lambda t: t * 0 + 1, [mpfr(0), mpfr(3)])
    b = poly_trajectory(ctx32, 1, lambda t: t * 0 + 2, [mpfr(0), mpfr(3)])
    rep = divergence_time(a, b, "0.5")
    assert rep.t_div == 0


def test_divergence_crossing_is_refined(ctx32):
    # gap = t^2 crosses 2 at sqrt(2)
    a = poly_trajectory(ctx32, 2, lambda t: t * t, [mpfr(0), mpfr(3)])
    b = poly_trajectory(ctx32, 2, lambda t: t * 0, [mpfr(0), mpfr(3)])
    rep = divergence_time(a, b, "2")
    assert abs(float(rep.t_div) - math.sqrt(2)) <= 0.25 / 2 ** 20
    assert float(rep.t_div) >= math.sqrt(2)
    assert float(rep.max_gap_before) == pytest.approx(1.25 ** 2)


@settings(max_examples=30, deadline=None)
@given(t1=st.integers(1, 8), t2=st.integers(1, 8))
def test_divergence_monotone_in_tol(t1, t2):
    ctx = make_context(20)
    a = poly_trajectory(ctx, 3, lambda t: t ** 3 / 4, [mpfr(0), mpfr(1), mpfr(3)])
    b = poly_trajectory(ctx, 3, lambda t: -t / 5, [mpfr(0), mpfr(1), mpfr(3)])
    lo, hi = sorted((t1, t2))
    r_lo = divergence_time(a, b, str(lo))
    r_hi = divergence_time(a, b, str(hi))
    if r_lo.never:
        assert r_hi.never
    elif not r_hi.never:
        assert r_hi.t_div >= r_lo.t_div


def test_divergence_no_overlap(ctx32):
    a = poly_trajectory(ctx32, 1, lambda t: t, [mpfr(0), mpfr(1)])
    b = poly_trajectory(ctx32, 1, lambda t: t, [mpfr(2), mpfr(3)])
    with pytest.raises(DomainError):
        divergence_time(a, b, "1")


@pytest.mark.parametrize("d", [16, 50])
def test_save_load_roundtrip_lossless(tmp_path, d):
    ctx = make_context(d)
    traj = integrate(lorenz_system(ctx), [1, 0, 0], "0.3", SolverConfig(3, "0.1", ctx))
    p = tmp_path / "t.txt"
    save(traj, p, config={"note": "x"})
    back = load(p)
    assert back.nodes == traj.nodes
    assert back.times == traj.times
    assert back.q == 3 and back.ctx == ctx
    assert back.config == {"note": "x"}
    assert back.problem["name"] == "lorenz"


def test_save_load_explicit_partition(tmp_path, ctx32):
    times = [mpfr(0), ctx32.raw("0.3"), ctx32.raw("1.1")]
    traj = poly_trajectory(ctx32, 2, lambda t: t * t, times)
    save(traj, tmp_path / "e.txt")
    back = load(tmp_path / "e.txt")
    assert back.times == times and back.nodes == traj.nodes


def test_load_truncated(tmp_path, ctx32):
    traj = integrate(linear_system(ctx32, [[-1]]), [1], 1, SolverConfig(2, "0.1", ctx32))
    p = tmp_path / "t.txt"
    save(traj, p)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(TruncatedFileError):
        load(p)


def test_load_precision_mismatch(tmp_path, ctx32):
    traj = integrate(linear_system(ctx32, [[-1]]), [1], 1, SolverConfig(1, "0.5", ctx32))
    save(traj, tmp_path / "t.txt")
    with pytest.raises(PrecisionMismatchError):
        load(tmp_path / "t.txt", make_context(16))


def test_load_wrong_version(tmp_path, ctx32):
    traj = integrate(linear_system(ctx32, [[-1]]), [1], 1, SolverConfig(1, "0.5", ctx32))
    p = tmp_path / "t.txt"
    save(traj, p)
    p.write_text(p.read_text().replace("version = 1", "version = 9"))
    with pytest.raises(FormatVersionError):
        read_header(p)


def test_load_not_a_trajectory(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(TrajectoryFormatError):
        load(p)
