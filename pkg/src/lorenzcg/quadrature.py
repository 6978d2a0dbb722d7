"""Gauss rules and Lagrange nodal bases on the reference interval [0, 1].

Nodes are recomputed for every precision and memoized by
``(family, n, context)``; ``functools.lru_cache`` is safe under concurrent
lookup/insert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import ConvergenceError
from .precision import Matrix, PrecisionContext, Vector, make_context

__all__ = [
    "MAX_POINTS",
    "QuadratureRule",
    "NodalBasis",
    "gauss_legendre",
    "gauss_lobatto",
    "nodal_basis",
    "lagrange_eval",
    "differentiation_matrix",
    "interpolation_matrix",
]

#: Largest supported number of points per rule.
MAX_POINTS = 400

_EXTRA_BITS = 24
_MAX_NEWTON = 100


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on [0, 1]: ``sum(w_i * f(x_i))`` approximates the integral of ``f``."""

    family: str
    points: tuple
    weights: tuple
    exactness_degree: int
    ctx: PrecisionContext

    def __len__(self):
        return len(self.points)

    def integrate(self, values: Sequence[mpfr]) -> mpfr:
        with self.ctx.local():
            return gmpy2.fsum([w * v for w, v in zip(self.weights, values)])


def _legendre(n: int, x: mpfr) -> tuple[mpfr, mpfr]:
    """Return ``(P_n(x), P_{n-1}(x))`` by the three-term recurrence."""
    p0, p1 = mpfr(1), x
    if n == 0:
        return p0, mpfr(0)
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    return p1, p0


def _legendre_dp(n: int, x: mpfr) -> tuple[mpfr, mpfr, mpfr]:
    """``P_n``, ``P_n'`` and ``P_n''`` at an interior point ``x``."""
    p, pm1 = _legendre(n, x)
    one_m_x2 = 1 - x * x
    dp = n * (pm1 - x * p) / one_m_x2
    d2p = (2 * x * dp - n * (n + 1) * p) / one_m_x2
    return p, dp, d2p


def _newton_root(fn, x0: float, bits: int, index: int, family: str) -> mpfr:
    x = mpfr(x0)
    tol = mpfr(2) ** (8 - bits)
    for _ in range(_MAX_NEWTON):
        f, df = fn(x)
        dx = f / df
        x -= dx
        if abs(dx) <= tol * max(abs(x), mpfr(1)):
            # one extra sweep pins the last bits
            f, df = fn(x)
            return x - f / df
    raise ConvergenceError(f"{family}: Newton failed for root index {index}")


def _check_n(n: int, lo: int) -> None:
    if not isinstance(n, int) or n < lo or n > MAX_POINTS:
        raise ValueError(f"number of points must be an int in [{lo}, {MAX_POINTS}], got {n!r}")


@lru_cache(maxsize=None)
def gauss_legendre(n: int, ctx: PrecisionContext) -> QuadratureRule:
    """``n``-point Gauss-Legendre rule on [0, 1], exact up to degree ``2n-1``.

    Roots of ``P_n`` are found by Newton's method from the usual cosine
    guesses, in a slightly wider precision, then rounded to ``ctx``.
    """
    _check_n(n, 1)
    bits = ctx.bits + _EXTRA_BITS
    half = []
    with gmpy2.context(precision=bits):
        for i in range(n // 2):
            guess = -math.cos(math.pi * (i + 0.75) / (n + 0.5))

            def fn(x):
                p, dp, _ = _legendre_dp(n, x)
                return p, dp

            x = _newton_root(fn, guess, bits, i, "gauss_legendre")
            _, dp, _ = _legendre_dp(n, x)
            w = 2 / ((1 - x * x) * dp * dp)
            half.append((x, w))
        if n % 2:
            _, pm1 = _legendre(n, mpfr(0))
            # P_n'(0) = n P_{n-1}(0)
            w0 = 2 / (n * pm1) ** 2
        pts, wts = [], []
        for x, w in half:
            pts.append(x)
            wts.append(w)
        mid = [(mpfr(0), w0)] if n % 2 else []
        left = list(zip(pts, wts))
        full = left + mid + [(-x, w) for x, w in reversed(left)]
    with ctx.local():
        points = tuple((1 + x) / 2 for x, _ in full)
        weights = tuple(w / 2 for _, w in full)
    return QuadratureRule("gauss_legendre", points, weights, 2 * n - 1, ctx)


@lru_cache(maxsize=None)
def gauss_lobatto(n: int, ctx: PrecisionContext) -> QuadratureRule:
    """``n``-point Gauss-Lobatto rule on [0, 1] (endpoints included), exact up to ``2n-3``."""
    _check_n(n, 2)
    m = n - 1
    bits = ctx.bits + _EXTRA_BITS
    interior = []
    with gmpy2.context(precision=bits):
        for i in range(1, (n - 2) // 2 + 1):
            guess = -math.cos(math.pi * i / m)

            def fn(x):
                _, dp, d2p = _legendre_dp(m, x)
                return dp, d2p

            x = _newton_root(fn, guess, bits, i, "gauss_lobatto")
            p, _ = _legendre(m, x)
            interior.append((x, 2 / (n * m * p * p)))
        wend = mpfr(2) / (n * m)
        mid = []
        if n % 2:
            p0, _ = _legendre(m, mpfr(0))
            mid = [(mpfr(0), 2 / (n * m * p0 * p0))]
        full = [(mpfr(-1), wend)] + interior + mid + [(-x, w) for x, w in reversed(interior)] + [(mpfr(1), wend)]
    with ctx.local():
        points = tuple((1 + x) / 2 for x, _ in full)
        weights = tuple(w / 2 for _, w in full)
    return QuadratureRule("gauss_lobatto", points, weights, 2 * n - 3, ctx)


@dataclass(frozen=True)
class NodalBasis:
    """Lagrange cardinal basis through ``nodes`` (degree ``len(nodes)-1``)."""

    nodes: tuple
    bary_weights: tuple
    dmat: tuple
    ctx: PrecisionContext

    @property
    def degree(self) -> int:
        return len(self.nodes) - 1

    @property
    def differentiation_matrix(self) -> Matrix:
        return Matrix(self.dmat, self.ctx)


def _barycentric_weights(nodes: Sequence[mpfr]) -> list[mpfr]:
    w = []
    for j, xj in enumerate(nodes):
        prod = mpfr(1)
        for k, xk in enumerate(nodes):
            if k != j:
                prod *= xj - xk
        w.append(1 / prod)
    return w


def _dmat(nodes: Sequence[mpfr], w: Sequence[mpfr]) -> list[list[mpfr]]:
    n = len(nodes)
    D = [[mpfr(0)] * n for _ in range(n)]
    for i in range(n):
        off = []
        for j in range(n):
            if i != j:
                D[i][j] = (w[j] / w[i]) / (nodes[i] - nodes[j])
                off.append(D[i][j])
        # negative-sum trick: rows annihilate constants exactly
        D[i][i] = -gmpy2.fsum(off)
    return D


def _make_basis(nodes: Sequence[mpfr], ctx: PrecisionContext) -> NodalBasis:
    if len(set(nodes)) != len(nodes):
        raise ValueError("basis nodes must be distinct")
    with ctx.local():
        nodes = tuple(+x for x in nodes)
        w = _barycentric_weights(nodes)
        D = _dmat(nodes, w)
    return NodalBasis(nodes, tuple(w), tuple(tuple(r) for r in D), ctx)


@lru_cache(maxsize=None)
def _lobatto_basis(q: int, ctx: PrecisionContext) -> NodalBasis:
    return _make_basis(gauss_lobatto(q + 1, ctx).points, ctx)


def nodal_basis(nodes_or_q, ctx: PrecisionContext) -> NodalBasis:
    """Basis on explicit ``nodes`` or, for an int ``q``, on ``q+1`` Lobatto nodes."""
    if isinstance(nodes_or_q, int):
        if nodes_or_q < 1:
            raise ValueError("degree must be >= 1")
        return _lobatto_basis(nodes_or_q, ctx)
    return _make_basis([ctx.raw(x) for x in nodes_or_q], ctx)


def _eval_raw(basis: NodalBasis, values: Sequence[Sequence[mpfr]], t: mpfr) -> list[mpfr]:
    """Barycentric second-form evaluation; gmpy2 context must be active."""
    nodes = basis.nodes
    for j, x in enumerate(nodes):
        if t == x:
            return list(values[j])
    lam = [w / (t - x) for w, x in zip(basis.bary_weights, nodes)]
    denom = gmpy2.fsum(lam)
    ncomp = len(values[0])
    return [gmpy2.fsum([l * v[c] for l, v in zip(lam, values)]) / denom for c in range(ncomp)]


def lagrange_eval(basis: NodalBasis, values, t) -> Vector:
    """Evaluate the interpolant through ``(node_j, values[j])`` at ``t`` in [0, 1].

    ``values[j]`` is the (vector) value at node ``j``; a node ``t`` returns the
    stored value exactly.
    """
    ctx = basis.ctx
    tt = ctx.raw(t)
    if tt < 0 or tt > 1:
        raise ValueError("t must lie in [0, 1]")
    rows = [_as_raw_row(v, ctx) for v in values]
    with ctx.local():
        return Vector(_eval_raw(basis, rows, tt), ctx)


def _as_raw_row(v, ctx):
    if isinstance(v, Vector):
        ctx.check(v)
        return v.raw
    if isinstance(v, (list, tuple)):
        return [ctx.raw(x) for x in v]
    return [ctx.raw(v)]


def differentiation_matrix(basis: NodalBasis) -> Matrix:
    """``D[i][j]`` is the derivative of cardinal function ``j`` at node ``i``."""
    return basis.differentiation_matrix


def interpolation_matrix(basis: NodalBasis, targets: Sequence[mpfr]) -> list[list[mpfr]]:
    """Rows ``E[i][j] = l_j(targets[i])``; gmpy2 context must be active."""
    E = []
    n = len(basis.nodes)
    for t in targets:
        hit = [j for j, x in enumerate(basis.nodes) if x == t]
        if hit:
            E.append([mpfr(int(j == hit[0])) for j in range(n)])
            continue
        lam = [w / (t - x) for w, x in zip(basis.bary_weights, basis.nodes)]
        s = gmpy2.fsum(lam)
        E.append([l / s for l in lam])
    return E


def derivative_matrix_at(basis: NodalBasis, targets: Sequence[mpfr]) -> list[list[mpfr]]:
    """Rows ``G[i][j] = l_j'(targets[i])``; gmpy2 context must be active."""
    E = interpolation_matrix(basis, targets)
    D = basis.dmat
    n = len(basis.nodes)
    # l_j' is interpolated exactly by its nodal values D[:, j]
    return [[gmpy2.fsum([E[i][m] * D[m][j] for m in range(n)]) for j in range(n)] for i in range(len(targets))]


def table(family: str, n: int, digits: int) -> QuadratureRule:
    ctx = make_context(digits)
    if family in ("legendre", "gauss_legendre"):
        return gauss_legendre(n, ctx)
    if family in ("lobatto", "gauss_lobatto"):
        return gauss_lobatto(n, ctx)
    raise ValueError(f"unknown quadrature family {family!r}")
