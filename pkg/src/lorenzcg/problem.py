"""ODE problem definitions: Lorenz, its dual, and small test systems.

An :class:`ODESystem` carries raw callables that take and return lists of
``mpfr`` and must be called with the system's gmpy2 context active (the
stepper does this).  The public ``lorenz_*`` functions wrap them for
:class:`~lorenzcg.precision.Vector` arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigError
from .precision import (
    BigScalar,
    Matrix,
    PrecisionContext,
    Vector,
    format_raw,
    spectral_norm,
)

__all__ = [
    "LorenzParams",
    "ODESystem",
    "lorenz_system",
    "lorenz_rhs",
    "lorenz_jacobian",
    "dual_rhs",
    "averaged_state",
    "lipschitz_estimate",
    "fixed_points",
    "linear_system",
    "forced_system",
    "make_problem",
    "time_reversed_adjoint",
]

RawVec = list
RawMat = list


@dataclass(frozen=True)
class LorenzParams:
    sigma: BigScalar
    b: BigScalar
    r: BigScalar

    @classmethod
    def default(cls, ctx: PrecisionContext) -> "LorenzParams":
        """sigma = 10, b = 8/3 (computed by division), r = 28."""
        return cls(ctx.scalar(10), ctx.scalar(8) / 3, ctx.scalar(28))

    @classmethod
    def from_strings(cls, ctx: PrecisionContext, sigma=None, b=None, r=None) -> "LorenzParams":
        d = cls.default(ctx)
        return cls(
            ctx.scalar(sigma) if sigma is not None else d.sigma,
            ctx.scalar(b) if b is not None else d.b,
            ctx.scalar(r) if r is not None else d.r,
        )

    @property
    def ctx(self) -> PrecisionContext:
        return self.sigma.ctx

    def as_dict(self) -> dict[str, str]:
        n = self.ctx.repr_digits
        return {k: format_raw(getattr(self, k).value, n) for k in ("sigma", "b", "r")}


@dataclass
class ODESystem:
    """``u' = f(u, t)`` with an exact Jacobian.

    ``jacobian_directional(u, du, t)``, when given, returns the derivative of
    the Jacobian along ``du``; it must not depend on ``u`` (quadratic
    right-hand sides), which is what the dual derivative recurrence assumes.
    """

    name: str
    dimension: int
    rhs: Callable[[RawVec, mpfr], RawVec]
    jacobian: Callable[[RawVec, mpfr], RawMat]
    ctx: PrecisionContext
    params: dict = field(default_factory=dict)
    jacobian_directional: Optional[Callable[[RawVec, mpfr], RawMat]] = None
    linear: bool = False

    def f(self, u: Vector, t=0) -> Vector:
        self.ctx.check(u)
        with self.ctx.local():
            return Vector(self.rhs(u.raw, self.ctx.raw(t)), self.ctx)

    def J(self, u: Vector, t=0) -> Matrix:
        self.ctx.check(u)
        with self.ctx.local():
            return Matrix(self.jacobian(u.raw, self.ctx.raw(t)), self.ctx)


# -- Lorenz ------------------------------------------------------------------

def _lorenz_raw(params: LorenzParams):
    s, b, r = params.sigma.value, params.b.value, params.r.value
    zero = mpfr(0)

    def rhs(u, t=None):
        x, y, z = u
        return [s * (y - x), r * x - y - x * z, x * y - b * z]

    def jac(u, t=None):
        x, y, z = u
        return [[-s, s, zero], [r - z, mpfr(-1), -x], [y, x, -b]]

    def jac_dir(du, t=None):
        dx, dy, dz = du
        return [[zero, zero, zero], [-dz, zero, -dx], [dy, dx, zero]]

    return rhs, jac, jac_dir


def lorenz_system(ctx: PrecisionContext, params: LorenzParams | None = None) -> ODESystem:
    params = params or LorenzParams.default(ctx)
    ctx.check(params.sigma)
    rhs, jac, jac_dir = _lorenz_raw(params)
    return ODESystem(
        name="lorenz",
        dimension=3,
        rhs=rhs,
        jacobian=jac,
        ctx=ctx,
        params=params.as_dict(),
        jacobian_directional=jac_dir,
    )


def _params_for(state: Vector, params: LorenzParams | None) -> LorenzParams:
    if params is None:
        return LorenzParams.default(state.ctx)
    state.ctx.check(params.sigma)
    return params


def lorenz_rhs(state: Vector, params: LorenzParams | None = None) -> Vector:
    """``(sigma(y-x), rx - y - xz, xy - bz)``."""
    p = _params_for(state, params)
    rhs, _, _ = _lorenz_raw(p)
    with state.ctx.local():
        return Vector(rhs(state.raw), state.ctx)


def lorenz_jacobian(state: Vector, params: LorenzParams | None = None) -> Matrix:
    p = _params_for(state, params)
    _, jac, _ = _lorenz_raw(p)
    with state.ctx.local():
        return Matrix(jac(state.raw), state.ctx)


def dual_rhs(z: Vector, ubar: Vector, params: LorenzParams | None = None) -> Vector:
    """Time derivative of the Lorenz dual, ``z' = -J(ubar)^T z``.

    Componentwise ``(sigma*xi - (r - zb)*eta - yb*zeta, -sigma*xi + eta - xb*zeta,
    xb*eta + b*zeta)`` for ``z = (xi, eta, zeta)``, ``ubar = (xb, yb, zb)``.
    """
    z.ctx.check(ubar)
    p = _params_for(z, params)
    s, b, r = p.sigma.value, p.b.value, p.r.value
    xi, eta, zeta = z.raw
    xb, yb, zb = ubar.raw
    with z.ctx.local():
        return Vector(
            [s * xi - (r - zb) * eta - yb * zeta, -s * xi + eta - xb * zeta, xb * eta + b * zeta],
            z.ctx,
        )


def averaged_state(U_t: Vector, u_t: Vector) -> Vector:
    """Midpoint ``(U + u) / 2``; for quadratic f the averaged Jacobian is J at this point."""
    U_t.ctx.check(u_t)
    with U_t.ctx.local():
        return Vector([(a + b) / 2 for a, b in zip(U_t.raw, u_t.raw)], U_t.ctx)


def fixed_points(params: LorenzParams) -> list[Vector]:
    """Origin and ``P+- = (+-sqrt(b(r-1)), +-sqrt(b(r-1)), r-1)``."""
    ctx = params.ctx
    c = (params.b * (params.r - 1)).sqrt()
    rm1 = params.r - 1
    zero = ctx.zero()
    return [
        ctx.vector([zero, zero, zero]),
        ctx.vector([c, c, rm1]),
        ctx.vector([-c, -c, rm1]),
    ]


DEFAULT_LIPSCHITZ_DT = "0.01"


def lipschitz_estimate(traj, sample_dt=None, system: ODESystem | None = None) -> BigScalar:
    """Max spectral norm of the Jacobian sampled along ``traj`` every ``sample_dt``.

    Samples ``t0, t0 + dt, ...`` up to the end of the trajectory; a step larger
    than the span gives the single value at ``t0``.
    """
    ctx = traj.ctx
    system = system or make_problem(traj.problem.get("name", "lorenz"), ctx, traj.problem.get("params"))
    dt = ctx.raw(sample_dt if sample_dt is not None else DEFAULT_LIPSCHITZ_DT)
    if dt <= 0:
        raise ValueError("sample_dt must be positive")
    t0, t1 = traj.t_start, traj.t_end
    best = None
    n = 0
    while True:
        with ctx.local():
            t = t0 + n * dt
        if t > t1:
            break
        with ctx.local():
            u = traj.eval_raw(t)
            J = Matrix(system.jacobian(u, t), ctx)
        s = spectral_norm(J)
        if best is None or s > best:
            best = s
        n += 1
    return best


# -- generic test systems -----------------------------------------------------

def linear_system(ctx: PrecisionContext, A: Sequence[Sequence], name: str = "linear") -> ODESystem:
    """Constant-coefficient ``u' = A u``."""
    Araw = [[ctx.raw(a) for a in row] for row in A]
    n = len(Araw)

    def rhs(u, t=None):
        return [gmpy2.fsum([a * x for a, x in zip(row, u)]) for row in Araw]

    def jac(u, t=None):
        return [list(r) for r in Araw]

    def jac_dir(du, t=None):
        return [[mpfr(0)] * n for _ in range(n)]

    return ODESystem(name, n, rhs, jac, ctx, {"A": [[format_raw(a, ctx.repr_digits) for a in r] for r in Araw]},
                     jacobian_directional=jac_dir, linear=True)


def forced_system(ctx: PrecisionContext, coeffs: Sequence, name: str = "forced") -> ODESystem:
    """Scalar ``u' = p(t)`` with ``p(t) = sum(coeffs[i] * t**i)``."""
    c = [ctx.raw(a) for a in coeffs]

    def rhs(u, t):
        acc = mpfr(0)
        for a in reversed(c):
            acc = acc * t + a
        return [acc]

    def jac(u, t=None):
        return [[mpfr(0)]]

    return ODESystem(name, 1, rhs, jac, ctx, {"coeffs": [format_raw(a, ctx.repr_digits) for a in c]},
                     jacobian_directional=lambda du, t=None: [[mpfr(0)]], linear=True)


def make_problem(name: str, ctx: PrecisionContext, params: dict | None = None) -> ODESystem:
    """Problem registry used by the CLI and by trajectory metadata."""
    params = dict(params or {})
    if name == "lorenz":
        unknown = set(params) - {"sigma", "b", "r"}
        if unknown:
            raise ConfigError(f"unknown lorenz parameters {sorted(unknown)}")
        return lorenz_system(ctx, LorenzParams.from_strings(ctx, **params))
    if name == "linear":
        return linear_system(ctx, params["A"])
    if name == "forced":
        return forced_system(ctx, params["coeffs"])
    raise ConfigError(f"unknown problem {name!r}")


def time_reversed_adjoint(system: ODESystem, primal, T) -> ODESystem:
    """Dual of ``system`` along ``primal`` in reversed time ``s = T - t``.

    ``dz/ds = J(ubar(T - s))^T z`` with ``ubar`` the primal trajectory.
    """
    ctx = system.ctx
    ctx.check(primal)
    TT = ctx.raw(T)
    jac = system.jacobian
    ev = primal.eval_raw

    memo: dict = {}

    def jt(s):
        # rhs and jacobian hit the same stage times within a step
        hit = memo.get(s)
        if hit is None:
            if len(memo) > 64:
                memo.clear()
            t = TT - s
            J = jac(ev(t), t)
            hit = memo[s] = [list(col) for col in zip(*J)]
        return hit

    def rhs(z, s):
        return [gmpy2.fsum([a * b for a, b in zip(row, z)]) for row in jt(s)]

    def jacobian(z, s):
        return jt(s)

    return ODESystem(f"{system.name}-dual", system.dimension, rhs, jacobian, ctx,
                     {"primal": system.name}, linear=True)
