"""Dual (adjoint) solves along a primal trajectory and stability factors.

The dual ``-z' = A(t)^T z, z(T) = z_T`` with ``A(t) = J(U(t))`` is solved
forward in ``s = T - t`` by the same cG stepper.  Stability factors:

    S_D  = |z(0)|
    S_G  = int_0^T |z^(p+1)| dt
    S_C  = int_0^T |pi z| dt
    S_C2 = (int_0^T |pi z|^2 dt)^(1/2)

with the Euclidean norm, ``pi`` the identity unless a projection is given,
and the error-bound constants ``C_p = C_p' = 1``.
"""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import CapabilityError, ConfigError, LorenzCGError
from .galerkin import SolverConfig, integrate
from .precision import BigScalar, Vector, format_raw
from .problem import ODESystem, make_problem, time_reversed_adjoint
from .quadrature import gauss_legendre
from .trajectory import Trajectory

__all__ = [
    "DualConfig",
    "DualSolution",
    "StabilityFactors",
    "ErrorBounds",
    "GrowthPoint",
    "solve_dual",
    "stability_factors",
    "growth_series",
    "error_bounds",
    "BOUND_CONSTANTS",
]

#: Convention for the unspecified constants C_p and C_p'.
BOUND_CONSTANTS = {"C_p": 1, "C_p_prime": 1}


@dataclass
class DualConfig:
    """Terminal direction and discretization of a dual solve.

    ``dual_q`` defaults to ``max(3, q // 2)`` of the primal, ``dual_dt`` to the
    primal step and ``T`` to the end of the primal trajectory.
    """

    z_T: Sequence = (1, 0, 0)
    dual_q: Optional[int] = None
    dual_dt: object = None
    T: object = None


@dataclass
class DualSolution:
    """Dual trajectory stored in reversed time ``s = T - t``."""

    trajectory: Trajectory
    T: mpfr
    primal: Trajectory
    system: ODESystem
    k_min: mpfr

    @property
    def ctx(self):
        return self.trajectory.ctx

    def z_raw(self, t: mpfr) -> list[mpfr]:
        return self.trajectory.eval_raw(self.T - t)

    def z(self, t) -> Vector:
        tt = self.ctx.raw(t)
        with self.ctx.local():
            return Vector(self.z_raw(tt), self.ctx)


def _primal_dt(primal: Trajectory) -> mpfr:
    if primal.partition and primal.partition[0] == "uniform":
        return primal.partition[2]
    with primal.ctx.local():
        return primal.times[1] - primal.times[0]


def _system_for(primal: Trajectory, system: Optional[ODESystem]) -> ODESystem:
    if system is not None:
        return system
    return make_problem(primal.problem.get("name", "lorenz"), primal.ctx, primal.problem.get("params"))


def solve_dual(primal: Trajectory, cfg: DualConfig | None = None, system: Optional[ODESystem] = None) -> DualSolution:
    """Solve the dual backward from ``T`` along ``primal``."""
    cfg = cfg or DualConfig()
    ctx = primal.ctx
    system = _system_for(primal, system)
    T = ctx.raw(cfg.T) if cfg.T is not None else primal.t_end
    if T <= primal.t_start or T > primal.t_end:
        raise ConfigError(f"dual end time {float(T):g} outside primal span")
    zT = [ctx.raw(v) for v in (cfg.z_T.raw if isinstance(cfg.z_T, Vector) else cfg.z_T)]
    if len(zT) != system.dimension:
        raise ConfigError("z_T has the wrong dimension")
    dual_q = cfg.dual_q or max(3, primal.q // 2)
    dt = ctx.raw(cfg.dual_dt) if cfg.dual_dt is not None else _primal_dt(primal)
    adj = time_reversed_adjoint(system, primal, T)
    with ctx.local():
        span = T - primal.t_start
    traj = integrate(adj, zT, span, SolverConfig(dual_q, BigScalar(dt, ctx), ctx))
    return DualSolution(traj, T, primal, system, _primal_dt(primal))


@dataclass
class StabilityFactors:
    S_D: BigScalar
    S_G: BigScalar
    S_C: BigScalar
    S_C2: BigScalar
    T: BigScalar
    p: int
    z_T: list
    k_min: Optional[BigScalar] = None
    conventions: dict = field(default_factory=lambda: dict(BOUND_CONSTANTS, projection="identity"))

    def as_row(self, ndigits: int = 6) -> dict[str, str]:
        """Mantissa/exponent strings, e.g. ``{"S_C": "2.08000e+388", ...}``."""
        row = {"T": format_raw(self.T.value, ndigits)}
        for name in ("S_D", "S_G", "S_C", "S_C2"):
            m, e = getattr(self, name).mantissa_exponent(ndigits)
            row[name] = f"{m}e{e:+d}"
        return row


def _matT_vec(J, z):
    n = len(z)
    return [gmpy2.fsum([J[r][c] * z[r] for r in range(n)]) for c in range(n)]


def _dual_derivatives(sol: DualSolution, t: mpfr, z: list[mpfr], order: int) -> list[mpfr]:
    """``d^order z / dt^order`` at ``t`` from ``z' = -A^T z`` and its derivatives."""
    system, primal = sol.system, sol.primal
    u = primal.eval_raw(t)
    A = system.jacobian(u, t)
    zd = [-v for v in _matT_vec(A, z)]
    if order == 1:
        return zd
    if system.jacobian_directional is None:
        raise CapabilityError("higher dual derivatives need jacobian_directional")
    ud, _ = primal.derivative_raw(t, 1)
    Ad = system.jacobian_directional(ud, t)
    zdd = [-(a + b) for a, b in zip(_matT_vec(Ad, z), _matT_vec(A, zd))]
    if order == 2:
        return zdd
    if primal.q >= 2:
        udd, _ = primal.derivative_raw(t, 2)
    else:
        J = system.jacobian(u, t)
        f = system.rhs(u, t)
        udd = [gmpy2.fsum([a * b for a, b in zip(row, f)]) for row in J]
    Add = system.jacobian_directional(udd, t)
    return [
        -(a + 2 * b + c)
        for a, b, c in zip(_matT_vec(Add, z), _matT_vec(Ad, zd), _matT_vec(A, zdd))
    ]


def stability_factors(
    dual: DualSolution,
    p: int = 0,
    npoints: Optional[int] = None,
    projection: Optional[Callable[[list], list]] = None,
) -> StabilityFactors:
    """Evaluate S_D, S_G, S_C, S_C2 by composite Gauss quadrature over the dual intervals.

    ``z^(p+1)`` comes from the dual ODE recurrence for ``p + 1 <= 3`` and from
    the dual polynomial otherwise (needs ``dual_q >= p + 1``).
    """
    if p < 0:
        raise ValueError("p must be >= 0")
    tr = dual.trajectory
    ctx = tr.ctx
    if p + 1 > 3 and p + 1 > tr.q:
        raise CapabilityError(f"z^({p + 1}) needs dual degree >= {p + 1}, have {tr.q}")
    rule = gauss_legendre(npoints or tr.q + 2, ctx)
    proj = projection or (lambda v: v)
    sg, sc, sc2 = [], [], []
    with ctx.local():
        T = dual.T
        for n in range(tr.M):
            a, b = tr.times[n], tr.times[n + 1]
            k = b - a
            for x, w in zip(rule.points, rule.weights):
                s = a + x * k
                t = T - s
                z = tr.eval_raw(s)
                if p + 1 <= 3:
                    dz = _dual_derivatives(dual, t, z, p + 1)
                else:
                    dz, _ = tr.derivative_raw(s, p + 1)
                pz = proj(z)
                nz2 = gmpy2.fsum([v * v for v in pz])
                kw = k * w
                sg.append(kw * gmpy2.sqrt(gmpy2.fsum([v * v for v in dz])))
                sc.append(kw * gmpy2.sqrt(nz2))
                sc2.append(kw * nz2)
        z0 = tr.nodes[-1][-1]
        S_D = gmpy2.sqrt(gmpy2.fsum([v * v for v in z0]))
        S_G = gmpy2.fsum(sg)
        S_C = gmpy2.fsum(sc)
        S_C2 = gmpy2.sqrt(gmpy2.fsum(sc2))
    zT = tr.nodes[0][0]
    big = lambda v: BigScalar(v, ctx)  # noqa: E731
    return StabilityFactors(
        big(S_D), big(S_G), big(S_C), big(S_C2), big(T), p,
        [format_raw(v, ctx.repr_digits) for v in zT], big(dual.k_min),
    )


@dataclass
class GrowthPoint:
    T: BigScalar
    factors: Optional[StabilityFactors]
    error: Optional[str] = None


def _growth_one(primal: Trajectory, T, cfg: DualConfig, p: int, system) -> GrowthPoint:
    ctx = primal.ctx
    c = DualConfig(cfg.z_T, cfg.dual_q, cfg.dual_dt, T)
    try:
        return GrowthPoint(ctx.scalar(T), stability_factors(solve_dual(primal, c, system), p))
    except LorenzCGError as exc:
        return GrowthPoint(ctx.scalar(T), None, f"{type(exc).__name__}: {exc}")


def _growth_worker(path: str, T: str, cfg: DualConfig, p: int):
    from .trajectory import load

    primal = load(path)
    gp = _growth_one(primal, T, cfg, p, None)
    # results travel back as strings; contexts do not pickle
    if gp.factors is None:
        return T, None, gp.error
    f = gp.factors
    n = primal.ctx.repr_digits
    return T, {k: format_raw(getattr(f, k).value, n) for k in ("S_D", "S_G", "S_C", "S_C2")}, None


def growth_series(
    primal: Trajectory,
    T_list: Sequence,
    cfg: DualConfig | None = None,
    p: int = 0,
    system: Optional[ODESystem] = None,
    workers: int = 1,
) -> list[GrowthPoint]:
    """One independent dual solve on ``[0, T]`` per entry of ``T_list``.

    Failures are recorded on the point and the series continues.  With
    ``workers > 1`` the solves fan out over a process pool; results keep the
    order of ``T_list``.
    """
    cfg = cfg or DualConfig()
    ctx = primal.ctx
    if workers <= 1:
        return [_growth_one(primal, T, cfg, p, system) for T in T_list]
    from .trajectory import save

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "primal.traj")
        save(primal, path)
        Ts = [T if isinstance(T, str) else format_raw(ctx.raw(T), ctx.repr_digits) for T in T_list]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_growth_worker, [path] * len(Ts), Ts, [cfg] * len(Ts), [p] * len(Ts)))
    out = []
    for T, vals, err in raw:
        if vals is None:
            out.append(GrowthPoint(ctx.scalar(T), None, err))
            continue
        sc = {k: ctx.scalar(v) for k, v in vals.items()}
        zT = [format_raw(ctx.raw(v), ctx.repr_digits) for v in cfg.z_T]
        out.append(GrowthPoint(ctx.scalar(T), StabilityFactors(
            sc["S_D"], sc["S_G"], sc["S_C"], sc["S_C2"], ctx.scalar(T), p, zT,
            BigScalar(_primal_dt(primal), ctx))))
    return out


@dataclass
class ErrorBounds:
    E_D_bound: BigScalar
    E_G_bound: BigScalar
    E_C_bound: BigScalar
    E_C_rms_bound: BigScalar
    inputs: dict
    conventions: dict = field(default_factory=lambda: dict(BOUND_CONSTANTS))


def error_bounds(
    factors: StabilityFactors,
    data_err,
    disc_terms,
    comp_terms,
    eps=None,
    k_min=None,
) -> ErrorBounds:
    """Literal bound products with ``C_p = C_p' = 1``.

    ``disc_terms`` is ``max k^(p+1) (|[U]|/k + |R|)``, ``comp_terms`` is
    ``max |k^-1 Rbar|``; the RMS bound is ``S_C2 * eps / sqrt(k_min)``.
    ``eps`` defaults to the context epsilon and ``k_min`` to the primal step.
    """
    ctx = factors.S_D.ctx
    vals = {"data_err": data_err, "disc_terms": disc_terms, "comp_terms": comp_terms}
    vals = {k: ctx.scalar(v) for k, v in vals.items()}
    e = ctx.scalar(eps) if eps is not None else ctx.eps
    k = ctx.scalar(k_min) if k_min is not None else factors.k_min
    if k is None:
        raise ConfigError("k_min is required when the factors carry no step size")
    for name, v in list(vals.items()) + [("eps", e), ("k_min", k)]:
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    if k == 0:
        raise ValueError("k_min must be positive")
    return ErrorBounds(
        factors.S_D * vals["data_err"],
        factors.S_G * vals["disc_terms"],
        factors.S_C * vals["comp_terms"],
        factors.S_C2 * e / k.sqrt(),
        {**{n: str(v) for n, v in vals.items()}, "eps": str(e), "k_min": str(k)},
    )
