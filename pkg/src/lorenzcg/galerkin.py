"""Continuous Galerkin cG(q) time stepping.

On each interval the solution is a degree-``q`` polynomial with values at
the ``q+1`` Gauss-Lobatto nodes; the left value is inherited from the
previous interval.  The orthogonality conditions against ``P^(q-1)`` are
evaluated with the ``q``-point Gauss-Legendre rule, which turns them into
collocation at the Gauss points:

    sum_j Dg[i][j] * W_j - k * f(U_left + sum_j E[i][j] * W_j) = 0,   i = 1..q

with increments ``W_j = U_j - U_left`` as unknowns (this keeps the residual
free of the ``|U| * eps`` floor).  The system is solved with exact Newton.
"""

from __future__ import annotations

import json
import logging
import os
import time as _time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigError, DomainError, SingularMatrixError, StepFailure
from .precision import BigScalar, PrecisionContext, Vector, format_raw, lu_factor, lu_solve
from .problem import ODESystem
from .quadrature import (
    _eval_raw,
    derivative_matrix_at,
    gauss_legendre,
    interpolation_matrix,
    nodal_basis,
)
from .trajectory import Trajectory, TrajectoryWriter, uniform_partition

__all__ = [
    "SolverConfig",
    "CGScheme",
    "StepSystem",
    "StepResult",
    "step",
    "newton_solve",
    "march",
    "integrate",
    "final_state",
    "residual",
    "orthogonality_defects",
    "Checkpointer",
    "read_checkpoint",
]

log = logging.getLogger(__name__)

DEFAULT_MAX_NEWTON = 50
_MAX_DAMPING = 12


@dataclass
class SolverConfig:
    """Uniform-step cG(q) settings.

    ``residual_tol`` defaults to ``100 * eps``; the discrete residual is
    measured relative to ``max(1, |U_left|_inf)``.
    """

    q: int
    dt: object
    ctx: PrecisionContext
    residual_tol: object = None
    max_newton_iters: int = DEFAULT_MAX_NEWTON
    guess: str = "constant"

    def __post_init__(self):
        if not isinstance(self.q, int) or self.q < 1:
            raise ConfigError(f"q must be an int >= 1, got {self.q!r}")
        self.dt = self.ctx.scalar(self.dt)
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.residual_tol is None:
            self.residual_tol = self.ctx.eps * 100
        else:
            self.residual_tol = self.ctx.scalar(self.residual_tol)
        if self.residual_tol < self.ctx.eps:
            raise ConfigError("residual_tol must be >= eps")
        if self.guess not in ("constant", "extrapolate"):
            raise ConfigError(f"unknown Newton guess mode {self.guess!r}")
        if self.max_newton_iters < 1:
            raise ConfigError("max_newton_iters must be >= 1")

    def as_dict(self) -> dict:
        n = self.ctx.repr_digits
        return {
            "q": self.q,
            "dt": format_raw(self.dt.value, n),
            "digits": self.ctx.decimal_digits,
            "guard_bits": self.ctx.guard_bits,
            "residual_tol": format_raw(self.residual_tol.value, n),
            "max_newton_iters": self.max_newton_iters,
            "guess": self.guess,
        }


@dataclass(frozen=True)
class CGScheme:
    q: int
    ctx: PrecisionContext
    nodes: tuple          # Lobatto nodes on [0, 1]
    gauss: tuple          # Gauss points on [0, 1]
    gauss_weights: tuple
    E1: tuple             # l_j(g_i), j = 1..q
    Dg1: tuple            # l_j'(g_i), j = 1..q


@lru_cache(maxsize=None)
def scheme(q: int, ctx: PrecisionContext) -> CGScheme:
    basis = nodal_basis(q, ctx)
    gl = gauss_legendre(q, ctx)
    with ctx.local():
        E = interpolation_matrix(basis, gl.points)
        Dg = derivative_matrix_at(basis, gl.points)
    return CGScheme(
        q, ctx, basis.nodes, gl.points, gl.weights,
        tuple(tuple(r[1:]) for r in E), tuple(tuple(r[1:]) for r in Dg),
    )


class StepSystem:
    """Nonlinear system of one cG interval in increment form."""

    def __init__(self, system: ODESystem, sch: CGScheme, U_left: Sequence[mpfr], t: mpfr, k: mpfr):
        self.system = system
        self.sch = sch
        self.U_left = U_left
        self.t = t
        self.k = k
        self.N = system.dimension
        self.tg = [t + g * k for g in sch.gauss]

    def stage_values(self, W):
        E1, U0, N = self.sch.E1, self.U_left, self.N
        q = self.sch.q
        return [
            [U0[c] + gmpy2.fsum([E1[i][j] * W[j][c] for j in range(q)]) for c in range(N)]
            for i in range(q)
        ]

    def residual(self, W) -> tuple[list, list]:
        """``G`` (q x N) and the stage values it was computed at."""
        V = self.stage_values(W)
        Dg1, q, N, k, f, tg = self.sch.Dg1, self.sch.q, self.N, self.k, self.system.rhs, self.tg
        G = []
        for i in range(q):
            F = f(V[i], tg[i])
            row = Dg1[i]
            G.append([gmpy2.fsum([row[j] * W[j][c] for j in range(q)]) - k * F[c] for c in range(N)])
        return G, V

    def jacobian(self, V) -> list[list[mpfr]]:
        q, N, k = self.sch.q, self.N, self.k
        E1, Dg1 = self.sch.E1, self.sch.Dg1
        jac = self.system.jacobian
        size = q * N
        M = [[None] * size for _ in range(size)]
        for i in range(q):
            kJ = [[k * a for a in r] for r in jac(V[i], self.tg[i])]
            for j in range(q):
                e, d = E1[i][j], Dg1[i][j]
                for c in range(N):
                    Mrow = M[i * N + c]
                    kJc = kJ[c]
                    for dd in range(N):
                        v = -e * kJc[dd]
                        if c == dd:
                            v += d
                        Mrow[j * N + dd] = v
        return M


def _norm_inf(G) -> mpfr:
    return max(abs(x) for row in G for x in row)


@dataclass
class NewtonResult:
    W: list
    iterations: int
    residual: mpfr
    history: list = field(default_factory=list)


def newton_solve(sys: StepSystem, guess, tol: mpfr, max_iters: int) -> NewtonResult:
    """Exact Newton with backtracking on ``|G|_inf``; gmpy2 context must be active.

    ``iterations`` counts linear solves, so an already-converged guess takes
    zero and a linear problem takes one.  Raises :class:`StepFailure` with
    the residual history when ``max_iters`` solves do not reach ``tol``.
    """
    W = [list(w) for w in guess]
    G, V = sys.residual(W)
    rn = _norm_inf(G)
    history = [rn]
    N = sys.N
    size = sys.sch.q * N
    it = 0
    while rn > tol:
        if it >= max_iters:
            raise StepFailure(
                f"Newton did not reach {float(tol):.3e} in {max_iters} iterations "
                f"(last residual {float(rn):.3e})",
                history=history,
            )
        M = sys.jacobian(V)
        scale = max(abs(a) for r in M for a in r)
        try:
            LU, perm = lu_factor(M, size * sys.system.ctx.eps.value * scale * mpfr("1e-30"))
        except SingularMatrixError as exc:
            raise StepFailure(f"singular step Jacobian: {exc}", history=history) from exc
        delta = lu_solve(LU, perm, [x for row in G for x in row])
        lam = mpfr(1)
        for _ in range(_MAX_DAMPING):
            W_new = [[W[j][c] - lam * delta[j * N + c] for c in range(N)] for j in range(sys.sch.q)]
            G_new, V_new = sys.residual(W_new)
            rn_new = _norm_inf(G_new)
            if rn_new < rn or rn_new <= tol:
                break
            lam /= 2
        else:
            # no decrease along the Newton direction; keep the full step and let max_iters decide
            W_new = [[W[j][c] - delta[j * N + c] for c in range(N)] for j in range(sys.sch.q)]
            G_new, V_new = sys.residual(W_new)
            rn_new = _norm_inf(G_new)
        W, G, V, rn = W_new, G_new, V_new, rn_new
        history.append(rn)
        it += 1
    return NewtonResult(W, it, rn, history)


@dataclass
class StepResult:
    nodes: list            # q+1 raw node vectors; nodes[0] is U_left itself
    iterations: int
    residual: mpfr

    def vectors(self, ctx: PrecisionContext) -> list[Vector]:
        return [Vector(n, ctx) for n in self.nodes]


def _step_raw(system, sch, U_left, t, k, tol_rel, max_iters, guess=None) -> StepResult:
    N = system.dimension
    q = sch.q
    scale = max(mpfr(1), max(abs(u) for u in U_left))
    tol = tol_rel * scale
    if guess is None:
        guess = [[mpfr(0)] * N for _ in range(q)]
    sys = StepSystem(system, sch, U_left, t, k)
    res = newton_solve(sys, guess, tol, max_iters)
    nodes = [U_left] + [[U_left[c] + res.W[j][c] for c in range(N)] for j in range(q)]
    return StepResult(nodes, res.iterations, res.residual)


def step(system: ODESystem, U_left, t, cfg: SolverConfig, dt=None) -> StepResult:
    """One cG(q) interval starting at ``t`` from ``U_left``."""
    ctx = cfg.ctx
    ctx.check(system)
    U = U_left.raw if isinstance(U_left, Vector) else [ctx.raw(u) for u in U_left]
    if isinstance(U_left, Vector):
        ctx.check(U_left)
    k = ctx.raw(dt) if dt is not None else cfg.dt.value
    sch = scheme(cfg.q, ctx)
    with ctx.local():
        return _step_raw(system, sch, U, ctx.raw(t), k, cfg.residual_tol.value, cfg.max_newton_iters)


def _extrapolated_guess(sch, prev_nodes, k_prev, k, U_left):
    """Increments from extending the previous interval's polynomial."""
    basis = nodal_basis(sch.q, sch.ctx)
    r = k / k_prev
    out = []
    for tau in sch.nodes[1:]:
        v = _eval_raw(basis, prev_nodes, 1 + tau * r)
        out.append([a - b for a, b in zip(v, U_left)])
    return out


@dataclass
class MarchStep:
    index: int
    t_left: mpfr
    t_right: mpfr
    nodes: list
    iterations: int


def march(
    system: ODESystem,
    u0,
    T,
    cfg: SolverConfig,
    t0=0,
    start_index: int = 0,
    U_start: Optional[Sequence[mpfr]] = None,
    prev_start: Optional[tuple] = None,
) -> Iterator[MarchStep]:
    """Yield intervals of the uniform-step cG(q) solution on ``[t0, T]`` one by one.

    ``start_index``/``U_start`` resume at interval ``start_index`` from the
    given left value; the partition is the same as for a fresh run.
    ``prev_start = (nodes, k)`` of the preceding interval keeps extrapolated
    Newton guesses identical to the uninterrupted run.
    """
    ctx = cfg.ctx
    ctx.check(system)
    t0r, Tr = ctx.raw(t0), ctx.raw(T)
    times = uniform_partition(t0r, Tr, cfg.dt.value, ctx)
    sch = scheme(cfg.q, ctx)
    tol_rel = cfg.residual_tol.value
    if U_start is not None:
        U = list(U_start)
    elif isinstance(u0, Vector):
        ctx.check(u0)
        U = list(u0.raw)
    else:
        U = [ctx.raw(x) for x in u0]
    if len(U) != system.dimension:
        raise ConfigError(f"initial value has {len(U)} components, system has {system.dimension}")
    prev = prev_start
    M = len(times) - 1
    for n in range(start_index, M):
        with ctx.local():
            a, b = times[n], times[n + 1]
            k = b - a
            guess = None
            if cfg.guess == "extrapolate" and prev is not None:
                guess = _extrapolated_guess(sch, prev[0], prev[1], k, U)
            try:
                res = _step_raw(system, sch, U, a, k, tol_rel, cfg.max_newton_iters, guess)
            except StepFailure as exc:
                exc.interval = n
                exc.time = BigScalar(a, ctx)
                exc.args = (f"interval {n} at t={float(a):.6g}: {exc.args[0]}",)
                raise
        yield MarchStep(n, a, b, res.nodes, res.iterations)
        U = res.nodes[-1]
        prev = (res.nodes, k)


def n_intervals(T, cfg: SolverConfig, t0=0) -> int:
    ctx = cfg.ctx
    return len(uniform_partition(ctx.raw(t0), ctx.raw(T), cfg.dt.value, ctx)) - 1


class Checkpointer:
    """Writes resumable solver state every ``every_steps`` intervals and/or ``every_seconds``."""

    def __init__(self, path, every_steps: Optional[int] = None, every_seconds: Optional[float] = None):
        if not every_steps and not every_seconds:
            raise ConfigError("checkpoint cadence needs every_steps or every_seconds")
        self.path = os.fspath(path)
        self.every_steps = every_steps
        self.every_seconds = every_seconds
        self._last = _time.monotonic()
        self.written = 0

    def due(self, steps_done: int) -> bool:
        if self.every_steps and steps_done % self.every_steps == 0:
            return True
        return bool(self.every_seconds and _time.monotonic() - self._last >= self.every_seconds)

    def write(self, state: dict) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            json.dump(state, fh, sort_keys=True, indent=1)
        os.replace(tmp, self.path)
        self._last = _time.monotonic()
        self.written += 1


def read_checkpoint(path) -> dict:
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)


def integrate(
    system: ODESystem,
    u0,
    T,
    cfg: SolverConfig,
    t0=0,
    checkpoint: Optional[Checkpointer] = None,
    writer: Optional[TrajectoryWriter] = None,
    resume: Optional[dict] = None,
    keep: bool = True,
    progress_every: int = 0,
) -> Trajectory:
    """Integrate over ``[t0, T]`` and return the trajectory.

    ``writer`` streams intervals to disk as they are computed; with
    ``keep=False`` only the last interval is held in memory.  ``resume``
    (a checkpoint dict) continues a run that was written with ``writer``.
    """
    ctx = cfg.ctx
    if isinstance(u0, Vector):
        u0_raw = list(u0.raw)
    else:
        u0_raw = [ctx.raw(x) for x in u0]
    start, U_start, prev = 0, None, None
    if resume is not None:
        start = int(resume["next_interval"])
        U_start = [mpfr(s, ctx.bits) for s in resume["U_left"]]
        if resume.get("prev_nodes"):
            prev = ([[mpfr(s, ctx.bits) for s in node] for node in resume["prev_nodes"]],
                    mpfr(resume["k_prev"], ctx.bits))
    stats = {"newton_iterations": 0, "steps": 0}
    times = uniform_partition(ctx.raw(t0), ctx.raw(T), cfg.dt.value, ctx)
    nodes = []
    started = _time.monotonic()
    for st in march(system, u0_raw, T, cfg, t0, start, U_start, prev):
        stats["newton_iterations"] += st.iterations
        stats["steps"] += 1
        if keep:
            nodes.append(st.nodes)
        else:
            nodes = [st.nodes]
        if writer is not None:
            writer.write_interval(st.index, st.nodes)
        done = st.index + 1
        if checkpoint is not None and done < len(times) - 1 and checkpoint.due(done):
            with ctx.local():
                k_prev = st.t_right - st.t_left
            checkpoint.write({
                "version": 1,
                "next_interval": done,
                "t": format_raw(st.t_right, ctx.repr_digits),
                "U_left": [format_raw(v, ctx.repr_digits) for v in st.nodes[-1]],
                "prev_nodes": [[format_raw(v, ctx.repr_digits) for v in node] for node in st.nodes],
                "k_prev": format_raw(k_prev, ctx.repr_digits),
                "config": cfg.as_dict(),
                "writer_offset": writer.offset() if writer is not None else None,
            })
        if progress_every and done % progress_every == 0:
            log.info("interval %d/%d t=%.4f newton=%d", done, len(times) - 1, float(st.t_right),
                     stats["newton_iterations"])
    stats["wall_time"] = _time.monotonic() - started
    n = ctx.repr_digits
    problem = {
        "name": system.name,
        "params": system.params,
        "u0": [format_raw(v, n) for v in u0_raw],
    }
    if keep and start == 0:
        traj = Trajectory(times, nodes, cfg.q, ctx, problem, ("uniform", times[0], cfg.dt.value, times[-1]))
    else:
        m0 = len(times) - 1 - len(nodes)
        traj = Trajectory(times[m0:], nodes, cfg.q, ctx, problem)
    traj.stats = stats
    return traj


def final_state(system: ODESystem, u0, T, cfg: SolverConfig, t0=0) -> Vector:
    """Value at ``T`` without storing the trajectory."""
    last = None
    for st in march(system, u0, T, cfg, t0):
        last = st.nodes[-1]
    return Vector(last, cfg.ctx)


def residual(traj: Trajectory, system: ODESystem, t) -> Vector:
    """``R(t) = U'(t) - f(U(t), t)`` using the interval's differentiation matrix."""
    ctx = traj.ctx
    tt = ctx.raw(t)
    with ctx.local():
        dU, _ = traj.derivative_raw(tt, 1)
        U = traj.eval_raw(tt)
        F = system.rhs(U, tt)
        return Vector([a - b for a, b in zip(dU, F)], ctx)


def orthogonality_defects(traj: Trajectory, system: ODESystem, n: int, npoints: Optional[int] = None) -> list[mpfr]:
    """``|int_{I_n} R v_i dt|`` for the Lagrange test basis ``v_i`` on the Gauss points.

    With ``npoints`` the integral uses that many Gauss points instead of the
    method's own ``q``-point rule.
    """
    ctx = traj.ctx
    q = traj.q
    sch = scheme(q, ctx)
    a, b = traj.times[n], traj.times[n + 1]
    rule = gauss_legendre(npoints or q, ctx)
    test_basis = nodal_basis(list(sch.gauss), ctx) if q > 1 else None
    out = []
    with ctx.local():
        k = b - a
        Rvals = []
        for x in rule.points:
            t = a + x * k
            dU, _ = traj.derivative_raw(t, 1) if not (t == a or t == b) else (None, None)
            U = traj.eval_raw(t)
            Rvals.append([d - f for d, f in zip(dU, system.rhs(U, t))])
        for i in range(q):
            if test_basis is None:
                v = [mpfr(1)] * len(rule.points)
            else:
                E = interpolation_matrix(test_basis, rule.points)
                v = [row[i] for row in E]
            for c in range(traj.dimension):
                out.append(abs(k * gmpy2.fsum([w * vi * R[c] for w, vi, R in zip(rule.weights, v, Rvals)])))
    return out
