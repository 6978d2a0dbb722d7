"""Experiment drivers: pair divergence, step-size sweeps, order studies,
stability growth, computability horizons, cached references and result tables.

Every driver returns a :class:`ResultTable` whose header carries the full
configuration, so a table can be re-run from its header alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import warnings
from decimal import Decimal
from bisect import bisect_left
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from . import __version__
from .adjoint import DualConfig, growth_series
from .errormodel import fit_loglog_slope, optimal_timestep
from .errors import ConfigError, TrajectoryFormatError
from .galerkin import SolverConfig, integrate, march
from .precision import BigScalar, PrecisionContext, format_raw, make_context
from .problem import ODESystem, make_problem
from .quadrature import _eval_raw, nodal_basis
from .trajectory import DEFAULT_DIVERGENCE_DT, REFINE_LEVELS, DivergenceReport, Trajectory, _refine, load, save

log = logging.getLogger(__name__)

__all__ = [
    "ResultTable",
    "RefSpec",
    "build_problem",
    "default_pair_tol",
    "stream_divergence",
    "pair_divergence",
    "reference_trajectory",
    "sweep_k",
    "order_study",
    "stability_study",
    "computability_study",
]

DEFAULT_U0 = ("1", "0", "0")


# -- result tables -------------------------------------------------------------

@dataclass
class ResultTable:
    """Column schema plus rows of decimal strings, with a provenance header."""

    command: str
    columns: list
    config: dict
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values, schema has {len(self.columns)}")
        self.rows.append([v if isinstance(v, str) else str(v) for v in values])

    def column(self, name: str) -> list[str]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"# lorenzcg {__version__} {self.command}\n")
        out.write(f"# config = {json.dumps(self.config, sort_keys=True)}\n")
        for key in sorted(self.meta):
            out.write(f"# {key} = {self.meta[key]}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return out.getvalue()

    def write(self, path) -> None:
        text = self.to_text()
        if path in (None, "-"):
            print(text, end="")
            return
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "ResultTable":
        try:
            with open(path, encoding="ascii") as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise TrajectoryFormatError(f"cannot read table {path}: {exc}") from exc
        if not lines or not lines[0].startswith("# lorenzcg "):
            raise TrajectoryFormatError(f"{path}: not a lorenzcg result table")
        command = lines[0].split()[-1]
        config, meta, body = None, {}, []
        for ln in lines[1:]:
            if ln.startswith("# "):
                key, _, val = ln[2:].partition(" = ")
                if key == "config":
                    config = json.loads(val)
                else:
                    meta[key] = val
            else:
                body.append(ln)
        if config is None or not body:
            raise TrajectoryFormatError(f"{path}: missing config header or column schema")
        rows = list(csv.reader(body))
        return cls(command, rows[0], config, rows[1:], meta)


# -- problem setup ---------------------------------------------------------------

def build_problem(name: str, digits: int, params: Optional[dict] = None,
                  guard_bits: int = 0) -> tuple[PrecisionContext, ODESystem]:
    ctx = make_context(int(digits), int(guard_bits))
    return ctx, make_problem(name, ctx, params)


def default_pair_tol(digits: int) -> str:
    """``max(1e-16, 10**(2 - digits))`` as a decimal string."""
    return "1e-16" if digits >= 18 else f"1e{2 - digits}"


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# -- streaming divergence ------------------------------------------------------

class _Tail:
    """The most recent intervals of a running march, evaluable like a trajectory."""

    def __init__(self, steps, q: int, ctx: PrecisionContext):
        self.steps = steps
        self.basis = nodal_basis(q, ctx)
        self.times: list = []
        self.nodes: list = []
        self.done = False

    def advance_to(self, t: mpfr) -> bool:
        while not self.done and (not self.times or self.times[-1] < t):
            try:
                st = next(self.steps)
            except StopIteration:
                self.done = True
                break
            if not self.times:
                self.times.append(st.t_left)
            self.times.append(st.t_right)
            self.nodes.append(st.nodes)
        return bool(self.times) and self.times[-1] >= t

    def prune(self, t: mpfr) -> None:
        drop = 0
        while drop < len(self.nodes) - 1 and self.times[drop + 1] < t:
            drop += 1
        if drop:
            del self.times[:drop]
            del self.nodes[:drop]

    def eval_raw(self, t: mpfr) -> list:
        n = min(max(bisect_left(self.times, t) - 1, 0), len(self.nodes) - 1)
        a, b = self.times[n], self.times[n + 1]
        if t == b:
            return list(self.nodes[n][-1])
        if t == a:
            return list(self.nodes[n][0])
        return _eval_raw(self.basis, self.nodes[n], (t - a) / (b - a))


class _Static:
    def __init__(self, traj: Trajectory):
        self.traj = traj

    def advance_to(self, t) -> bool:
        return t <= self.traj.t_end

    def prune(self, t) -> None:
        pass

    def eval_raw(self, t):
        return self.traj.eval_raw(t)


def stream_divergence(a, b, tol, ctx: PrecisionContext, t0, T, sample_dt=None,
                      ctx_b: Optional[PrecisionContext] = None, record: bool = False):
    """Divergence scan that pulls intervals from running solves as it goes.

    ``a`` and ``b`` are ``(march generator, q)`` pairs or finished
    :class:`Trajectory` objects.  Sampling and bisection refinement match
    :func:`~lorenzcg.trajectory.divergence_time`, but the solves stop as soon
    as the gap exceeds ``tol``.  When ``b`` lives in a wider context
    ``ctx_b``, its values are compared after rounding into ``ctx``.
    Returns ``(DivergenceReport, samples)``; ``samples`` lists ``(t, gap)``
    when ``record`` is set.
    """
    def source(x, c):
        return _Static(x) if isinstance(x, Trajectory) else _Tail(x[0], x[1], c)

    sa, sb = source(a, ctx), source(b, ctx_b or ctx)
    tol_r = ctx.raw(tol)
    dt = ctx.raw(sample_dt if sample_dt is not None else DEFAULT_DIVERGENCE_DT)
    lo, hi = ctx.raw(t0), ctx.raw(T)
    samples = []

    def gap(t):
        if ctx_b is not None and ctx_b is not ctx:
            with ctx_b.local():
                vb = sb.eval_raw(mpfr(t, ctx_b.bits))
            vb = [mpfr(v, ctx.bits) for v in vb]
        else:
            vb = sb.eval_raw(t)
        return max(abs(x - y) for x, y in zip(sa.eval_raw(t), vb))

    worst = mpfr(0)
    prev = None
    t_div = None
    i = 0
    with ctx.local():
        while True:
            t = lo + i * dt
            if t > hi or not (sa.advance_to(t) and sb.advance_to(t)):
                break
            g = gap(t)
            if record:
                samples.append((t, g))
            if g > tol_r:
                t_div = t if prev is None else _refine(gap, prev, t, tol_r, REFINE_LEVELS)
                break
            worst = max(worst, g)
            prev = t
            sa.prune(prev)
            sb.prune(prev)
            i += 1
        res = dt / 2**REFINE_LEVELS
    rep = DivergenceReport(
        None if t_div is None else BigScalar(t_div, ctx),
        BigScalar(worst, ctx),
        BigScalar(tol_r, ctx),
        BigScalar(res, ctx),
    )
    return rep, samples


def pair_divergence(q_low: int, q_high: int, dt, digits: int, T, tol=None, problem: str = "lorenz",
                    params: Optional[dict] = None, u0: Sequence = DEFAULT_U0, sample_dt=None,
                    dt_high=None, record: bool = False) -> ResultTable:
    """Divergence time of cG(q_low) and cG(q_high) runs sharing ``dt``, solved in lockstep."""
    if q_low > q_high:
        raise ConfigError("q_low must not exceed q_high")
    tol = tol if tol is not None else default_pair_tol(digits)
    cfg = {"command": "pair-converge", "problem": problem, "params": params or {}, "u0": list(u0),
           "q_low": q_low, "q_high": q_high, "dt": str(dt), "dt_high": None if dt_high is None else str(dt_high),
           "digits": digits, "tmax": str(T), "tol": str(tol),
           "sample_dt": str(sample_dt or DEFAULT_DIVERGENCE_DT)}
    table = ResultTable("pair-converge", ["q_low", "q_high", "dt", "digits", "tol", "t_div",
                                          "max_gap_before", "resolution"], cfg)
    ctx, system = build_problem(problem, digits, params)
    started = time.monotonic()
    if q_low == q_high and (dt_high is None or str(dt_high) == str(dt)):
        warnings.warn("identical discretizations never diverge", stacklevel=2)
        table.meta["warning"] = "degenerate pair: identical discretizations"
        rep = DivergenceReport(None, ctx.zero(), ctx.scalar(tol), ctx.zero())
        samples = []
    else:
        ca = SolverConfig(q_low, dt, ctx)
        cb = SolverConfig(q_high, dt_high if dt_high is not None else dt, ctx)
        rep, samples = stream_divergence(
            (march(system, list(u0), T, ca), q_low), (march(system, list(u0), T, cb), q_high),
            tol, ctx, 0, T, sample_dt, record=record)
    n = ctx.repr_digits
    table.add(str(q_low), str(q_high), str(dt), str(digits), format_raw(rep.tol.value, n),
              "never" if rep.never else format_raw(rep.t_div.value, n),
              format_raw(rep.max_gap_before.value, n), format_raw(rep.resolution.value, n))
    table.meta["wall_time"] = f"{time.monotonic() - started:.3f}"
    table.report = rep
    table.samples = [(format_raw(t, n), format_raw(g, n)) for t, g in samples]
    return table


# -- references -------------------------------------------------------------------

@dataclass
class RefSpec:
    """High-accuracy reference run used by sweeps and studies."""

    q: int
    dt: str
    digits: int
    T: str
    problem: str = "lorenz"
    params: dict = field(default_factory=dict)
    u0: tuple = DEFAULT_U0
    guess: str = "extrapolate"

    def key(self) -> str:
        d = asdict(self)
        d["u0"] = list(d["u0"])
        return _config_hash(d)


def default_cache_dir() -> str:
    return os.environ.get("LORENZCG_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "lorenzcg"))


def reference_trajectory(spec: RefSpec, cache_dir: Optional[str] = None) -> Trajectory:
    """Load the reference from the on-disk cache or compute and store it."""
    cache_dir = cache_dir or default_cache_dir()
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"ref-{spec.key()}.traj")
    ctx, system = build_problem(spec.problem, spec.digits, spec.params)
    if os.path.exists(path):
        try:
            return load(path, ctx)
        except TrajectoryFormatError as exc:
            log.warning("discarding unreadable cached reference %s: %s", path, exc)
    log.info("computing reference q=%d dt=%s digits=%d T=%s", spec.q, spec.dt, spec.digits, spec.T)
    traj = integrate(system, list(spec.u0), spec.T, SolverConfig(spec.q, spec.dt, ctx, guess=spec.guess))
    save(traj, path, {"reference": asdict(spec)})
    return traj


def _check_reference(ref: RefSpec, q: int, digits: int) -> None:
    if ref.q < q + 3 or ref.digits < 2 * digits:
        raise ConfigError(
            f"reference cG({ref.q}) at {ref.digits} digits does not dominate cG({q}) at {digits} digits; "
            f"need order >= {q + 3} and digits >= {2 * digits}"
        )


def _to_ctx(values, ctx: PrecisionContext) -> list:
    return [mpfr(v, ctx.bits) for v in values]


# -- step-size sweeps ----------------------------------------------------------------

def _sweep_one(job: dict) -> dict:
    ctx, system = build_problem(job["problem"], job["digits"], job["params"])
    started = time.monotonic()
    steps = iters = 0
    last = None
    for st in march(system, job["u0"], job["T"], SolverConfig(job["q"], job["dt"], ctx)):
        steps += 1
        iters += st.iterations
        last = st.nodes[-1]
    n = ctx.repr_digits
    return {"dt": job["dt"], "final": [format_raw(v, n) for v in last], "steps": steps,
            "newton": iters, "wall": time.monotonic() - started}


def _run_jobs(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def sweep_k(q: int, dts: Sequence, digits: int, T, ref: Optional[RefSpec] = None, problem: str = "lorenz",
            params: Optional[dict] = None, u0: Sequence = DEFAULT_U0, cache_dir: Optional[str] = None,
            workers: int = 1) -> ResultTable:
    """Final-time sup-gap against a reference for each step in ``dts``.

    The default reference is cG(max(q+3, 10)) with step 0.01 at
    ``max(2*digits, 64)`` digits.
    """
    ref = ref or RefSpec(max(q + 3, 10), "0.01", max(2 * digits, 64), str(T), problem, params or {}, tuple(u0))
    _check_reference(ref, q, digits)
    if mpfr(ref.T) < mpfr(str(T)):
        raise ConfigError("reference does not reach the sweep end time")
    cfg = {"command": "sweep-k", "problem": problem, "params": params or {}, "u0": list(u0), "q": q,
           "dt_list": [str(k) for k in dts], "digits": digits, "tmax": str(T),
           "reference": {**asdict(ref), "u0": list(ref.u0)}}
    started = time.monotonic()
    rtraj = reference_trajectory(ref, cache_dir)
    rctx = rtraj.ctx
    with rctx.local():
        uref = rtraj.eval_raw(rctx.raw(T))
    jobs = [{"problem": problem, "params": params or {}, "u0": list(u0), "q": q, "dt": str(k),
             "digits": digits, "T": str(T)} for k in dts]
    results = _run_jobs(_sweep_one, jobs, workers)
    ctx = make_context(digits)
    table = ResultTable("sweep-k", ["dt", "error", "x", "y", "z", "steps", "newton_iterations", "wall_time"], cfg)
    for r in sorted(results, key=lambda r: mpfr(r["dt"])):
        with rctx.local():
            err = max(abs(a - b) for a, b in zip(_to_ctx(r["final"], rctx), uref))
        table.add(r["dt"], format_raw(err, ctx.repr_digits), *r["final"][:3], str(r["steps"]),
                  str(r["newton"]), f"{r['wall']:.3f}")
    table.meta["wall_time"] = f"{time.monotonic() - started:.3f}"
    table.meta["eps_mach"] = f"1e-{digits}"
    return table


def order_study(q: int, dts: Sequence = ("0.1", "0.05", "0.025", "0.0125"), digits: int = 64, T="1",
                ref_q: Optional[int] = None, ref_digits: Optional[int] = None, ref_dt=None,
                problem: str = "lorenz", params: Optional[dict] = None, u0: Sequence = DEFAULT_U0,
                cache_dir: Optional[str] = None) -> ResultTable:
    """Maximum nodal error against a reference, per step size, with the fitted order."""
    ref_q = ref_q or q + 3
    ref_digits = ref_digits or 2 * digits
    ref_dt = str(ref_dt) if ref_dt is not None else str(min(Decimal(str(k)) for k in dts) / 2)
    ref = RefSpec(ref_q, ref_dt, ref_digits, str(T), problem, params or {}, tuple(u0))
    _check_reference(ref, q, digits)
    cfg = {"command": "order", "problem": problem, "params": params or {}, "u0": list(u0), "q": q,
           "dt_list": [str(k) for k in dts], "digits": digits, "tmax": str(T),
           "reference": {**asdict(ref), "u0": list(ref.u0)}}
    rtraj = reference_trajectory(ref, cache_dir)
    rctx = rtraj.ctx
    ctx, system = build_problem(problem, digits, params)
    table = ResultTable("order", ["dt", "nodal_error"], cfg)
    pts = []
    for k in dts:
        worst = mpfr(0)
        for st in march(system, list(u0), T, SolverConfig(q, str(k), ctx)):
            with rctx.local():
                t = mpfr(st.t_right, rctx.bits)
                g = max(abs(a - b) for a, b in zip(_to_ctx(st.nodes[-1], rctx), rtraj.eval_raw(t)))
                worst = max(worst, g)
        table.add(str(k), format_raw(worst, ctx.repr_digits))
        pts.append((str(k), format_raw(worst, 30)))
    slope, intercept, resid = fit_loglog_slope(pts)
    table.meta["slope"] = f"{slope:.6f}"
    table.meta["fit_residual"] = f"{resid:.3e}"
    table.slope = slope
    return table


# -- stability growth -------------------------------------------------------------------

def stability_study(T_list: Sequence, digits: int = 64, q: int = 10, dt="0.02", z_T: Sequence = (1, 0, 0),
                    dual_q: Optional[int] = None, dual_dt=None, p: int = 0, problem: str = "lorenz",
                    params: Optional[dict] = None, u0: Sequence = DEFAULT_U0, primal: Optional[Trajectory] = None,
                    workers: int = 1, extrapolate_to="1000") -> ResultTable:
    """Stability factors on ``[0, T]`` for each ``T`` and the fitted growth rate of ``S_C``.

    The rate is the least-squares slope of ``log10 S_C`` against ``T``; it is
    only fitted when the list has at least two distinct times.
    """
    T_list = [str(T) for T in T_list]
    Tmax = max(T_list, key=lambda s: mpfr(s))
    cfg = {"command": "stability", "problem": problem, "params": params or {}, "u0": list(u0),
           "digits": digits, "q": q, "dt": str(dt), "t_list": T_list, "z_T": [str(v) for v in z_T],
           "dual_q": dual_q, "dual_dt": None if dual_dt is None else str(dual_dt), "p": p}
    started = time.monotonic()
    if primal is None:
        ctx, system = build_problem(problem, digits, params)
        primal = integrate(system, list(u0), Tmax, SolverConfig(q, str(dt), ctx, guess="extrapolate"))
    else:
        system = None
    ctx = primal.ctx
    cols = ["T"]
    for name in ("S_D", "S_G", "S_C", "S_C2"):
        cols += [f"{name}_mantissa", f"{name}_exponent"]
    table = ResultTable("stability", cols, cfg)
    series = growth_series(primal, T_list, DualConfig(tuple(z_T), dual_q, dual_dt), p, system, workers)
    fit_pts = []
    for gp in series:
        if gp.factors is None:
            table.meta[f"failed T={gp.T}"] = gp.error
            continue
        row = [format_raw(gp.T.value, 12)]
        for name in ("S_D", "S_G", "S_C", "S_C2"):
            m, e = getattr(gp.factors, name).mantissa_exponent(12)
            row += [m, str(e)]
        table.add(*row)
        fit_pts.append((row[0], format_raw(gp.factors.S_C.value, 30)))
    if len({t for t, _ in fit_pts}) >= 2:
        rate, intercept, resid = fit_loglog_slope(fit_pts, mode="semilog")
        table.meta["rate"] = f"{rate:.6f}"
        table.meta["intercept"] = f"{intercept:.6f}"
        table.meta["fit_residual"] = f"{resid:.3e}"
        if extrapolate_to is not None:
            table.meta[f"log10_S_C_at_{extrapolate_to}"] = f"{intercept + rate * float(extrapolate_to):.3f}"
        table.rate = rate
        table.intercept = intercept
    table.meta["wall_time"] = f"{time.monotonic() - started:.3f}"
    table.series = series
    return table


# -- computability horizon ----------------------------------------------------------------

def computability_study(n_list: Sequence[int] = (8, 16, 24, 32), q: int = 4, tol="0.002",
                        ref: Optional[RefSpec] = None, problem: str = "lorenz", params: Optional[dict] = None,
                        u0: Sequence = DEFAULT_U0, cache_dir: Optional[str] = None,
                        sample_dt=None) -> ResultTable:
    """Divergence time from a reference for cG(q) runs at ``n`` digits with the model-optimal step.

    Each run stops at its divergence time.  The default reference is
    cG(12) with step 0.01 at ``max(n) + 16`` digits, long enough to cover
    ``1.25 * 2.5 * max(n)``.
    """
    n_list = [int(n) for n in n_list]
    nmax = max(n_list)
    if ref is None:
        Tref = format_raw(mpfr(int(3.125 * nmax + 5)), 10)
        ref = RefSpec(12, "0.01", nmax + 16, Tref, problem, params or {}, tuple(u0))
    cfg = {"command": "computability", "problem": problem, "params": params or {}, "u0": list(u0), "q": q,
           "n_list": n_list, "tol": str(tol), "reference": {**asdict(ref), "u0": list(ref.u0)}}
    started = time.monotonic()
    rtraj = reference_trajectory(ref, cache_dir)
    table = ResultTable("computability", ["n_mach", "dt", "t_div", "max_gap_before", "wall_time"], cfg)
    pts = []
    for n in n_list:
        t0 = time.monotonic()
        ctx, system = build_problem(problem, n, params)
        k = optimal_timestep(q, ctx.scalar(f"1e-{n}"))
        dt = format_raw(k.value, min(n, 12))
        rep, _ = stream_divergence((march(system, list(u0), ref.T, SolverConfig(q, dt, ctx)), q), rtraj,
                                   tol, ctx, 0, ref.T, sample_dt, ctx_b=rtraj.ctx)
        td = "never" if rep.never else format_raw(rep.t_div.value, 12)
        table.add(str(n), dt, td, format_raw(rep.max_gap_before.value, 6), f"{time.monotonic() - t0:.3f}")
        if not rep.never:
            pts.append((n, float(rep.t_div)))
    if len(pts) >= 2:
        slope, intercept, resid = fit_loglog_slope(pts, mode="linear")
        table.meta["slope"] = f"{slope:.6f}"
        table.meta["intercept"] = f"{intercept:.6f}"
        table.slope = slope
    table.meta["wall_time"] = f"{time.monotonic() - started:.3f}"
    return table
