"""Piecewise-polynomial trajectories: evaluation, derivatives, comparison, files.

A trajectory stores, for each interval ``(t_{n}, t_{n+1}]``, the values at the
``q+1`` Lobatto nodes of that interval.  Node 0 of interval ``n`` is the very
same list object as node ``q`` of interval ``n-1``, so continuity is exact.
Evaluation is left-continuous at partition points.
"""

from __future__ import annotations

import io
import json
import os
from bisect import bisect_left
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import (
    CapabilityError,
    DomainError,
    FormatVersionError,
    PrecisionMismatchError,
    TrajectoryFormatError,
    TruncatedFileError,
)
from .precision import BigScalar, PrecisionContext, Vector, format_raw, make_context
from .quadrature import NodalBasis, _eval_raw, nodal_basis

__all__ = [
    "Trajectory",
    "DivergenceReport",
    "uniform_partition",
    "divergence_time",
    "scan_divergence",
    "save",
    "load",
    "TrajectoryWriter",
    "stream_meta",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
DEFAULT_DIVERGENCE_DT = "0.25"
REFINE_LEVELS = 20


def uniform_partition(t0: mpfr, T: mpfr, dt: mpfr, ctx: PrecisionContext) -> list[mpfr]:
    """``t_n = t0 + n*dt`` with the last point pinned to ``T``.

    A final sliver shorter than ``1e-9 * dt`` is merged into the last step
    rather than producing a near-empty interval.
    """
    if dt <= 0:
        raise DomainError("time step must be positive")
    if T <= t0:
        raise DomainError("empty time interval")
    with ctx.local():
        ratio = (T - t0) / dt
        n = int(gmpy2.rint(ratio))
        if n >= 1 and abs(ratio - n) <= mpfr("1e-9") * max(ratio, mpfr(1)):
            M = n
        else:
            M = int(gmpy2.ceil(ratio))
        times = [t0 + i * dt for i in range(M)]
        times.append(+T)
    return times


@dataclass
class DivergenceReport:
    """First time two solutions differ by more than ``tol`` (``t_div=None``: never)."""

    t_div: Optional[BigScalar]
    max_gap_before: BigScalar
    tol: BigScalar
    resolution: BigScalar

    @property
    def never(self) -> bool:
        return self.t_div is None

    def __str__(self):
        td = "never" if self.t_div is None else f"{float(self.t_div):.6f}"
        return f"t_div={td} max_gap_before={float(self.max_gap_before):.3e} tol={float(self.tol):.1e}"


class Trajectory:
    """Continuous piecewise polynomial of degree ``q`` on a partition."""

    def __init__(
        self,
        times: Sequence[mpfr],
        nodes: Sequence[Sequence[Sequence[mpfr]]],
        q: int,
        ctx: PrecisionContext,
        problem: Optional[dict] = None,
        partition: Optional[tuple] = None,
    ):
        if len(times) != len(nodes) + 1:
            raise ValueError(f"{len(times)} partition points for {len(nodes)} intervals")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("partition must be strictly increasing")
        self.times = list(times)
        self.nodes = list(nodes)
        self.q = q
        self.ctx = ctx
        self.problem = dict(problem or {})
        # ("uniform", t0, dt, T) when the partition is reproducible from three numbers
        self.partition = partition
        self.basis: NodalBasis = nodal_basis(q, ctx)

    # -- shape ------------------------------------------------------------
    @property
    def M(self) -> int:
        return len(self.nodes)

    @property
    def dimension(self) -> int:
        return len(self.nodes[0][0]) if self.nodes else 0

    @property
    def t_start(self) -> mpfr:
        return self.times[0]

    @property
    def t_end(self) -> mpfr:
        return self.times[-1]

    @property
    def span(self) -> tuple[BigScalar, BigScalar]:
        return BigScalar(self.t_start, self.ctx), BigScalar(self.t_end, self.ctx)

    def final_state(self) -> Vector:
        return Vector(self.nodes[-1][-1], self.ctx)

    def initial_state(self) -> Vector:
        return Vector(self.nodes[0][0], self.ctx)

    def interval_index(self, t: mpfr) -> int:
        if t < self.times[0] or t > self.times[-1]:
            raise DomainError(
                f"t={float(t):.6g} outside trajectory span [{float(self.times[0]):.6g}, {float(self.times[-1]):.6g}]"
            )
        return max(bisect_left(self.times, t) - 1, 0)

    # -- evaluation -------------------------------------------------------
    def eval_raw(self, t: mpfr) -> list[mpfr]:
        """Value at ``t`` as raw ``mpfr`` list; caller holds the context."""
        n = self.interval_index(t)
        a, b = self.times[n], self.times[n + 1]
        if t == b:
            return list(self.nodes[n][-1])
        if t == a:
            return list(self.nodes[n][0])
        tau = (t - a) / (b - a)
        return _eval_raw(self.basis, self.nodes[n], tau)

    def evaluate(self, t) -> Vector:
        tt = self.ctx.raw(t)
        with self.ctx.local():
            return Vector(self.eval_raw(tt), self.ctx)

    __call__ = evaluate

    def derivative_raw(self, t: mpfr, order: int) -> tuple[list[mpfr], bool]:
        n = self.interval_index(t)
        a, b = self.times[n], self.times[n + 1]
        k = b - a
        vals = [list(v) for v in self.nodes[n]]
        D = self.basis.dmat
        for _ in range(order):
            vals = [
                [gmpy2.fsum([D[i][j] * vals[j][c] for j in range(len(vals))]) for c in range(len(vals[0]))]
                for i in range(len(vals))
            ]
        tau = (t - a) / k
        out = _eval_raw(self.basis, vals, tau)
        scale = k ** order
        one_sided = order >= 1 and any(t == x for x in self.times)
        return [v / scale for v in out], one_sided

    def derivative(self, t, order: int, return_flag: bool = False, allow_zero: bool = False):
        """``order``-th time derivative of the interval polynomial containing ``t``.

        At a partition point the left interval's one-sided value is used
        (``return_flag=True`` also returns whether that happened).  Orders
        above ``q`` raise unless ``allow_zero`` asks for the zero vector.
        """
        if order < 0:
            raise ValueError("order must be >= 0")
        tt = self.ctx.raw(t)
        if order > self.q:
            if not allow_zero:
                raise CapabilityError(f"derivative order {order} exceeds polynomial degree {self.q}")
            self.interval_index(tt)
            v = Vector([mpfr(0)] * self.dimension, self.ctx)
            return (v, False) if return_flag else v
        with self.ctx.local():
            if order == 0:
                v, flag = self.eval_raw(tt), False
            else:
                v, flag = self.derivative_raw(tt, order)
        out = Vector(v, self.ctx)
        return (out, flag) if return_flag else out

    def window(self, t_lo: mpfr, t_hi: mpfr) -> "Trajectory":
        """Sub-trajectory made of the intervals that intersect ``[t_lo, t_hi]``."""
        i0 = self.interval_index(t_lo)
        i1 = self.interval_index(t_hi)
        return Trajectory(self.times[i0:i1 + 2], self.nodes[i0:i1 + 1], self.q, self.ctx, self.problem)

    def __repr__(self):
        return (f"Trajectory(q={self.q}, M={self.M}, span=[{float(self.t_start):g}, {float(self.t_end):g}], "
                f"digits={self.ctx.decimal_digits})")


# -- divergence ---------------------------------------------------------------

def _sup_gap(u: Sequence[mpfr], v: Sequence[mpfr]) -> mpfr:
    return max(abs(a - b) for a, b in zip(u, v))


def _refine(gap: Callable[[mpfr], mpfr], lo: mpfr, hi: mpfr, tol: mpfr, levels: int) -> mpfr:
    """Bisect ``[lo, hi]`` (gap(lo) <= tol < gap(hi)) down to ``(hi-lo)/2**levels``."""
    for _ in range(levels):
        mid = (lo + hi) / 2
        if gap(mid) > tol:
            hi = mid
        else:
            lo = mid
    return hi


def scan_divergence(
    gap: Callable[[mpfr], mpfr],
    lo: mpfr,
    hi: mpfr,
    tol: mpfr,
    sample_dt: mpfr,
    ctx: PrecisionContext,
    start_index: int = 0,
    levels: int = REFINE_LEVELS,
) -> tuple[Optional[mpfr], mpfr, int]:
    """Scan samples ``lo + i*sample_dt`` (``i >= start_index``) up to ``hi``.

    Returns ``(t_div or None, max gap over accepted samples, next index)``.
    The next index lets callers continue a scan over a growing window.
    """
    worst = mpfr(0)
    i = start_index
    with ctx.local():
        prev = None if i == 0 else lo + (i - 1) * sample_dt
        while True:
            t = lo + i * sample_dt
            if t > hi:
                return None, worst, i
            g = gap(t)
            if g > tol:
                if prev is None:
                    return t, worst, i
                return _refine(gap, prev, t, tol, levels), worst, i
            worst = max(worst, g)
            prev = t
            i += 1


def divergence_time(a: Trajectory, b: Trajectory, tol, sample_dt=None) -> DivergenceReport:
    """First sampled time where ``max_c |a_c(t) - b_c(t)| > tol``, bisection-refined.

    Samples every ``sample_dt`` (default 0.25) over the overlap of the two
    spans; the crossing is refined to ``sample_dt / 2**20``.
    """
    ctx = a.ctx
    ctx.check(b)
    tol_r = ctx.raw(tol)
    if tol_r <= 0:
        raise ValueError("tol must be positive")
    dt = ctx.raw(sample_dt if sample_dt is not None else DEFAULT_DIVERGENCE_DT)
    lo = max(a.t_start, b.t_start)
    hi = min(a.t_end, b.t_end)
    if lo > hi:
        raise DomainError("trajectories do not overlap in time")

    def gap(t):
        return _sup_gap(a.eval_raw(t), b.eval_raw(t))

    t_div, worst, _ = scan_divergence(gap, lo, hi, tol_r, dt, ctx)
    with ctx.local():
        res = dt / 2 ** REFINE_LEVELS
    return DivergenceReport(
        None if t_div is None else BigScalar(t_div, ctx),
        BigScalar(worst, ctx),
        BigScalar(tol_r, ctx),
        BigScalar(res, ctx),
    )


# -- serialization -----------------------------------------------------------

_HEADER_MAGIC = "# lorenzcg trajectory"
_END_HEADER = "end_header"
_TRAILER = "end"


def _header_lines(traj_meta: dict) -> list[str]:
    lines = [_HEADER_MAGIC]
    for key in ("version", "problem", "digits", "guard_bits", "q", "basis", "M", "dimension",
                "partition", "params", "u0", "config"):
        if key in traj_meta and traj_meta[key] is not None:
            lines.append(f"{key} = {traj_meta[key]}")
    lines.append(_END_HEADER)
    return lines


def _meta_for(traj: Trajectory, config: Optional[dict] = None) -> dict:
    ctx = traj.ctx
    n = ctx.repr_digits
    if traj.partition and traj.partition[0] == "uniform":
        _, t0, dt, T = traj.partition
        part = f"uniform {format_raw(t0, n)} {format_raw(dt, n)} {format_raw(T, n)}"
    else:
        part = "explicit"
    return {
        "version": FORMAT_VERSION,
        "problem": traj.problem.get("name", "unknown"),
        "digits": ctx.decimal_digits,
        "guard_bits": ctx.guard_bits,
        "q": traj.q,
        "basis": "gauss_lobatto",
        "M": traj.M,
        "dimension": traj.dimension,
        "partition": part,
        "params": json.dumps(traj.problem.get("params", {}), sort_keys=True),
        "u0": ",".join(traj.problem.get("u0", [])),
        "config": json.dumps(config, sort_keys=True) if config else None,
    }


def stream_meta(problem: dict, q: int, ctx: PrecisionContext, t0, dt, T, M: int, dimension: int,
                config: Optional[dict] = None) -> dict:
    """Header for a uniform-step run written interval by interval."""
    stub = Trajectory([ctx.raw(t0), ctx.raw(T)], [[[mpfr(0)] * dimension] * (q + 1)], q, ctx, problem,
                      ("uniform", ctx.raw(t0), ctx.raw(dt), ctx.raw(T)))
    meta = _meta_for(stub, config)
    meta["M"] = M
    return meta


class TrajectoryWriter:
    """Streams a trajectory file interval by interval.

    ``offset()`` after each interval is a resumable position: reopening with
    ``resume_offset`` truncates there and continues appending.
    """

    def __init__(self, path, meta: dict, ctx: PrecisionContext, resume_offset: Optional[int] = None):
        self.path = os.fspath(path)
        self.ctx = ctx
        self.ndig = ctx.repr_digits
        if resume_offset is None:
            self.fh = open(self.path, "w", encoding="ascii", newline="\n")
            self.fh.write("\n".join(_header_lines(meta)) + "\n")
            self.explicit_times = meta.get("partition") == "explicit"
        else:
            self.fh = open(self.path, "r+", encoding="ascii", newline="\n")
            self.fh.seek(resume_offset)
            self.fh.truncate()
            self.explicit_times = False

    def write_times(self, times: Sequence[mpfr]) -> None:
        self.fh.write("".join(f"t {i} {format_raw(t, self.ndig)}\n" for i, t in enumerate(times)))

    def write_interval(self, index: int, nodes: Sequence[Sequence[mpfr]]) -> None:
        nd = self.ndig
        out = io.StringIO()
        for j, node in enumerate(nodes):
            for c, v in enumerate(node):
                out.write(f"{index} {j} {c} {format_raw(v, nd)}\n")
        self.fh.write(out.getvalue())

    def offset(self) -> int:
        self.fh.flush()
        return self.fh.tell()

    def close(self, complete: bool = True) -> None:
        if complete:
            self.fh.write(_TRAILER + "\n")
        self.fh.close()


def save(traj: Trajectory, path, config: Optional[dict] = None) -> None:
    """Write ``traj`` as a line-oriented decimal text file (lossless)."""
    meta = _meta_for(traj, config)
    w = TrajectoryWriter(path, meta, traj.ctx)
    if meta["partition"] == "explicit":
        w.write_times(traj.times)
    for i, nodes in enumerate(traj.nodes):
        w.write_interval(i, nodes)
    w.close()


def read_header(path) -> dict:
    with open(path, "r", encoding="ascii") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    first = fh.readline().rstrip("\n")
    if first != _HEADER_MAGIC:
        raise TrajectoryFormatError(f"{path}: not a trajectory file")
    meta = {}
    for line in fh:
        line = line.rstrip("\n")
        if line == _END_HEADER:
            break
        key, sep, val = line.partition(" = ")
        if not sep:
            raise TrajectoryFormatError(f"{path}: malformed header line {line!r}")
        meta[key] = val
    else:
        raise TruncatedFileError(f"{path}: header not terminated")
    try:
        version = int(meta["version"])
    except (KeyError, ValueError):
        raise TrajectoryFormatError(f"{path}: missing version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return meta


def load(path, ctx: Optional[PrecisionContext] = None) -> Trajectory:
    """Read a file written by :func:`save` or :class:`TrajectoryWriter`.

    With ``ctx`` given, the file's digit count must match it exactly; values
    are never silently re-rounded.
    """
    with open(path, "r", encoding="ascii") as fh:
        meta = _read_header(fh, path)
        digits = int(meta["digits"])
        guard = int(meta.get("guard_bits", 0))
        if ctx is None:
            ctx = make_context(digits, guard)
        elif ctx.decimal_digits != digits or ctx.guard_bits != guard:
            raise PrecisionMismatchError(
                f"{path}: file has {digits} digits, context has {ctx.decimal_digits}"
            )
        q = int(meta["q"])
        M = int(meta["M"])
        N = int(meta["dimension"])
        bits = ctx.bits
        part = meta["partition"].split()
        times = None
        nodes = [[[None] * N for _ in range(q + 1)] for _ in range(M)]
        explicit = []
        complete = False
        count = 0
        for line in fh:
            line = line.rstrip("\n")
            if line == _TRAILER:
                complete = True
                break
            fields = line.split(" ")
            try:
                if fields[0] == "t":
                    explicit.append(mpfr(fields[2], bits))
                    continue
                i, j, c = int(fields[0]), int(fields[1]), int(fields[2])
                nodes[i][j][c] = mpfr(fields[3], bits)
            except (IndexError, ValueError) as exc:
                raise TruncatedFileError(f"{path}: malformed record {line!r}") from exc
            count += 1
        if not complete or count != M * (q + 1) * N:
            raise TruncatedFileError(f"{path}: expected {M * (q + 1) * N} records, found {count}")
    partition = None
    if part[0] == "uniform":
        t0, dt, T = (mpfr(x, bits) for x in part[1:4])
        times = uniform_partition(t0, T, dt, ctx)
        partition = ("uniform", t0, dt, T)
    else:
        times = explicit
    if len(times) != M + 1:
        raise TrajectoryFormatError(f"{path}: partition has {len(times) - 1} intervals, header says {M}")
    for i in range(1, M):
        if nodes[i][0] != nodes[i - 1][q]:
            raise TrajectoryFormatError(f"{path}: continuity broken at interval {i}")
        nodes[i][0] = nodes[i - 1][q]
    problem = {
        "name": meta.get("problem"),
        "params": json.loads(meta.get("params", "{}")),
        "u0": [s for s in meta.get("u0", "").split(",") if s],
    }
    traj = Trajectory(times, nodes, q, ctx, problem, partition)
    traj.config = json.loads(meta["config"]) if "config" in meta else None
    return traj
