"""Computability model: calibration from step-size sweeps and predictions.

The model for the error at time ``T`` of a cG(q) run with step ``k`` in a
context with machine epsilon ``eps`` is

    E = [C1 * data_err + C2[q] * k**alpha[q] + C3[q] * k**beta * eps] * 10**(gamma * T)

with ``alpha[q] = 2q`` and ``beta = -1/2`` nominally.  Defaults are
``C1 = 0.5``, ``C2 = 0.001``, ``C3 = 0.002 + 0.0005 q``, ``gamma = 0.388``.

Model arithmetic runs in :class:`~lorenzcg.precision.BigScalar` so that
factors like ``10**388`` are representable; fitting uses numpy on the
base-10 logarithms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .errors import CalibrationError, ConfigError, DomainError, FitError, TrajectoryFormatError
from .precision import BigScalar, PrecisionContext, format_raw, make_context

__all__ = [
    "SweepPoint",
    "ErrorModel",
    "fit_loglog_slope",
    "calibrate",
    "eval_model",
    "optimal_timestep",
    "computability",
    "apriori_bound",
    "synthetic_sweep",
    "save_model",
    "load_model",
    "MODEL_VERSION",
]

MODEL_VERSION = 1
_MODEL_MAGIC = "# lorenzcg error model"
_DEFAULT_DIGITS = 40


def _ctx_of(*values) -> PrecisionContext:
    for v in values:
        if isinstance(v, BigScalar):
            return v.ctx
    return make_context(_DEFAULT_DIGITS)


def _big(x, ctx: PrecisionContext) -> BigScalar:
    if isinstance(x, BigScalar):
        if x.ctx is ctx:
            return x
        # constants move between contexts through their decimal form
        return ctx.scalar(format_raw(x.value, x.ctx.repr_digits))
    if isinstance(x, float):
        return ctx.scalar(repr(x))
    return ctx.scalar(x)


def _log10(x) -> float:
    """Base-10 log as a float; handles magnitudes far beyond double range."""
    if isinstance(x, BigScalar):
        v = x.value
        if v <= 0:
            raise FitError(f"nonpositive value {x}")
        with x.ctx.local():
            return float(gmpy2.log10(v))
    if isinstance(x, (int, float)):
        if x <= 0:
            raise FitError(f"nonpositive value {x!r}")
        return math.log10(x)
    with gmpy2.context(precision=128):
        v = mpfr(str(x))
        if not v > 0:
            raise FitError(f"nonpositive value {x!r}")
        return float(gmpy2.log10(v))


def _float(x) -> float:
    if isinstance(x, BigScalar):
        return float(x.value)
    return float(x) if isinstance(x, (int, float)) else float(mpfr(str(x)))


@dataclass
class SweepPoint:
    """One sweep row: the sup-gap ``error`` at ``T`` of a cG(q) run with step ``dt``."""

    q: int
    dt: object
    eps_mach: object
    T: object
    error: object

    def __post_init__(self):
        if _float(self.dt) <= 0:
            raise ValueError("dt must be positive")
        if _float(self.error) < 0:
            raise ValueError("error must be >= 0")


@dataclass
class ErrorModel:
    """Model constants, stored as decimal strings.

    ``C2``/``C3``/``alpha`` map ``q`` to a constant; a ``q`` missing from the
    map falls back to the ``*_default`` entries when those are set.
    """

    C1: str = "0.5"
    C2: dict = field(default_factory=dict)
    C3: dict = field(default_factory=dict)
    alpha: dict = field(default_factory=dict)
    beta: str = "-0.5"
    gamma: str = "0.388"
    C2_default: Optional[str] = "0.001"
    C3_default: Optional[tuple] = ("0.002", "0.0005")
    source: str = "default"
    notes: dict = field(default_factory=dict)

    @classmethod
    def paper_default(cls) -> "ErrorModel":
        return cls()

    def c2(self, q: int, ctx: PrecisionContext) -> BigScalar:
        if q in self.C2:
            return ctx.scalar(self.C2[q])
        if self.C2_default is None:
            raise ConfigError(f"model has no C2 for q={q}")
        return ctx.scalar(self.C2_default)

    def c3(self, q: int, ctx: PrecisionContext) -> BigScalar:
        if q in self.C3:
            return ctx.scalar(self.C3[q])
        if self.C3_default is None:
            raise ConfigError(f"model has no C3 for q={q}")
        a, b = self.C3_default
        return ctx.scalar(a) + ctx.scalar(b) * q

    def alpha_of(self, q: int, ctx: PrecisionContext) -> BigScalar:
        return ctx.scalar(self.alpha[q]) if q in self.alpha else ctx.scalar(2 * q)


def fit_loglog_slope(points: Iterable[Sequence], window=None, mode: str = "loglog") -> tuple[float, float, float]:
    """Least-squares line through ``(log10 x, log10 y)`` (``mode="loglog"``)
    or ``(x, log10 y)`` (``mode="semilog"``) or ``(x, y)`` (``mode="linear"``).

    ``window = (lo, hi)`` keeps points with ``lo <= x <= hi``.  Returns
    ``(slope, intercept, rms_residual)`` in the transformed coordinates.
    """
    if mode not in ("loglog", "semilog", "linear"):
        raise ValueError(f"unknown fit mode {mode!r}")
    xs, ys = [], []
    for x, y in points:
        xf = _float(x)
        if window is not None and not (_float(window[0]) <= xf <= _float(window[1])):
            continue
        xs.append(_log10(x) if mode == "loglog" else xf)
        ys.append(_float(y) if mode == "linear" else _log10(y))
    if len(xs) < 2:
        raise FitError(f"need at least 2 points in the fit window, got {len(xs)}")
    if len(set(xs)) < 2:
        raise FitError("fit abscissae are all equal")
    X = np.asarray(xs)
    Y = np.asarray(ys)
    slope, intercept = np.polyfit(X, Y, 1)
    resid = Y - (slope * X + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


def _regimes(rows: list[tuple[float, float]]) -> tuple[list[int], list[int]]:
    """Indices of the round-off (small-k) and discretization (large-k) regimes.

    ``rows`` are ``(log10 k, log10 e)`` sorted by ``k``.  The round-off regime
    is the leading run of negative local slopes, the discretization regime
    the trailing run of positive ones; the points where a run ends are
    boundary points and belong to neither.
    """
    n = len(rows)
    slopes = [(rows[i + 1][1] - rows[i][1]) / (rows[i + 1][0] - rows[i][0]) for i in range(n - 1)]
    a = 0
    while a < len(slopes) and slopes[a] < 0:
        a += 1
    b = 0
    while b < len(slopes) - a and slopes[-1 - b] > 0:
        b += 1
    return list(range(a)), list(range(n - b, n))


def calibrate(
    sweeps: Sequence[SweepPoint],
    gamma="0.388",
    sd_series: Optional[Sequence[tuple]] = None,
    saturation: float = 1.0,
) -> ErrorModel:
    """Fit ``C2[q]``, ``C3[q]``, ``alpha[q]`` and ``beta`` from sweep data.

    Errors are divided by ``10**(gamma T)``; points with raw error at or above
    ``saturation`` are dropped as saturated.  Within each ``q`` group the two
    regimes are detected from local slopes, then ``C2`` and ``C3`` come from
    a joint relative least-squares fit of ``C2 k**(2q) + C3 k**(-1/2) eps``
    over both regimes.  ``alpha`` and ``beta`` are free log-log slopes of each
    regime.  ``C1`` is fitted from ``(T, S_D)`` pairs with the slope fixed to
    ``gamma`` when ``sd_series`` is given, else kept at 0.5.
    """
    g = _float(gamma)
    if g <= 0:
        raise ConfigError("gamma must be positive")
    groups: dict[int, list[SweepPoint]] = {}
    for p in sweeps:
        groups.setdefault(int(p.q), []).append(p)
    if not groups:
        raise CalibrationError("no sweep data")
    model = ErrorModel(gamma=repr(g), C2_default=None, C3_default=None, source="calibrated")
    betas = []
    for q in sorted(groups):
        pts = [p for p in groups[q] if 0 < _float(p.error) < saturation]
        pts.sort(key=lambda p: _float(p.dt))
        if len(pts) < 3:
            raise CalibrationError(f"q={q}: fewer than 3 unsaturated sweep points")
        lk = [_log10(p.dt) for p in pts]
        le = [_log10(p.error) - g * _float(p.T) for p in pts]
        leps = [_log10(p.eps_mach) for p in pts]
        rnd, disc = _regimes(list(zip(lk, le)))
        if not rnd or not disc:
            raise CalibrationError(
                f"q={q}: could not find both a discretization and a round-off regime (no slope sign change)"
            )
        use = rnd + disc
        # relative residuals: each row divided by its own scaled error
        A = np.array([[10 ** (2 * q * lk[i] - le[i]), 10 ** (-0.5 * lk[i] + leps[i] - le[i])] for i in use])
        sol, *_ = np.linalg.lstsq(A, np.ones(len(use)), rcond=None)
        c2, c3 = (float(v) for v in sol)
        if not (c2 > 0 and c3 > 0):
            raise CalibrationError(f"q={q}: nonpositive fitted constants C2={c2:g}, C3={c3:g}")
        model.C2[q] = repr(c2)
        model.C3[q] = repr(c3)
        if len(disc) >= 2:
            a_fit, *_ = fit_loglog_slope([(10 ** lk[i], 10 ** le[i]) for i in disc])
            model.alpha[q] = repr(a_fit)
        if len(rnd) >= 2:
            b_fit, *_ = fit_loglog_slope([(10 ** lk[i], 10 ** le[i]) for i in rnd])
            betas.append(b_fit)
        model.notes[f"regimes[{q}]"] = f"roundoff={len(rnd)} discretization={len(disc)} dropped={len(groups[q]) - len(use)}"
    if betas:
        model.beta = repr(float(np.mean(betas)))
    if sd_series:
        offs = [_log10(S) - g * _float(T) for T, S in sd_series]
        model.C1 = repr(10 ** float(np.mean(offs)))
    return model


def eval_model(model: ErrorModel, data_err, q: int, dt, eps, T) -> BigScalar:
    """Literal evaluation of the model; the context is taken from the first BigScalar argument."""
    ctx = _ctx_of(eps, dt, T, data_err)
    d, k, e, t = (_big(v, ctx) for v in (data_err, dt, eps, T))
    if k <= 0 or e <= 0:
        raise DomainError("dt and eps must be positive")
    C1 = ctx.scalar(model.C1)
    beta = ctx.scalar(model.beta)
    gamma = ctx.scalar(model.gamma)
    bracket = C1 * d + model.c2(q, ctx) * (k ** model.alpha_of(q, ctx)) + model.c3(q, ctx) * (k**beta) * e
    return bracket * ctx.scalar(10) ** (gamma * t)


def optimal_timestep(q: int, eps) -> BigScalar:
    """``((2 + q/2) eps) ** (1 / (2q + 1/2))``."""
    if q < 1:
        raise DomainError("q must be >= 1")
    ctx = _ctx_of(eps)
    e = _big(eps, ctx)
    if e <= 0:
        raise DomainError("eps must be positive")
    half = ctx.scalar("0.5")
    return ((2 + half * q) * e) ** (ctx.one() / (2 * q + half))


def computability(eps, epsilon_target=None, prefactor="0.002", rate="0.4") -> BigScalar:
    """Computability horizon.

    Without a target: ``T = n_mach / rate``.  With one:
    ``T_eps = (n_mach + log10(epsilon_target / prefactor)) / rate``.
    """
    ctx = _ctx_of(eps, epsilon_target)
    e = _big(eps, ctx)
    if e <= 0:
        raise DomainError("eps must be positive")
    r = _big(rate, ctx)
    n = -e.log10()
    if epsilon_target is None:
        return n / r
    tgt = _big(epsilon_target, ctx)
    if tgt <= e:
        raise DomainError("epsilon_target must exceed eps")
    return (n + (tgt / _big(prefactor, ctx)).log10()) / r


def apriori_bound(L, T, eps) -> BigScalar:
    """Pessimistic ``exp(L T) * eps`` with unit constant."""
    ctx = _ctx_of(L, T, eps)
    Lb, Tb, e = (_big(v, ctx) for v in (L, T, eps))
    if Lb < 0 or Tb < 0 or e <= 0:
        raise DomainError("need L, T >= 0 and eps > 0")
    return (Lb * Tb).exp() * e


def synthetic_sweep(model: ErrorModel, q: int, dts: Sequence, eps, T, data_err=0) -> list[SweepPoint]:
    """Sweep rows generated exactly from ``model``."""
    ctx = _ctx_of(eps, T)
    out = []
    for k in dts:
        kb = _big(k, ctx)
        out.append(SweepPoint(q, kb, _big(eps, ctx), _big(T, ctx), eval_model(model, _big(data_err, ctx), q, kb, _big(eps, ctx), _big(T, ctx))))
    return out


def save_model(model: ErrorModel, path) -> None:
    lines = [_MODEL_MAGIC, f"version = {MODEL_VERSION}", f"source = {model.source}",
             f"C1 = {model.C1}", f"beta = {model.beta}", f"gamma = {model.gamma}"]
    if model.C2_default is not None:
        lines.append(f"C2_default = {model.C2_default}")
    if model.C3_default is not None:
        lines.append(f"C3_default = {model.C3_default[0]} {model.C3_default[1]}")
    for name in ("C2", "C3", "alpha"):
        for q in sorted(getattr(model, name)):
            lines.append(f"{name}[{q}] = {getattr(model, name)[q]}")
    for key in sorted(model.notes):
        lines.append(f"note {key} = {model.notes[key]}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_model(path) -> ErrorModel:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise TrajectoryFormatError(f"cannot read model file: {exc}") from exc
    if not lines or lines[0] != _MODEL_MAGIC:
        raise TrajectoryFormatError(f"{path}: not an error model file")
    kv = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, sep, val = ln.partition(" = ")
        if not sep:
            raise TrajectoryFormatError(f"{path}: malformed line {ln!r}")
        kv[key.strip()] = val.strip()
    if kv.get("version") != str(MODEL_VERSION):
        raise TrajectoryFormatError(f"{path}: unsupported model version {kv.get('version')!r}")
    m = ErrorModel(C1=kv["C1"], beta=kv["beta"], gamma=kv["gamma"], source=kv.get("source", ""),
                   C2_default=kv.get("C2_default"),
                   C3_default=tuple(kv["C3_default"].split()) if "C3_default" in kv else None)
    for key, val in kv.items():
        for name in ("C2", "C3", "alpha"):
            if key.startswith(name + "["):
                getattr(m, name)[int(key[len(name) + 1:-1])] = val
        if key.startswith("note "):
            m.notes[key[5:]] = val
    return m
