"""Arbitrary-precision scalars, small vectors/matrices and dense solves.

Everything numeric in the package is carried by :mod:`gmpy2` ``mpfr``
values.  A :class:`PrecisionContext` fixes the working precision; the
public :class:`BigScalar`, :class:`Vector` and :class:`Matrix` types tie
their entries to exactly one context and refuse to mix contexts.

Hot loops (the time stepper, quadrature) work on raw ``mpfr`` lists inside
``with ctx.local():`` blocks.  That block only installs the precision for the
current thread and is undone on exit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import (
    ContextMismatchError,
    ConvergenceError,
    DecimalParseError,
    PrecisionError,
    SingularMatrixError,
)

__all__ = [
    "MIN_DIGITS",
    "MAX_DIGITS",
    "PrecisionContext",
    "BigScalar",
    "Vector",
    "Matrix",
    "make_context",
    "parse_decimal",
    "format_decimal",
    "linsolve",
    "lu_factor",
    "lu_solve",
    "spectral_norm",
]

MIN_DIGITS = 4
#: Upper bound on a context's decimal digits (about 66k bits).
MAX_DIGITS = 20000

_LOG2_10 = math.log2(10)


@dataclass(frozen=True)
class PrecisionContext:
    """Working precision of ``decimal_digits`` significant decimal digits.

    The binary precision is ``ceil(decimal_digits * log2(10)) + guard_bits``.
    ``eps`` is ``10**-decimal_digits`` rounded to the context.
    """

    decimal_digits: int
    guard_bits: int = 0
    gmp: gmpy2.context = field(init=False, repr=False, compare=False)
    eps: "BigScalar" = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.decimal_digits, int) or isinstance(self.decimal_digits, bool):
            raise PrecisionError(f"decimal_digits must be an int, got {self.decimal_digits!r}")
        if self.decimal_digits < MIN_DIGITS or self.decimal_digits > MAX_DIGITS:
            raise PrecisionError(
                f"decimal_digits={self.decimal_digits} outside [{MIN_DIGITS}, {MAX_DIGITS}]"
            )
        if self.guard_bits < 0:
            raise PrecisionError("guard_bits must be >= 0")
        g = gmpy2.context(
            precision=self.bits,
            emax=gmpy2.get_emax_max(),
            emin=gmpy2.get_emin_min(),
        )
        object.__setattr__(self, "gmp", g)
        eps = g.exp10(mpfr(-self.decimal_digits))
        object.__setattr__(self, "eps", BigScalar(eps, self))

    @property
    def bits(self) -> int:
        return math.ceil(self.decimal_digits * _LOG2_10) + self.guard_bits

    @property
    def n_mach(self) -> int:
        return self.decimal_digits

    @property
    def repr_digits(self) -> int:
        """Significant digits needed for a lossless decimal round trip."""
        return 1 + math.ceil(self.bits * math.log10(2))

    def local(self) -> gmpy2.context:
        """Fresh gmpy2 context for a ``with`` block (re-entrant, thread-local)."""
        return self.gmp.copy()

    def raw(self, x) -> mpfr:
        """Convert ``x`` (int, str, Fraction-like, BigScalar, mpfr) to a rounded ``mpfr``."""
        if isinstance(x, BigScalar):
            self.check(x)
            return x.value
        if isinstance(x, str):
            return parse_decimal(x, self).value
        if isinstance(x, float):
            raise TypeError("binary floats are not accepted; pass a decimal string")
        with self.local():
            return mpfr(x)

    def scalar(self, x) -> "BigScalar":
        return BigScalar(self.raw(x), self)

    def vector(self, xs: Iterable) -> "Vector":
        return Vector([self.raw(x) for x in xs], self)

    def matrix(self, rows: Iterable[Iterable]) -> "Matrix":
        return Matrix([[self.raw(x) for x in row] for row in rows], self)

    def zero(self) -> "BigScalar":
        return BigScalar(self.gmp.plus(mpfr(0)), self)

    def one(self) -> "BigScalar":
        return BigScalar(self.gmp.plus(mpfr(1)), self)

    def check(self, obj) -> None:
        other = obj.ctx
        if other is not self and other != self:
            raise ContextMismatchError(
                f"operand has {other.decimal_digits} digits/{other.guard_bits} guard bits, "
                f"expected {self.decimal_digits}/{self.guard_bits}"
            )


@lru_cache(maxsize=None)
def make_context(decimal_digits: int, guard_bits: int = 0) -> PrecisionContext:
    """Return the (memoized) context for ``decimal_digits`` digits.

    Raises :class:`PrecisionError` below ``MIN_DIGITS`` or above ``MAX_DIGITS``.
    """
    return PrecisionContext(decimal_digits, guard_bits)


class BigScalar:
    """Immutable arbitrary-precision real bound to one context."""

    __slots__ = ("value", "ctx")

    def __init__(self, value: mpfr, ctx: PrecisionContext):
        self.value = value
        self.ctx = ctx

    def _other(self, other) -> mpfr:
        if isinstance(other, BigScalar):
            self.ctx.check(other)
            return other.value
        if isinstance(other, int):
            return other
        if isinstance(other, float):
            raise TypeError("mixing BigScalar with float; use a decimal string")
        return NotImplemented

    def _wrap(self, v) -> "BigScalar":
        return BigScalar(v, self.ctx)

    def __add__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self._wrap(self.ctx.gmp.add(self.value, o))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self._wrap(self.ctx.gmp.sub(self.value, o))

    def __rsub__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self._wrap(self.ctx.gmp.sub(o, self.value))

    def __mul__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self._wrap(self.ctx.gmp.mul(self.value, o))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        if o == 0:
            raise ZeroDivisionError("BigScalar division by zero")
        return self._wrap(self.ctx.gmp.div(self.value, o))

    def __rtruediv__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        if self.value == 0:
            raise ZeroDivisionError("BigScalar division by zero")
        return self._wrap(self.ctx.gmp.div(o, self.value))

    def __pow__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self._wrap(self.ctx.gmp.pow(self.value, o))

    def __neg__(self):
        return self._wrap(self.ctx.gmp.minus(self.value))

    def __pos__(self):
        return self

    def __abs__(self):
        return self._wrap(self.ctx.gmp.abs(self.value))

    def sqrt(self) -> "BigScalar":
        if self.value < 0:
            raise ValueError("sqrt of negative BigScalar")
        return self._wrap(self.ctx.gmp.sqrt(self.value))

    def exp(self) -> "BigScalar":
        return self._wrap(self.ctx.gmp.exp(self.value))

    def log(self) -> "BigScalar":
        if self.value <= 0:
            raise ValueError("log of non-positive BigScalar")
        return self._wrap(self.ctx.gmp.log(self.value))

    def log10(self) -> "BigScalar":
        if self.value <= 0:
            raise ValueError("log10 of non-positive BigScalar")
        return self._wrap(self.ctx.gmp.log10(self.value))

    def _cmp_value(self, other):
        o = self._other(other)
        if o is NotImplemented:
            raise TypeError(f"cannot compare BigScalar with {type(other).__name__}")
        return o

    def __eq__(self, other):
        if not isinstance(other, (BigScalar, int)):
            return NotImplemented
        return self.value == self._cmp_value(other)

    def __lt__(self, other):
        return self.value < self._cmp_value(other)

    def __le__(self, other):
        return self.value <= self._cmp_value(other)

    def __gt__(self, other):
        return self.value > self._cmp_value(other)

    def __ge__(self, other):
        return self.value >= self._cmp_value(other)

    def __hash__(self):
        return hash((self.value, self.ctx.decimal_digits, self.ctx.guard_bits))

    def __float__(self):
        return float(self.value)

    def __bool__(self):
        return bool(self.value)

    def __str__(self):
        return format_decimal(self)

    def __repr__(self):
        return f"BigScalar('{format_decimal(self)}', digits={self.ctx.decimal_digits})"

    def mantissa_exponent(self, ndigits: int = 6) -> tuple[str, int]:
        """Split into a decimal mantissa string in [1, 10) and a power of ten."""
        return _mantissa_exponent(self.value, ndigits)


# -- decimal strings --------------------------------------------------------

def _scan_decimal(s: str) -> None:
    """Validate ``[sign] digits [. digits] [e [sign] digits]``; raise at the first bad char."""
    i, n = 0, len(s)
    if n == 0:
        raise DecimalParseError("empty string", s, 0)
    if s[i] in "+-":
        i += 1
    int_digits = 0
    while i < n and s[i].isdigit() and s[i].isascii():
        i += 1
        int_digits += 1
    frac_digits = 0
    if i < n and s[i] == ".":
        i += 1
        while i < n and s[i].isdigit() and s[i].isascii():
            i += 1
            frac_digits += 1
    if int_digits + frac_digits == 0:
        raise DecimalParseError("expected a digit", s, i)
    if i < n and s[i] in "eE":
        i += 1
        if i < n and s[i] in "+-":
            i += 1
        exp_digits = 0
        while i < n and s[i].isdigit() and s[i].isascii():
            i += 1
            exp_digits += 1
        if exp_digits == 0:
            raise DecimalParseError("expected exponent digits", s, i)
    if i != n:
        raise DecimalParseError(f"unexpected character {s[i]!r}", s, i)


def parse_decimal(s: str, ctx: PrecisionContext) -> BigScalar:
    """Parse a decimal/scientific literal, correctly rounded to ``ctx``."""
    s = s.strip()
    _scan_decimal(s)
    return BigScalar(mpfr(s, ctx.bits), ctx)


def _mantissa_exponent(v: mpfr, ndigits: int) -> tuple[str, int]:
    if not gmpy2.is_finite(v):
        raise ValueError(f"non-finite value {v!r}")
    if v == 0:
        return "0." + "0" * (ndigits - 1) if ndigits > 1 else "0", 0
    mant, exp, _ = v.digits(10, ndigits)
    sign = ""
    if mant[0] == "-":
        sign, mant = "-", mant[1:]
    body = mant[0] + ("." + mant[1:] if len(mant) > 1 else "")
    return sign + body, exp - 1


def format_raw(v: mpfr, ndigits: int) -> str:
    mant, exp = _mantissa_exponent(v, ndigits)
    return f"{mant}e{exp:+d}"


def format_decimal(x: BigScalar, digits: int | None = None) -> str:
    """Scientific-notation string of ``x``.

    With ``digits=None`` the context's ``repr_digits`` are emitted, which is
    enough for :func:`parse_decimal` to recover ``x`` bit for bit.  Passing
    ``digits=ctx.decimal_digits`` gives the requested-precision rendering.
    """
    return format_raw(x.value, digits or x.ctx.repr_digits)


# -- vectors and matrices ---------------------------------------------------

class Vector(Sequence):
    """Fixed-length vector of ``mpfr`` entries sharing one context."""

    __slots__ = ("raw", "ctx")

    def __init__(self, entries: Sequence[mpfr], ctx: PrecisionContext):
        self.raw = list(entries)
        self.ctx = ctx

    def __len__(self):
        return len(self.raw)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Vector(self.raw[i], self.ctx)
        return BigScalar(self.raw[i], self.ctx)

    def __eq__(self, other):
        if not isinstance(other, Vector):
            return NotImplemented
        return self.ctx == other.ctx and self.raw == other.raw

    def __add__(self, other: "Vector") -> "Vector":
        self.ctx.check(other)
        with self.ctx.local():
            return Vector([a + b for a, b in zip(self.raw, other.raw)], self.ctx)

    def __sub__(self, other: "Vector") -> "Vector":
        self.ctx.check(other)
        with self.ctx.local():
            return Vector([a - b for a, b in zip(self.raw, other.raw)], self.ctx)

    def scale(self, c) -> "Vector":
        c = self.ctx.raw(c)
        with self.ctx.local():
            return Vector([c * a for a in self.raw], self.ctx)

    def norm2(self) -> BigScalar:
        return BigScalar(norm2_raw(self.raw, self.ctx), self.ctx)

    def norm_inf(self) -> BigScalar:
        return BigScalar(max((abs(a) for a in self.raw), default=mpfr(0)), self.ctx)

    def strings(self, digits: int | None = None) -> list[str]:
        n = digits or self.ctx.repr_digits
        return [format_raw(a, n) for a in self.raw]

    def __repr__(self):
        return f"Vector({self.strings(8)}, digits={self.ctx.decimal_digits})"


class Matrix:
    """Dense row-major matrix of ``mpfr`` entries sharing one context."""

    __slots__ = ("raw", "ctx")

    def __init__(self, rows: Sequence[Sequence[mpfr]], ctx: PrecisionContext):
        self.raw = [list(r) for r in rows]
        ncols = {len(r) for r in self.raw}
        if len(ncols) > 1:
            raise ValueError("ragged matrix rows")
        self.ctx = ctx

    @classmethod
    def identity(cls, n: int, ctx: PrecisionContext) -> "Matrix":
        return cls([[mpfr(int(i == j)) for j in range(n)] for i in range(n)], ctx)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.raw), (len(self.raw[0]) if self.raw else 0)

    def __getitem__(self, ij):
        i, j = ij
        return BigScalar(self.raw[i][j], self.ctx)

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.ctx == other.ctx and self.raw == other.raw

    def transpose(self) -> "Matrix":
        return Matrix([list(c) for c in zip(*self.raw)], self.ctx)

    def __matmul__(self, other):
        self.ctx.check(other)
        with self.ctx.local():
            if isinstance(other, Vector):
                return Vector(matvec_raw(self.raw, other.raw), self.ctx)
            if isinstance(other, Matrix):
                cols = list(zip(*other.raw))
                return Matrix(
                    [[gmpy2.fsum([a * b for a, b in zip(row, c)]) for c in cols] for row in self.raw],
                    self.ctx,
                )
        return NotImplemented

    def norm_frobenius(self) -> BigScalar:
        return BigScalar(norm2_raw([a for r in self.raw for a in r], self.ctx), self.ctx)

    def __repr__(self):
        return f"Matrix({self.shape[0]}x{self.shape[1]}, digits={self.ctx.decimal_digits})"


def norm2_raw(xs: Sequence[mpfr], ctx: PrecisionContext) -> mpfr:
    with ctx.local():
        return gmpy2.sqrt(gmpy2.fsum([a * a for a in xs]))


def matvec_raw(A: Sequence[Sequence[mpfr]], x: Sequence[mpfr]) -> list[mpfr]:
    """Matrix-vector product in the thread's current gmpy2 context."""
    return [gmpy2.fsum([a * b for a, b in zip(row, x)]) for row in A]


# -- dense linear algebra ---------------------------------------------------

def lu_factor(A: list[list[mpfr]], tiny) -> tuple[list[list[mpfr]], list[int]]:
    """In-place LU with partial pivoting; current gmpy2 context must be active.

    Raises :class:`SingularMatrixError` when a pivot magnitude is ``<= tiny``.
    """
    n = len(A)
    perm = list(range(n))
    for k in range(n):
        p = max(range(k, n), key=lambda i: abs(A[i][k]))
        piv = A[p][k]
        if abs(piv) <= tiny:
            raise SingularMatrixError(abs(piv), k)
        if p != k:
            A[k], A[p] = A[p], A[k]
            perm[k], perm[p] = perm[p], perm[k]
        rowk = A[k]
        inv = 1 / piv
        for i in range(k + 1, n):
            rowi = A[i]
            m = rowi[k] * inv
            if m:
                rowi[k] = m
                for j in range(k + 1, n):
                    rowi[j] -= m * rowk[j]
            else:
                rowi[k] = m
    return A, perm


def lu_solve(LU: list[list[mpfr]], perm: list[int], b: Sequence[mpfr]) -> list[mpfr]:
    n = len(LU)
    y = [b[p] for p in perm]
    for i in range(1, n):
        row = LU[i]
        s = y[i]
        for j in range(i):
            s -= row[j] * y[j]
        y[i] = s
    for i in range(n - 1, -1, -1):
        row = LU[i]
        s = y[i]
        for j in range(i + 1, n):
            s -= row[j] * y[j]
        y[i] = s / row[i]
    return y


def linsolve(A: Matrix, b: Vector) -> Vector:
    """Solve ``A x = b`` by Gaussian elimination with row pivoting.

    A pivot below ``N * eps * max|A_ij|`` is treated as singular to working
    precision and raises :class:`SingularMatrixError` carrying its magnitude.
    """
    ctx = A.ctx
    ctx.check(b)
    n, m = A.shape
    if n != m or len(b) != n:
        raise ValueError(f"shape mismatch: A is {n}x{m}, b has {len(b)}")
    with ctx.local():
        scale = max((abs(a) for r in A.raw for a in r), default=mpfr(0))
        tiny = n * ctx.eps.value * scale
        LU, perm = lu_factor([list(r) for r in A.raw], tiny)
        return Vector(lu_solve(LU, perm, b.raw), ctx)


SPECTRAL_TOL = 1e-8
SPECTRAL_MAX_ITERS = 10000


def spectral_norm(A: Matrix, tol: float = SPECTRAL_TOL, max_iters: int = SPECTRAL_MAX_ITERS) -> BigScalar:
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    Iterates until the Rayleigh quotient changes by less than ``tol``
    relatively, at most ``max_iters`` times (then :class:`ConvergenceError`
    with the last iterate).
    """
    ctx = A.ctx
    n, m = A.shape
    if n != m:
        raise ValueError("spectral_norm needs a square matrix")
    with ctx.local():
        At = [list(c) for c in zip(*A.raw)]
        AtA = [[gmpy2.fsum([a * b for a, b in zip(ri, rj)]) for rj in At] for ri in At]
        # deterministic start with no special symmetry
        v = [mpfr(1) + mpfr(i) / (n + 1) for i in range(n)]
        lam_old = mpfr(0)
        delta_old = None
        for it in range(max_iters):
            w = matvec_raw(AtA, v)
            nw = gmpy2.sqrt(gmpy2.fsum([a * a for a in w]))
            if nw == 0:
                return ctx.zero()
            nv = gmpy2.sqrt(gmpy2.fsum([a * a for a in v]))
            lam = nw / nv
            v = [a / nw for a in w]
            if it > 0:
                delta = abs(lam - lam_old)
                # geometric tail estimate: remaining error ~ delta * r / (1 - r)
                r = delta / delta_old if delta_old else mpfr(0)
                if r < 1 and delta * (1 + r / (1 - r)) <= tol * lam:
                    return BigScalar(gmpy2.sqrt(lam), ctx)
                delta_old = delta
            lam_old = lam
        raise ConvergenceError(
            f"power iteration did not converge in {max_iters} iterations",
            last=BigScalar(gmpy2.sqrt(lam_old), ctx),
        )
