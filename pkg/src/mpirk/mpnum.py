"""Multiple-precision scalars, vectors, matrices and factorizations.

Everything in this package computes with binary floating-point numbers of a
caller-chosen significand width (MPFR via gmpy2, round to nearest even).  A
:class:`PrecisionContext` pins the width; vectors and matrices carry the
context they were built with, and every operation rounds in that context.

gmpy2 rounds bare operators in the *thread* context, which is 53 bits unless
someone changed it.  To stay independent of ambient state, all arithmetic here
goes through context-bound methods (``ctx.add``, ``ctx.fma``, ...).  User code
that wants infix operators at a given width can use ``ctx.activate()``.
"""

import math
from fractions import Fraction

import gmpy2
import numpy as np
from gmpy2 import mpfr


class LinAlgError(Exception):
    """Base class for numerical failures raised by this module."""


class DimensionMismatch(LinAlgError):
    """Operands have incompatible shapes or precision contexts."""


class SingularMatrix(LinAlgError):
    """A zero pivot was met during factorization."""


class NonFiniteValue(LinAlgError):
    """An inf or nan appeared where a finite value is required."""


class PrecisionContext:
    """Floating-point context with a fixed significand width in bits.

    Parameters
    ----------
    bits : int
        Significand width.  Must be at least 2; practical use starts at 24.

    Notes
    -----
    Instances are immutable and safe to share.  The arithmetic methods
    (``add``, ``sub``, ``mul``, ``div``, ``fma``, ``fms``, ``sqrt``, ``abs``,
    ``neg``, ``square``, ``exp``, ``log``, ``sin``, ``cos``, ``hypot``) are
    bound gmpy2 context methods: they round to this context regardless of the
    thread context, which keeps library code correct inside arbitrary callers.
    """

    __slots__ = ("bits", "_g", "add", "sub", "mul", "div", "fma", "fms",
                 "sqrt", "abs", "neg", "square", "exp", "log", "sin", "cos",
                 "hypot")

    def __init__(self, bits):
        bits = int(bits)
        if bits < 2:
            raise ValueError("precision must be at least 2 bits")
        self.bits = bits
        g = gmpy2.context(precision=bits)
        self._g = g
        self.add = g.add
        self.sub = g.sub
        self.mul = g.mul
        self.div = g.div
        self.fma = g.fma
        self.fms = g.fms
        self.sqrt = g.sqrt
        self.abs = g.abs
        self.neg = g.minus
        self.square = g.square
        self.exp = g.exp
        self.log = g.log
        self.sin = g.sin
        self.cos = g.cos
        self.hypot = g.hypot

    @classmethod
    def from_digits(cls, digits):
        """Context holding at least `digits` significant decimal digits."""
        digits = int(digits)
        if digits < 1:
            raise ValueError("need at least one decimal digit")
        return cls(math.ceil(digits * math.log2(10)))

    @property
    def eps(self):
        """Unit roundoff gap 2**(1-bits) as an mpfr of this context."""
        return gmpy2.mpfr(gmpy2.exp2(1 - self.bits), precision=self.bits)

    def scalar(self, value):
        """Convert an int, float, str, Fraction or mpfr, correctly rounded."""
        if isinstance(value, Fraction):
            value = gmpy2.mpq(value.numerator, value.denominator)
        x = gmpy2.mpfr(value, precision=self.bits)
        if not gmpy2.is_finite(x):
            raise NonFiniteValue(f"scalar({value!r}) is not finite")
        return x

    def const_pi(self):
        return self._g.const_pi()

    def activate(self):
        """Fresh gmpy2 context manager: ``with ctx.activate(): ...``.

        Returns a copy each call; gmpy2 refuses to re-enter one object.
        """
        return self._g.copy()

    def __eq__(self, other):
        return isinstance(other, PrecisionContext) and other.bits == self.bits

    def __hash__(self):
        return hash(("PrecisionContext", self.bits))

    def __repr__(self):
        return f"PrecisionContext(bits={self.bits})"


def _same_ctx(a, b):
    if a.ctx.bits != b.ctx.bits:
        raise DimensionMismatch(
            f"context mismatch: {a.ctx.bits} vs {b.ctx.bits} bits")


class MPVector:
    """Dense vector of mpfr entries sharing one precision context.

    Entries are mutable during construction; treat instances handed to or
    returned from solvers as frozen (nothing in this package mutates them
    after return, which is what makes read-only sharing safe).
    """

    __slots__ = ("data", "ctx")

    def __init__(self, data, ctx):
        self.data = data
        self.ctx = ctx

    @classmethod
    def zeros(cls, n, ctx):
        z = mpfr(0)
        return cls([z] * n, ctx)

    @classmethod
    def from_values(cls, values, ctx):
        return cls([ctx.scalar(v) for v in values], ctx)

    @classmethod
    def concat(cls, parts):
        ctx = parts[0].ctx
        data = []
        for p in parts:
            _same_ctx(parts[0], p)
            data.extend(p.data)
        return cls(data, ctx)

    def split(self, m):
        """Split into m equal blocks."""
        n, r = divmod(len(self.data), m)
        if r:
            raise DimensionMismatch(f"cannot split length {len(self.data)} into {m} blocks")
        return [MPVector(self.data[i * n:(i + 1) * n], self.ctx) for i in range(m)]

    def copy(self):
        return MPVector(list(self.data), self.ctx)

    def __len__(self):
        return len(self.data)

    def __iter__(self):
        return iter(self.data)

    def __getitem__(self, i):
        return self.data[i]

    def __setitem__(self, i, v):
        self.data[i] = v

    def __add__(self, other):
        _same_ctx(self, other)
        if len(other.data) != len(self.data):
            raise DimensionMismatch("vector length mismatch")
        add = self.ctx.add
        return MPVector([add(a, b) for a, b in zip(self.data, other.data)], self.ctx)

    def __sub__(self, other):
        _same_ctx(self, other)
        if len(other.data) != len(self.data):
            raise DimensionMismatch("vector length mismatch")
        sub = self.ctx.sub
        return MPVector([sub(a, b) for a, b in zip(self.data, other.data)], self.ctx)

    def __neg__(self):
        neg = self.ctx.neg
        return MPVector([neg(a) for a in self.data], self.ctx)

    def scale(self, alpha):
        mul = self.ctx.mul
        return MPVector([mul(alpha, a) for a in self.data], self.ctx)

    def axpy(self, alpha, x):
        """self + alpha*x with one rounding per entry."""
        _same_ctx(self, x)
        fma = self.ctx.fma
        return MPVector([fma(alpha, b, a) for a, b in zip(self.data, x.data)], self.ctx)

    def dot(self, other):
        _same_ctx(self, other)
        if len(other.data) != len(self.data):
            raise DimensionMismatch("vector length mismatch")
        fma = self.ctx.fma
        s = mpfr(0)
        for a, b in zip(self.data, other.data):
            s = fma(a, b, s)
        return s

    def norm_inf(self):
        cabs = self.ctx.abs
        m = mpfr(0)
        for a in self.data:
            v = cabs(a)
            if v > m:
                m = v
        return m

    def norm_2(self):
        fma = self.ctx.fma
        s = mpfr(0)
        for a in self.data:
            s = fma(a, a, s)
        return self.ctx.sqrt(s)

    def to_floats(self):
        return np.array([float(a) for a in self.data], dtype=np.float64)

    @classmethod
    def from_floats(cls, arr, ctx):
        return cls([ctx.scalar(float(v)) for v in arr], ctx)

    def __repr__(self):
        return f"MPVector(n={len(self.data)}, bits={self.ctx.bits})"


class MPMatrix:
    """Dense row-major matrix of mpfr entries in one precision context."""

    __slots__ = ("rows", "cols", "data", "ctx")

    def __init__(self, data, ctx):
        self.data = data
        self.rows = len(data)
        self.cols = len(data[0]) if data else 0
        self.ctx = ctx

    @classmethod
    def zeros(cls, rows, cols, ctx):
        z = mpfr(0)
        return cls([[z] * cols for _ in range(rows)], ctx)

    @classmethod
    def identity(cls, n, ctx):
        z, one = mpfr(0), mpfr(1)
        data = [[z] * n for _ in range(n)]
        for i in range(n):
            data[i][i] = one
        return cls(data, ctx)

    @classmethod
    def from_rows(cls, rows, ctx):
        return cls([[ctx.scalar(v) for v in row] for row in rows], ctx)

    def copy(self):
        return MPMatrix([row[:] for row in self.data], self.ctx)

    def __getitem__(self, key):
        i, j = key
        return self.data[i][j]

    def __setitem__(self, key, v):
        i, j = key
        self.data[i][j] = v

    def __sub__(self, other):
        _same_ctx(self, other)
        if (other.rows, other.cols) != (self.rows, self.cols):
            raise DimensionMismatch("matrix shape mismatch")
        sub = self.ctx.sub
        return MPMatrix([[sub(a, b) for a, b in zip(ra, rb)]
                         for ra, rb in zip(self.data, other.data)], self.ctx)

    def __add__(self, other):
        _same_ctx(self, other)
        if (other.rows, other.cols) != (self.rows, self.cols):
            raise DimensionMismatch("matrix shape mismatch")
        add = self.ctx.add
        return MPMatrix([[add(a, b) for a, b in zip(ra, rb)]
                         for ra, rb in zip(self.data, other.data)], self.ctx)

    def scale(self, alpha):
        mul = self.ctx.mul
        return MPMatrix([[mul(alpha, a) for a in row] for row in self.data], self.ctx)

    def transpose(self):
        return MPMatrix([list(col) for col in zip(*self.data)], self.ctx)

    def matvec(self, v):
        _same_ctx(self, v)
        if len(v.data) != self.cols:
            raise DimensionMismatch(
                f"matvec: {self.rows}x{self.cols} with length {len(v.data)}")
        fma = self.ctx.fma
        x = v.data
        out = []
        for row in self.data:
            s = mpfr(0)
            for a, b in zip(row, x):
                s = fma(a, b, s)
            out.append(s)
        return MPVector(out, self.ctx)

    def matmul(self, other):
        _same_ctx(self, other)
        if other.rows != self.cols:
            raise DimensionMismatch(
                f"matmul: {self.rows}x{self.cols} with {other.rows}x{other.cols}")
        fma = self.ctx.fma
        bt = list(zip(*other.data))
        out = []
        for row in self.data:
            orow = []
            for col in bt:
                s = mpfr(0)
                for a, b in zip(row, col):
                    s = fma(a, b, s)
                orow.append(s)
            out.append(orow)
        return MPMatrix(out, self.ctx)

    def norm_inf(self):
        cabs, add = self.ctx.abs, self.ctx.add
        m = mpfr(0)
        for row in self.data:
            s = mpfr(0)
            for a in row:
                s = add(s, cabs(a))
            if s > m:
                m = s
        return m

    def to_float_array(self):
        return np.array([[float(a) for a in row] for row in self.data],
                        dtype=np.float64)

    @classmethod
    def from_float_array(cls, arr, ctx):
        return cls([[ctx.scalar(float(v)) for v in row] for row in np.asarray(arr)], ctx)

    def __repr__(self):
        return f"MPMatrix({self.rows}x{self.cols}, bits={self.ctx.bits})"


class BandedMatrix:
    """Band matrix with kl sub- and ku superdiagonals, LAPACK band storage.

    Entry (i, j) lives at ``ab[ku + i - j][j]`` when ``-ku <= i - j <= kl``;
    everything outside the band is structurally zero.
    """

    __slots__ = ("n", "kl", "ku", "ab", "ctx")

    def __init__(self, n, kl, ku, ab, ctx):
        self.n = n
        self.kl = kl
        self.ku = ku
        self.ab = ab
        self.ctx = ctx

    @property
    def rows(self):
        return self.n

    @property
    def cols(self):
        return self.n

    @classmethod
    def zeros(cls, n, kl, ku, ctx):
        z = mpfr(0)
        ab = [[z] * n for _ in range(kl + ku + 1)]
        return cls(n, kl, ku, ab, ctx)

    @classmethod
    def from_dense(cls, dense, kl, ku):
        n = dense.rows
        if dense.cols != n:
            raise DimensionMismatch("banded storage needs a square matrix")
        out = cls.zeros(n, kl, ku, dense.ctx)
        for i in range(n):
            for j in range(max(0, i - kl), min(n, i + ku + 1)):
                out.ab[ku + i - j][j] = dense.data[i][j]
        return out

    def entry(self, i, j):
        d = i - j
        if -self.ku <= d <= self.kl:
            return self.ab[self.ku + d][j]
        return mpfr(0)

    def set_entry(self, i, j, v):
        d = i - j
        if not (-self.ku <= d <= self.kl):
            raise DimensionMismatch(f"({i},{j}) is outside the band")
        self.ab[self.ku + d][j] = v

    def to_dense(self):
        out = MPMatrix.zeros(self.n, self.n, self.ctx)
        for i in range(self.n):
            for j in range(max(0, i - self.kl), min(self.n, i + self.ku + 1)):
                out.data[i][j] = self.ab[self.ku + i - j][j]
        return out

    def matvec(self, v):
        """Banded matvec, O(n*(kl+ku+1)) flops.

        Columns are visited in the same ascending order a dense row walk
        would use, so the result is bit-identical to a dense matvec of the
        same matrix (skipped entries are exact zeros).
        """
        _same_ctx(self, v)
        if len(v.data) != self.n:
            raise DimensionMismatch("matvec length mismatch")
        fma = self.ctx.fma
        n, kl, ku, ab, x = self.n, self.kl, self.ku, self.ab, v.data
        out = []
        for i in range(n):
            s = mpfr(0)
            for j in range(max(0, i - kl), min(n, i + ku + 1)):
                s = fma(ab[ku + i - j][j], x[j], s)
            out.append(s)
        return MPVector(out, self.ctx)

    def to_float_band(self, extra_rows=0):
        """LAPACK-style float64 band array with `extra_rows` zero rows on top
        (pass kl to get the gbtrf working layout)."""
        out = np.zeros((extra_rows + self.kl + self.ku + 1, self.n), dtype=np.float64)
        for r in range(self.kl + self.ku + 1):
            out[extra_rows + r, :] = [float(a) for a in self.ab[r]]
        return out

    def __repr__(self):
        return (f"BandedMatrix(n={self.n}, kl={self.kl}, ku={self.ku}, "
                f"bits={self.ctx.bits})")


def convert(obj, ctx):
    """Re-round a scalar, MPVector, MPMatrix or BandedMatrix into `ctx`.

    Each entry is rounded once, to nearest even.  Raises NonFiniteValue if
    any entry is inf or nan (widening must stay lossless; narrowing must not
    hide overflow).
    """
    bits = ctx.bits

    def conv(x):
        y = gmpy2.mpfr(x, precision=bits)
        if not gmpy2.is_finite(y):
            raise NonFiniteValue("non-finite value in conversion")
        return y

    if isinstance(obj, MPVector):
        return MPVector([conv(a) for a in obj.data], ctx)
    if isinstance(obj, (list, tuple)):
        return [convert(a, ctx) for a in obj]
    if isinstance(obj, MPMatrix):
        return MPMatrix([[conv(a) for a in row] for row in obj.data], ctx)
    if isinstance(obj, BandedMatrix):
        ab = [[conv(a) for a in row] for row in obj.ab]
        return BandedMatrix(obj.n, obj.kl, obj.ku, ab, ctx)
    return conv(obj)


class LUFactorization:
    """PA = LU with partial pivoting, stored packed (unit lower L)."""

    __slots__ = ("lu", "perm", "n", "ctx")

    def __init__(self, lu, perm, ctx):
        self.lu = lu
        self.perm = perm
        self.n = len(lu)
        self.ctx = ctx

    def solve(self, b):
        """Solve A x = b for one right-hand side."""
        if isinstance(b, MPVector):
            if len(b.data) != self.n:
                raise DimensionMismatch("solve: length mismatch")
            _same_ctx(self, b)
            bd = b.data
        else:
            bd = b
        lu, n = self.lu, self.n
        fma, neg, div = self.ctx.fma, self.ctx.neg, self.ctx.div
        x = [bd[p] for p in self.perm]
        for i in range(1, n):
            row = lu[i]
            s = x[i]
            for j in range(i):
                s = fma(neg(row[j]), x[j], s)
            x[i] = s
        for i in range(n - 1, -1, -1):
            row = lu[i]
            s = x[i]
            for j in range(i + 1, n):
                s = fma(neg(row[j]), x[j], s)
            x[i] = div(s, row[i])
        return MPVector(x, self.ctx)

    def solve_many(self, columns):
        return [self.solve(c) for c in columns]

    def inverse(self):
        n = self.n
        z, one = mpfr(0), mpfr(1)
        cols = []
        for j in range(n):
            e = [z] * n
            e[j] = one
            cols.append(self.solve(e).data)
        return MPMatrix([list(r) for r in zip(*cols)], self.ctx)


def lu_factor(matrix):
    """LU with partial pivoting of a square MPMatrix.

    Raises SingularMatrix on an exactly zero pivot column.
    """
    n = matrix.rows
    if matrix.cols != n:
        raise DimensionMismatch("lu_factor needs a square matrix")
    ctx = matrix.ctx
    cabs, div, fma, neg = ctx.abs, ctx.div, ctx.fma, ctx.neg
    lu = [row[:] for row in matrix.data]
    perm = list(range(n))
    for k in range(n):
        p = k
        amax = cabs(lu[k][k])
        for i in range(k + 1, n):
            a = cabs(lu[i][k])
            if a > amax:
                amax, p = a, i
        if amax == 0:
            raise SingularMatrix(f"zero pivot in column {k}")
        if p != k:
            lu[k], lu[p] = lu[p], lu[k]
            perm[k], perm[p] = perm[p], perm[k]
        rowk = lu[k]
        piv = rowk[k]
        for i in range(k + 1, n):
            rowi = lu[i]
            l = div(rowi[k], piv)
            rowi[k] = l
            if l != 0:
                nl = neg(l)
                for j in range(k + 1, n):
                    rowi[j] = fma(nl, rowk[j], rowi[j])
    return LUFactorization(lu, perm, ctx)


class BandLUFactorization:
    """Banded PA = LU (unblocked gbtrf layout, partial pivoting)."""

    __slots__ = ("ab", "ipiv", "n", "kl", "ku", "ctx")

    def __init__(self, ab, ipiv, n, kl, ku, ctx):
        self.ab = ab
        self.ipiv = ipiv
        self.n = n
        self.kl = kl
        self.ku = ku
        self.ctx = ctx

    def solve(self, b):
        if isinstance(b, MPVector):
            if len(b.data) != self.n:
                raise DimensionMismatch("solve: length mismatch")
            _same_ctx(self, b)
            x = list(b.data)
        else:
            x = list(b)
        ab, n, kl, ctx = self.ab, self.n, self.kl, self.ctx
        kw = self.kl + self.ku  # working upper bandwidth after fill-in
        fma, neg, div = ctx.fma, ctx.neg, ctx.div
        for j in range(n):
            p = self.ipiv[j]
            if p != j:
                x[j], x[p] = x[p], x[j]
            xj = x[j]
            if xj != 0:
                for i in range(j + 1, min(n, j + kl + 1)):
                    x[i] = fma(neg(ab[kw + i - j][j]), xj, x[i])
        for j in range(n - 1, -1, -1):
            s = x[j]
            for c in range(j + 1, min(n, j + kw + 1)):
                s = fma(neg(ab[kw + j - c][c]), x[c], s)
            x[j] = div(s, ab[kw][j])
        return MPVector(x, ctx)


def band_lu_factor(banded):
    """LU of a BandedMatrix with partial pivoting.

    Fill-in widens the upper bandwidth to kl+ku; storage follows the LAPACK
    gbtrf convention (kl extra rows on top, multipliers below the diagonal).
    """
    n, kl, ku, ctx = banded.n, banded.kl, banded.ku, banded.ctx
    kw = kl + ku
    z = mpfr(0)
    ab = [[z] * n for _ in range(kl)]
    ab.extend(row[:] for row in banded.ab)
    cabs, div, fma, neg = ctx.abs, ctx.div, ctx.fma, ctx.neg
    ipiv = list(range(n))

    def get(i, j):
        return ab[kw + i - j][j]

    def put(i, j, v):
        ab[kw + i - j][j] = v

    for j in range(n):
        km = min(kl, n - 1 - j)
        p = 0
        amax = cabs(get(j, j))
        for q in range(1, km + 1):
            a = cabs(get(j + q, j))
            if a > amax:
                amax, p = a, q
        if amax == 0:
            raise SingularMatrix(f"zero pivot in band column {j}")
        ipiv[j] = j + p
        if p:
            for c in range(j, min(n, j + kw + 1)):
                vj, vp = get(j, c), get(j + p, c)
                put(j, c, vp)
                put(j + p, c, vj)
        piv = get(j, j)
        for q in range(1, km + 1):
            put(j + q, j, div(get(j + q, j), piv))
        for c in range(j + 1, min(n, j + kw + 1)):
            ajc = get(j, c)
            if ajc != 0:
                najc = neg(ajc)
                for q in range(1, km + 1):
                    put(j + q, c, fma(get(j + q, j), najc, get(j + q, c)))
    return BandLUFactorization(ab, ipiv, n, kl, ku, ctx)


def cond_inf(matrix):
    """Infinity-norm condition number via explicit inverse (small matrices)."""
    inv = lu_factor(matrix).inverse()
    return matrix.ctx.mul(matrix.norm_inf(), inv.norm_inf())


def mpfr_to_hex(x):
    """Lossless text form "<hex mantissa>p<exponent>", value = mantissa * 2**exp."""
    if not gmpy2.is_finite(x):
        raise NonFiniteValue("cannot serialize non-finite value")
    if x == 0:
        return "-0p0" if gmpy2.is_signed(x) else "0p0"
    m, e = x.as_mantissa_exp()
    return f"{m.digits(16)}p{int(e)}"


def mpfr_from_hex(text, ctx):
    """Parse the output of mpfr_to_hex, exact at any ctx wide enough."""
    text = text.strip()
    if text.startswith("-"):
        s = "-0x" + text[1:]
    else:
        s = "0x" + text
    try:
        return gmpy2.mpfr(s, ctx.bits, 16)
    except ValueError as exc:
        raise ValueError(f"bad hex float {text!r}") from exc


def mpfr_to_decimal(x, sig=40):
    """Round to `sig` significant decimal digits, scientific notation."""
    if gmpy2.is_nan(x):
        return "nan"
    if gmpy2.is_infinite(x):
        return "-inf" if x < 0 else "inf"
    mant, exp, _ = x.digits(10, sig)
    neg = mant.startswith("-")
    digs = mant[1:] if neg else mant
    if digs.strip("0") == "":
        return "0.0"
    body = f"{digs[0]}.{digs[1:]}" if len(digs) > 1 else f"{digs[0]}.0"
    return f"{'-' if neg else ''}{body}e{exp - 1:+03d}"
