"""Benchmark initial value problems with analytic Jacobians.

Each factory returns an immutable IVProblem whose f/jac are pure closures
over data precomputed at the requested precision.  Exact solutions are
attached where a closed form exists; the stiff problems rely on
self-convergence references instead.
"""

import random
import re
from fractions import Fraction

from gmpy2 import mpfr

from .mpnum import BandedMatrix, MPMatrix, MPVector, lu_factor


class IVProblem:
    """One initial value problem y' = f(x, y), y(x0) = y0.

    f maps (x, y) to an MPVector; jac maps (x, y) to an MPMatrix or a
    BandedMatrix (kl/ku mirror the declared bandwidth in that case); exact,
    when present, maps x to the true solution.  seed records the generator
    seed actually used for randomized constructions.
    """

    __slots__ = ("name", "n", "ctx", "f", "jac", "x0", "y0", "exact", "seed",
                 "kl", "ku")

    def __init__(self, name, n, ctx, f, jac, x0, y0, exact=None, seed=None,
                 kl=None, ku=None):
        self.name = name
        self.n = n
        self.ctx = ctx
        self.f = f
        self.jac = jac
        self.x0 = x0
        self.y0 = y0
        self.exact = exact
        self.seed = seed
        self.kl = kl
        self.ku = ku

    def __repr__(self):
        return f"IVProblem({self.name}, n={self.n}, bits={self.ctx.bits})"


def make_linear_random(n, seed, ctx):
    """y' = -(R diag(n,...,1) R^-1) y, y0 = ones: eigenvalues exactly
    -n..-1, so exact(x) = R diag(e^(-n x),...,e^(-x)) R^-1 y0.

    R has uniform [-1,1] entries from the given seed; seeds giving
    cond_inf(R) >= 1e6 are skipped (next seed, at most 100 tries).
    """
    if n < 1:
        raise ValueError("dimension must be at least 1")
    used = None
    R = Rinv = None
    for trial in range(seed, seed + 100):
        rng = random.Random(trial)
        R = MPMatrix([[ctx.scalar(rng.uniform(-1.0, 1.0)) for _ in range(n)]
                      for _ in range(n)], ctx)
        try:
            Rinv = lu_factor(R).inverse()
        except Exception:
            continue
        if ctx.mul(R.norm_inf(), Rinv.norm_inf()) < 1e6:
            used = trial
            break
    if used is None:
        raise ValueError(f"no acceptably conditioned R in seeds "
                         f"{seed}..{seed + 99}")
    # A = -R D Rinv with D = diag(n, ..., 1)
    mul = ctx.mul
    DRinv = MPMatrix([[mul(mpfr(n - i), Rinv[i, j]) for j in range(n)]
                      for i in range(n)], ctx)
    A = R.matmul(DRinv).scale(mpfr(-1))
    y0 = MPVector.from_values([1] * n, ctx)
    w = Rinv.matvec(y0)

    def f(x, y):
        return A.matvec(y)

    def jac(x, y):
        return A

    def exact(x):
        decay = MPVector([mul(ctx.exp(mul(mpfr(-(n - i)), x)), w[i])
                          for i in range(n)], ctx)
        return R.matvec(decay)

    return IVProblem(f"linear{n}", n, ctx, f, jac, mpfr(0), y0, exact=exact,
                     seed=used)


def make_mxy(ctx):
    """y' = -x y, y(0) = 1, exact exp(-x^2/2)."""
    y0 = MPVector.from_values([1], ctx)

    def f(x, y):
        return MPVector([ctx.neg(ctx.mul(x, y[0]))], ctx)

    def jac(x, y):
        return MPMatrix([[ctx.neg(ctx.scalar(x))]], ctx)

    def exact(x):
        half_sq = ctx.div(ctx.square(ctx.scalar(x)), mpfr(2))
        return MPVector([ctx.exp(ctx.neg(half_sq))], ctx)

    return IVProblem("mxy", 1, ctx, f, jac, mpfr(0), y0, exact=exact)


def make_lorenz(ctx):
    """Lorenz system, sigma=10, r=470/19, b=8/3, y0=[0,1,0]."""
    sigma = ctx.scalar(10)
    r = ctx.scalar(Fraction(470, 19))
    b = ctx.scalar(Fraction(8, 3))
    y0 = MPVector.from_values([0, 1, 0], ctx)
    sub, mul, fms = ctx.sub, ctx.mul, ctx.fms

    def f(x, y):
        y1, y2, y3 = y.data
        return MPVector([
            mul(sigma, sub(y2, y1)),
            fms(y1, sub(r, y3), y2),
            fms(y1, y2, mul(b, y3)),
        ], ctx)

    def jac(x, y):
        y1, y2, y3 = y.data
        return MPMatrix([
            [ctx.neg(sigma), sigma, mpfr(0)],
            [sub(r, y3), mpfr(-1), ctx.neg(y1)],
            [y2, y1, ctx.neg(b)],
        ], ctx)

    return IVProblem("lorenz", 3, ctx, f, jac, mpfr(0), y0)


def make_vdpol(ctx):
    """Van der Pol in Lienard form with stiffness parameter 1e-6:
    y1' = y2, y2' = ((1 - y1^2) y2 - y1) * 1e6, y0 = [2, 0]."""
    inv_eps = ctx.scalar(10 ** 6)
    y0 = MPVector.from_values([2, 0], ctx)
    sub, mul, fms = ctx.sub, ctx.mul, ctx.fms

    def f(x, y):
        y1, y2 = y.data
        inner = fms(sub(mpfr(1), ctx.square(y1)), y2, y1)
        return MPVector([y2, mul(inner, inv_eps)], ctx)

    def jac(x, y):
        y1, y2 = y.data
        d21 = ctx.neg(mul(ctx.fma(mul(mpfr(2), y1), y2, mpfr(1)), inv_eps))
        d22 = mul(sub(mpfr(1), ctx.square(y1)), inv_eps)
        return MPMatrix([[mpfr(0), mpfr(1)], [d21, d22]], ctx)

    return IVProblem("vdpol", 2, ctx, f, jac, mpfr(0), y0)


def make_brusselator_1d(N, ctx, literal_reaction=False, banded=True):
    """1-D Brusselator reaction-diffusion line, N interior points,
    interleaved state (u1, v1, u2, v2, ...), bandwidth kl = ku = 2.

    u_i' = 1 + u_i^2 v_i - 4 u_i + alpha (u_{i-1} - 2 u_i + u_{i+1})
    v_i' = 3 u_i - u_i^2 v_i + alpha (v_{i-1} - 2 v_i + v_{i+1})

    with alpha = 0.02/dx^2, dx = 1/(N+1), boundaries u = 1, v = 3, and
    u_i(0) = 1 + sin(2 pi i dx), v_i(0) = 3.  literal_reaction=True swaps
    the -4u term for the constant -4 (comparison runs; that variant has no
    steady state at (1, 3)).  banded=False returns dense Jacobians built
    from the same entries.
    """
    if N < 3:
        raise ValueError("need at least 3 interior points")
    n = 2 * N
    alpha = ctx.scalar(Fraction((N + 1) ** 2, 50))
    two_alpha = ctx.mul(mpfr(2), alpha)
    add, sub, mul, fma, fms = ctx.add, ctx.sub, ctx.mul, ctx.fma, ctx.fms
    # boundary contributions: u = 1 and v = 3 enter the end stencils
    bu = alpha
    bv = ctx.mul(mpfr(3), alpha)

    two_pi = ctx.mul(mpfr(2), ctx.const_pi())
    dx = ctx.scalar(Fraction(1, N + 1))
    y0_data = []
    for i in range(1, N + 1):
        s = ctx.sin(mul(two_pi, mul(mpfr(i), dx)))
        y0_data.append(add(mpfr(1), s))
        y0_data.append(mpfr(3))
    y0 = MPVector(y0_data, ctx)

    def f(x, y):
        out = [None] * n
        for i in range(N):
            u = y.data[2 * i]
            v = y.data[2 * i + 1]
            u_lo = y.data[2 * i - 2] if i > 0 else mpfr(1)
            u_hi = y.data[2 * i + 2] if i + 1 < N else mpfr(1)
            v_lo = y.data[2 * i - 1] if i > 0 else mpfr(3)
            v_hi = y.data[2 * i + 3] if i + 1 < N else mpfr(3)
            uuv = mul(ctx.square(u), v)
            if literal_reaction:
                react_u = sub(add(mpfr(1), uuv), mpfr(4))
            else:
                react_u = add(mpfr(1), fms(mpfr(-4), u, ctx.neg(uuv)))
            # second difference first: the constant steady state cancels
            # exactly even when alpha itself is rounded
            diff_u = mul(alpha, fma(mpfr(-2), u, add(u_lo, u_hi)))
            out[2 * i] = add(react_u, diff_u)
            react_v = fms(mpfr(3), u, uuv)
            diff_v = mul(alpha, fma(mpfr(-2), v, add(v_lo, v_hi)))
            out[2 * i + 1] = add(react_v, diff_v)
        return MPVector(out, ctx)

    def jac_entries(y):
        for i in range(N):
            r_u, r_v = 2 * i, 2 * i + 1
            u = y.data[r_u]
            v = y.data[r_v]
            two_uv = mul(mpfr(2), mul(u, v))
            usq = ctx.square(u)
            duu = sub(two_uv, two_alpha)
            if not literal_reaction:
                duu = sub(duu, mpfr(4))
            yield r_u, r_u, duu
            yield r_u, r_v, usq
            yield r_v, r_u, sub(mpfr(3), two_uv)
            yield r_v, r_v, ctx.neg(add(usq, two_alpha))
            if i > 0:
                yield r_u, r_u - 2, alpha
                yield r_v, r_v - 2, alpha
            if i + 1 < N:
                yield r_u, r_u + 2, alpha
                yield r_v, r_v + 2, alpha

    if banded:
        def jac(x, y):
            J = BandedMatrix.zeros(n, 2, 2, ctx)
            for r, c, v in jac_entries(y):
                J.set_entry(r, c, v)
            return J
    else:
        def jac(x, y):
            J = MPMatrix.zeros(n, n, ctx)
            for r, c, v in jac_entries(y):
                J.data[r][c] = v
            return J

    name = f"bruss1d:{N}"
    return IVProblem(name, n, ctx, f, jac, mpfr(0), y0, kl=2, ku=2)


_LINEAR_RE = re.compile(r"^linear(\d+)$")
_BRUSS_RE = re.compile(r"^bruss1d:(\d+)$")

KNOWN_PROBLEMS = ("linear<n>", "mxy", "lorenz", "vdpol", "bruss1d:<N>")


def make_problem(name, ctx, seed=1, literal_brusselator=False):
    """Problem registry: linear<n> | mxy | lorenz | vdpol | bruss1d:<N>."""
    if name == "mxy":
        return make_mxy(ctx)
    if name == "lorenz":
        return make_lorenz(ctx)
    if name == "vdpol":
        return make_vdpol(ctx)
    m = _LINEAR_RE.match(name)
    if m:
        return make_linear_random(int(m.group(1)), seed, ctx)
    m = _BRUSS_RE.match(name)
    if m:
        return make_brusselator_1d(int(m.group(1)), ctx,
                                   literal_reaction=literal_brusselator)
    raise ValueError(
        f"unknown problem {name!r}; known: {', '.join(KNOWN_PROBLEMS)}")
