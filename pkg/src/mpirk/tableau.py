"""Collocation tableaux, the W-transformation, embedded weights, stability.

Gauss tableaux of any stage count up to 50 are generated at run time from
shifted-Legendre roots; Radau IIA is provided at its classic 3-stage order-5
form.  The W-transformation data produced here is what the inner iteration
uses to reduce the stage system to block-tridiagonal shape.
"""

import json
from functools import lru_cache

import gmpy2
from gmpy2 import mpfr

from .mpnum import (
    MPMatrix,
    MPVector,
    PrecisionContext,
    SingularMatrix,
    convert,
    lu_factor,
    mpfr_from_hex,
    mpfr_to_hex,
)

GAUSS = "gauss"
RADAU2A = "radau2a"

MAX_STAGES = 50
MAX_LEGENDRE_DEGREE = 60


class RootFindingFailure(Exception):
    """Newton iteration on the Legendre polynomial did not converge."""


class TransformCheckFailure(Exception):
    """The W-transformation identities failed their tolerance check."""


class SingularAtZ(Exception):
    """I - zA is singular: z is a pole of the stability function."""


class Tableau:
    """Butcher data of an implicit Runge-Kutta method.

    Fields: stage count `m`, abscissae `c`, stage matrix `A`, weights `b`,
    nominal `order`, and `family` ("gauss" or "radau2a").  All entries live
    in one precision context, available as `ctx`.
    """

    __slots__ = ("m", "c", "A", "b", "order", "family")

    def __init__(self, m, c, A, b, order, family):
        self.m = m
        self.c = c
        self.A = A
        self.b = b
        self.order = order
        self.family = family

    @property
    def ctx(self):
        return self.c.ctx

    def __repr__(self):
        return f"Tableau({self.family}, m={self.m}, order={self.order}, bits={self.ctx.bits})"


class WTransform:
    """Similarity data reducing a Gauss stage matrix to tridiagonal form.

    W holds shifted-Legendre values at the abscissae, X = W^T B A W, zeta the
    m-1 closed-form off-diagonal entries, Bdiag the quadrature weights.
    """

    __slots__ = ("W", "X", "zeta", "bdiag")

    def __init__(self, W, X, zeta, bdiag):
        self.W = W
        self.X = X
        self.zeta = zeta
        self.bdiag = bdiag


class EmbeddedWeights:
    """Companion formula weights: explicit first stage worth `gamma0`,
    collocation-stage weights `bhat`, estimated order `order_hat`."""

    __slots__ = ("gamma0", "bhat", "order_hat")

    def __init__(self, gamma0, bhat, order_hat):
        self.gamma0 = gamma0
        self.bhat = bhat
        self.order_hat = order_hat


@lru_cache(maxsize=None)
def _binomial_coeffs(j):
    # (-1)^(j+k) C(j,k) C(j+k,k), exact integers, k = 0..j
    return tuple(int((-1) ** (j + k) * gmpy2.bincoef(j, k) * gmpy2.bincoef(j + k, k))
                 for k in range(j + 1))


def _eval_binomial(j, x, ctx):
    co = _binomial_coeffs(j)
    fma, mul = ctx.fma, ctx.mul
    s = ctx.scalar(co[j])
    for k in range(j - 1, -1, -1):
        s = fma(s, x, co[k])
    return mul(ctx.sqrt(mpfr(2 * j + 1)), s)


def _recurrence_pair(j, x, ctx):
    """Normalized shifted Legendre value and x-derivative of degree j."""
    mul, add, sub, div, fma = ctx.mul, ctx.add, ctx.sub, ctx.div, ctx.fma
    t = fma(mpfr(2), x, mpfr(-1))
    if j == 0:
        return mpfr(1), mpfr(0)
    p0, p1 = mpfr(1), t
    d0, d1 = mpfr(0), mpfr(1)
    for k in range(1, j):
        # (k+1) P_{k+1} = (2k+1) t P_k - k P_{k-1};  P'_{k+1} = P'_{k-1} + (2k+1) P_k
        pk = div(sub(mul(mul(mpfr(2 * k + 1), t), p1), mul(mpfr(k), p0)), mpfr(k + 1))
        dk = fma(mpfr(2 * k + 1), p1, d0)
        p0, p1, d0, d1 = p1, pk, d1, dk
    s = ctx.sqrt(mpfr(2 * j + 1))
    return mul(s, p1), mul(mpfr(2), mul(s, d1))


def shifted_legendre(j, x, ctx=None):
    """Normalized shifted Legendre polynomial of degree j at x.

    Evaluates sqrt(2j+1) * sum_k (-1)^(j+k) C(j,k) C(j+k,k) x^k.  The
    binomial sum is used up to degree 20; beyond that the three-term
    recurrence avoids the cancellation the alternating sum suffers.
    """
    if j < 0 or j > MAX_LEGENDRE_DEGREE:
        raise ValueError(f"degree {j} out of range [0, {MAX_LEGENDRE_DEGREE}]")
    if ctx is None:
        ctx = PrecisionContext(x.precision)
    x = ctx.scalar(x)
    if j <= 20:
        return _eval_binomial(j, x, ctx)
    return _recurrence_pair(j, x, ctx)[0]


def _guard_ctx(ctx):
    # a bit over twice the working width; forward error of anything solved
    # here rounds away when the result is narrowed back to ctx
    return PrecisionContext(2 * ctx.bits + 16)


def _newton_root(m, x, ctx, max_iter, ulp2):
    """Newton fixed point for the degree-m polynomial from guess x.

    Returns (root, |last correction|); the correction is None if the
    derivative vanished before any step was taken.
    """
    div, sub, mul, cabs = ctx.div, ctx.sub, ctx.mul, ctx.abs
    last = None
    for _ in range(max_iter):
        v, d = _recurrence_pair(m, x, ctx)
        if d == 0:
            break
        step = div(v, d)
        x = sub(x, step)
        last = cabs(step)
        if last <= mul(cabs(x), ulp2):
            v, d = _recurrence_pair(m, x, ctx)
            if d != 0:
                step = div(v, d)
                x = sub(x, step)
                last = cabs(step)
            break
    return x, last


def _gauss_nodes(m, ctx, work):
    """Roots of the degree-m shifted Legendre polynomial, ascending.

    Newton runs in the guard context `work` from Chebyshev-node guesses, so
    the returned roots are exact to well beyond the working width.  The last
    correction must fall below 2^(4 - ctx.bits).
    """
    div, add, mul = work.div, work.add, work.mul
    pi = work.const_pi()
    threshold = work.scalar(gmpy2.exp2(4 - ctx.bits))
    ulp2 = work.scalar(gmpy2.exp2(2 - work.bits))
    roots = []
    for i in range(1, m + 1):
        theta = div(mul(mpfr(2 * i - 1), pi), mpfr(2 * m))
        x0 = div(add(mpfr(1), work.cos(theta)), mpfr(2))
        x, last = _newton_root(m, x0, work, 100, ulp2)
        if last is None or not last < threshold:
            raise RootFindingFailure(
                f"root {i} of degree {m}: last Newton correction "
                f"{'n/a' if last is None else float(last)} not below 2^{4 - ctx.bits}")
        roots.append(x)
    roots.sort()
    for lo, hi in zip(roots, roots[1:]):
        if not lo < hi:
            raise RootFindingFailure(f"degree {m}: two Newton roots collapsed")
    if not (0 < roots[0] and roots[-1] < 1):
        raise RootFindingFailure(f"degree {m}: root escaped (0,1)")
    return roots


def gauss_tableau(m, ctx):
    """m-stage Gauss tableau of order 2m at the given precision.

    Abscissae are the shifted-Legendre roots; b solves the B(m) Vandermonde
    system and the rows of A solve the C(m) systems.  Roots and solves run in
    a guard context of twice the working width, so every stored entry is the
    exact datum correctly rounded; the Vandermonde condition number never
    reaches the output.
    """
    if not 1 <= m <= MAX_STAGES:
        raise ValueError(f"stage count {m} out of range [1, {MAX_STAGES}]")
    work = _guard_ctx(ctx)
    cw = _gauss_nodes(m, ctx, work)

    mulw, divw, fmaw, subw = work.mul, work.div, work.fma, work.sub
    pows = []
    for j in range(m):
        col = [mpfr(1)]
        for _ in range(2 * m):
            col.append(mulw(col[-1], cw[j]))
        pows.append(col)
    V = MPMatrix([[pows[j][q] for j in range(m)] for q in range(m)], work)
    lu = lu_factor(V)

    bw = lu.solve(MPVector([divw(mpfr(1), mpfr(q + 1)) for q in range(m)], work))
    rows = []
    for i in range(m):
        rhs = MPVector([divw(pows[i][q + 1], mpfr(q + 1)) for q in range(m)], work)
        rows.append(lu.solve(rhs))

    # sanity check on the full quadrature conditions; failure means bad roots
    tol = gmpy2.exp2(16 - ctx.bits)
    for q in range(1, 2 * m + 1):
        s = mpfr(0)
        for j in range(m):
            s = fmaw(bw[j], pows[j][q - 1], s)
        if not work.abs(subw(s, divw(mpfr(1), mpfr(q)))) < tol:
            raise RootFindingFailure(
                f"degree {m}: quadrature condition q={q} violated after solve")

    down = ctx.bits
    cv = MPVector([gmpy2.mpfr(x, precision=down) for x in cw], ctx)
    b = MPVector([gmpy2.mpfr(x, precision=down) for x in bw], ctx)
    A = MPMatrix([[gmpy2.mpfr(x, precision=down) for x in row] for row in rows], ctx)
    return Tableau(m, cv, A, b, 2 * m, GAUSS)


def radau2a_tableau(ctx):
    """3-stage Radau IIA tableau (order 5, stiffly accurate)."""
    mul, div, sub, add = ctx.mul, ctx.div, ctx.sub, ctx.add
    s6 = ctx.sqrt(mpfr(6))

    def lin(p, q, den):
        # (p + q*sqrt(6)) / den
        return div(add(mpfr(p), mul(mpfr(q), s6)), mpfr(den))

    c = MPVector([lin(4, -1, 10), lin(4, 1, 10), ctx.scalar(1)], ctx)
    A = MPMatrix([
        [lin(88, -7, 360), lin(296, -169, 1800), lin(-2, 3, 225)],
        [lin(296, 169, 1800), lin(88, 7, 360), lin(-2, -3, 225)],
        [lin(16, -1, 36), lin(16, 1, 36), div(mpfr(1), mpfr(9))],
    ], ctx)
    b = MPVector([lin(16, -1, 36), lin(16, 1, 36), div(mpfr(1), mpfr(9))], ctx)
    return Tableau(3, c, A, b, 5, RADAU2A)


def zeta_values(m, ctx):
    """Closed-form off-diagonal entries zeta_i = 1/(2 sqrt(4 i^2 - 1))."""
    return MPVector(
        [ctx.div(mpfr(1), ctx.mul(mpfr(2), ctx.sqrt(mpfr(4 * i * i - 1))))
         for i in range(1, m)], ctx)


def _x_closed_form(m, zeta, ctx):
    X = MPMatrix.zeros(m, m, ctx)
    X[0, 0] = ctx.div(mpfr(1), mpfr(2))
    for k in range(m - 1):
        X[k, k + 1] = ctx.neg(zeta[k])
        X[k + 1, k] = zeta[k]
    return X


def w_transform(t):
    """W-transformation data for a Gauss tableau.

    W holds the shifted-Legendre values at the abscissae.  The stored
    abscissae are correctly rounded, and the Legendre slopes would amplify
    that half-ulp into the W entries; two guard-precision Newton steps
    recover the exact roots first, so each W entry is the exact value
    correctly rounded.  Verifies W^T B W = I and that W^T B A W matches the
    tridiagonal closed form before returning; a violation signals a
    tableau-generation bug.  The verification products are evaluated at
    doubled precision so the check measures the data, not the checking
    arithmetic.
    """
    if t.family != GAUSS:
        raise ValueError("the tridiagonal W-transformation identities hold "
                         "for the Gauss family only")
    ctx = t.ctx
    m = t.m
    work = _guard_ctx(ctx)
    ulp2 = work.scalar(gmpy2.exp2(2 - work.bits))
    refined = []
    for ci in t.c:
        x = gmpy2.mpfr(ci, precision=work.bits)
        x, _ = _newton_root(m, x, work, 4, ulp2)
        refined.append(x)
    down = ctx.bits
    W = MPMatrix(
        [[gmpy2.mpfr(shifted_legendre(j, x, work), precision=down)
          for j in range(m)] for x in refined], ctx)
    zeta = zeta_values(m, ctx)

    Ww = convert(W, work)
    Bw = MPMatrix.zeros(m, m, work)
    for i in range(m):
        Bw[i, i] = gmpy2.mpfr(t.b[i], precision=work.bits)
    WtB = Ww.transpose().matmul(Bw)
    D = WtB.matmul(Ww)
    Xw = WtB.matmul(convert(t.A, work)).matmul(Ww)

    # entrywise tolerance: the stated bound through m=15, growing past it
    tol = gmpy2.exp2(8 - ctx.bits) * max(1.0, (m / 15.0) ** 2)
    eye = MPMatrix.identity(m, work)
    dev_d = _max_abs_entry(D - eye, work)
    if not dev_d < tol:
        raise TransformCheckFailure(
            f"m={m}: max|W^T B W - I| = {float(dev_d):.3e} exceeds tolerance")
    Xc = _x_closed_form(m, zeta_values(m, work), work)
    dev_x = _max_abs_entry(Xw - Xc, work)
    if not dev_x < tol:
        raise TransformCheckFailure(
            f"m={m}: max|W^T B A W - X| = {float(dev_x):.3e} exceeds tolerance")

    X = convert(Xw, ctx)
    return WTransform(W, X, zeta, t.b.copy())


def order_residuals(t):
    """Worst quadrature and collocation order-condition residuals.

    Returns (max_b, max_c): max_b over sum_j b_j c_j^(q-1) - 1/q for
    q = 1..order, max_c over sum_j a_ij c_j^(q-1) - c_i^q/q for q = 1..m.
    Both are evaluated at guard precision so they measure the tableau data
    rather than the checking arithmetic, then rounded to the tableau's
    context.
    """
    ctx = t.ctx
    work = _guard_ctx(ctx)
    m = t.m
    c = [gmpy2.mpfr(x, precision=work.bits) for x in t.c]
    b = [gmpy2.mpfr(x, precision=work.bits) for x in t.b]
    A = [[gmpy2.mpfr(t.A[i, j], precision=work.bits) for j in range(m)]
         for i in range(m)]
    add, sub, mul, div, fma = work.add, work.sub, work.mul, work.div, work.fma
    powers = [[mpfr(1)] * m]
    top = max(t.order, m)
    for q in range(1, top):
        powers.append([mul(powers[-1][j], c[j]) for j in range(m)])

    max_b = mpfr(0)
    for q in range(1, t.order + 1):
        s = mpfr(0)
        for j in range(m):
            s = fma(b[j], powers[q - 1][j], s)
        r = work.abs(sub(s, div(mpfr(1), mpfr(q))))
        if r > max_b:
            max_b = r
    max_c = mpfr(0)
    for q in range(1, m + 1):
        for i in range(m):
            s = mpfr(0)
            for j in range(m):
                s = fma(A[i][j], powers[q - 1][j], s)
            r = work.abs(sub(s, div(mul(powers[q - 1][i], c[i]), mpfr(q))))
            if r > max_c:
                max_c = r
    return ctx.scalar(max_b), ctx.scalar(max_c)


def _max_abs_entry(mat, ctx):
    cabs = ctx.abs
    worst = mpfr(0)
    for row in mat.data:
        for a in row:
            v = cabs(a)
            if v > worst:
                worst = v
    return worst


def embedded_weights(t, gamma0):
    """Weights of the embedded companion with an explicit first stage.

    bhat solves V(c) bhat = [1 - gamma0, 1/2, ..., 1/m]; order_hat is
    min(m, order).  gamma0 = 0 reproduces the base weights (test bypass).
    """
    ctx = t.ctx
    m = t.m
    gam = ctx.scalar(gamma0)
    mul, div, sub = ctx.mul, ctx.div, ctx.sub
    pows = []
    for j in range(m):
        col = [mpfr(1)]
        for _ in range(m - 1):
            col.append(mul(col[-1], t.c[j]))
        pows.append(col)
    V = MPMatrix([[pows[j][q] for j in range(m)] for q in range(m)], ctx)
    rhs = [sub(mpfr(1), gam)]
    rhs.extend(div(mpfr(1), mpfr(q)) for q in range(2, m + 1))
    bhat = lu_factor(V).solve(MPVector(rhs, ctx))
    return EmbeddedWeights(gam, bhat, min(m, t.order))


def stability_value(t, e, z):
    """Stability function R(z) (or the embedded R-hat with `e`) at z.

    z is an (re, im) pair; the complex solve (I - zA) w = 1 runs as a real
    2m x 2m block system.  Returns the (re, im) pair of R.
    """
    ctx = t.ctx
    m = t.m
    re = ctx.scalar(z[0])
    im = ctx.scalar(z[1])
    mul, sub, add, neg, fma = ctx.mul, ctx.sub, ctx.add, ctx.neg, ctx.fma
    big = MPMatrix.zeros(2 * m, 2 * m, ctx)
    one = mpfr(1)
    for i in range(m):
        for j in range(m):
            a = t.A[i, j]
            mr = neg(mul(re, a))
            mi = neg(mul(im, a))
            if i == j:
                mr = add(one, mr)
            big[i, j] = mr
            big[i + m, j + m] = mr
            big[i, j + m] = neg(mi)
            big[i + m, j] = mi
    rhs = MPVector([one] * m + [mpfr(0)] * m, ctx)
    try:
        w = lu_factor(big).solve(rhs)
    except SingularMatrix as exc:
        raise SingularAtZ(f"I - zA singular at z = ({float(re)}, {float(im)})") from exc
    weights = e.bhat if e is not None else t.b
    bwr = mpfr(0)
    bwi = mpfr(0)
    for j in range(m):
        bwr = fma(weights[j], w[j], bwr)
        bwi = fma(weights[j], w[j + m], bwi)
    rr = add(one, sub(mul(re, bwr), mul(im, bwi)))
    ri = add(mul(re, bwi), mul(im, bwr))
    if e is not None:
        rr = fma(e.gamma0, re, rr)
        ri = fma(e.gamma0, im, ri)
    return rr, ri


def stability_grid(t, e, re_range, im_range, nx, ny):
    """|R(z)| over a rectangle, row-major (im outer, re inner).

    Returns a list of (re, im, abs_R) triples; poles appear with abs_R = inf.
    """
    if nx < 1 or ny < 1:
        raise ValueError("grid needs at least one point per axis")
    ctx = t.ctx
    div, sub, mul, add = ctx.div, ctx.sub, ctx.mul, ctx.add
    re0, re1 = ctx.scalar(re_range[0]), ctx.scalar(re_range[1])
    im0, im1 = ctx.scalar(im_range[0]), ctx.scalar(im_range[1])
    out = []
    for iy in range(ny):
        if ny == 1:
            im = im0
        else:
            im = add(im0, div(mul(sub(im1, im0), mpfr(iy)), mpfr(ny - 1)))
        for ix in range(nx):
            if nx == 1:
                re = re0
            else:
                re = add(re0, div(mul(sub(re1, re0), mpfr(ix)), mpfr(nx - 1)))
            try:
                rr, ri = stability_value(t, e, (re, im))
                mag = ctx.hypot(rr, ri)
            except SingularAtZ:
                mag = mpfr("inf")
            out.append((re, im, mag))
    return out


def tableau_to_json(t):
    """Lossless JSON interchange form of a tableau."""
    doc = {
        "family": t.family,
        "m": t.m,
        "bits": t.ctx.bits,
        "c": [mpfr_to_hex(x) for x in t.c],
        "A": [[mpfr_to_hex(t.A[i, j]) for j in range(t.m)] for i in range(t.m)],
        "b": [mpfr_to_hex(x) for x in t.b],
        "order": t.order,
    }
    return json.dumps(doc, indent=2)


def tableau_from_json(text):
    doc = json.loads(text)
    family = doc["family"]
    if family not in (GAUSS, RADAU2A):
        raise ValueError(f"unknown tableau family {family!r}")
    m = int(doc["m"])
    ctx = PrecisionContext(int(doc["bits"]))
    c = doc["c"]
    A = doc["A"]
    b = doc["b"]
    if len(c) != m or len(b) != m or len(A) != m or any(len(r) != m for r in A):
        raise ValueError("tableau JSON has inconsistent dimensions")
    cv = MPVector([mpfr_from_hex(x, ctx) for x in c], ctx)
    bv = MPVector([mpfr_from_hex(x, ctx) for x in b], ctx)
    Am = MPMatrix([[mpfr_from_hex(x, ctx) for x in row] for row in A], ctx)
    return Tableau(m, cv, Am, bv, int(doc["order"]), family)
