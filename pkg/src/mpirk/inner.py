"""Inner iteration for one implicitRK step.

The stage system is solved by simplified Newton on the transformed
block-tridiagonal form (or optionally by a full quasi-Newton on the stage
derivatives), with every linear solve wrapped in S/L mixed-precision
iterative refinement: solve cheaply at S bits, compute residuals at L bits,
iterate corrections.

When the S context is exactly double precision (53 bits), S-side solves and
Krylov iterations run on numpy/scipy (LAPACK dense and banded LU, scipy
BiCGSTAB/GMRES); refinement and all L-side arithmetic stay in MPFR.  Both
lanes share exit semantics, so callers never see the difference.
"""

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.linalg import lapack as _lapack

import gmpy2
from gmpy2 import mpfr

from .mpnum import (
    BandedMatrix,
    DimensionMismatch,
    MPMatrix,
    MPVector,
    NonFiniteValue,
    SingularMatrix,
    band_lu_factor,
    convert,
    lu_factor,
)

DIRECT_LU = "direct_lu"
BICGSTAB = "bicgstab"
GMRES = "gmres"
PRECOND_NONE = "none"
PRECOND_BLOCK_LU_S = "block_lu_s"


class RefinementStalled(Exception):
    """Residual stopped halving: the S precision cannot resolve the system."""


class Breakdown(Exception):
    """A Krylov recurrence scalar vanished."""


class NotConverged(Exception):
    """Iteration budget exhausted before the residual target."""


class InnerDivergence(Exception):
    """Newton increments grew or a linear solve failed; reject the step."""


class RefinementConfig:
    """Mixed-precision solve configuration.

    s_ctx is the cheap inner-solve precision, l_ctx the residual precision,
    `inner` one of "direct_lu", "bicgstab", "gmres", `precondition` "none"
    or "block_lu_s", `tol` the relative residual target at L, `max_iter` the
    refinement budget.  Krylov knobs: `restart` (GMRES cycle length),
    `krylov_tol` (S-solve target, default 2^(12 - s_bits)) and
    `krylov_max_iter`.

    tol must stay at or above 2^(8 - l_bits); the default 2^(32 - l_bits)
    keeps headroom for the L-precision residual noise floor, which scales
    with ||C|| ||x|| / ||d||.
    """

    __slots__ = ("s_ctx", "l_ctx", "inner", "precondition", "tol", "max_iter",
                 "restart", "krylov_tol", "krylov_max_iter")

    def __init__(self, s_ctx, l_ctx, inner=DIRECT_LU, precondition=PRECOND_NONE,
                 tol=None, max_iter=50, restart=30, krylov_tol=None,
                 krylov_max_iter=600):
        if s_ctx.bits > l_ctx.bits:
            raise ValueError(
                f"S precision ({s_ctx.bits} bits) must not exceed L ({l_ctx.bits})")
        if inner not in (DIRECT_LU, BICGSTAB, GMRES):
            raise ValueError(f"unknown inner solver {inner!r}")
        if precondition not in (PRECOND_NONE, PRECOND_BLOCK_LU_S):
            raise ValueError(f"unknown preconditioner {precondition!r}")
        self.s_ctx = s_ctx
        self.l_ctx = l_ctx
        self.inner = inner
        self.precondition = precondition
        floor = gmpy2.mpfr(gmpy2.exp2(8 - l_ctx.bits), precision=l_ctx.bits)
        if tol is None:
            self.tol = l_ctx.scalar(gmpy2.exp2(min(32 - l_ctx.bits, -1)))
        else:
            self.tol = l_ctx.scalar(tol)
        if self.tol < floor:
            raise ValueError(
                f"tol {float(self.tol)} below the achievable floor 2^{8 - l_ctx.bits}")
        self.max_iter = int(max_iter)
        self.restart = int(restart)
        if krylov_tol is None:
            self.krylov_tol = float(gmpy2.exp2(max(12 - s_ctx.bits, -s_ctx.bits + 4)))
        else:
            self.krylov_tol = float(krylov_tol)
        self.krylov_max_iter = int(krylov_max_iter)


class NewtonOptions:
    """Newton-loop configuration for the stage solve.

    mode is "simplified" (W-transformed path) or "quasi" (full stage-derivative
    system); newton_tol is the relative increment threshold (None picks
    2^(-l_bits/2)); refinement carries the linear-solve configuration.
    """

    __slots__ = ("mode", "newton_tol", "max_newton", "refinement")

    def __init__(self, refinement, mode="simplified", newton_tol=None,
                 max_newton=20):
        if mode not in ("simplified", "quasi"):
            raise ValueError(f"unknown Newton mode {mode!r}")
        if max_newton < 1:
            raise ValueError("max_newton must be at least 1")
        self.mode = mode
        self.refinement = refinement
        lctx = refinement.l_ctx
        if newton_tol is None:
            self.newton_tol = lctx.scalar(gmpy2.exp2(-(lctx.bits // 2)))
        else:
            self.newton_tol = lctx.scalar(newton_tol)
        self.max_newton = int(max_newton)


class InnerReport:
    """Counters from one stage solve."""

    __slots__ = ("newton_iters", "linear_iters_total", "refine_iters_total",
                 "converged", "final_increment_norm")

    def __init__(self, newton_iters, linear_iters_total, refine_iters_total,
                 converged, final_increment_norm):
        self.newton_iters = newton_iters
        self.linear_iters_total = linear_iters_total
        self.refine_iters_total = refine_iters_total
        self.converged = converged
        self.final_increment_norm = final_increment_norm


class ReducedOperator:
    """(I_mn - h X kron J) as an implicit operator.

    Only J, h and the tridiagonal entries of X (1/2 and the zetas) are
    stored; the E/F/G blocks of the block-tridiagonal form are never
    materialized.  J may be dense or banded; apply costs m J-matvecs.
    """

    __slots__ = ("n", "m", "h", "J", "zeta", "ctx", "_hhalf", "_hz")

    def __init__(self, J, h, zeta, m):
        self.J = J
        self.n = J.n if isinstance(J, BandedMatrix) else J.rows
        self.m = m
        self.zeta = zeta
        ctx = J.ctx
        self.ctx = ctx
        self.h = ctx.scalar(h)
        self._hhalf = ctx.div(self.h, mpfr(2))
        self._hz = [ctx.mul(self.h, zeta[i]) for i in range(m - 1)]

    def _x_row_times(self, blocks, i):
        # h * (X row i) dotted into the stage blocks
        ctx = self.ctx
        n = self.n
        fma, mul = ctx.fma, ctx.mul
        if i == 0:
            u = [mul(self._hhalf, a) for a in blocks[0].data]
            if self.m > 1:
                hz = ctx.neg(self._hz[0])
                v1 = blocks[1].data
                u = [fma(hz, v1[p], u[p]) for p in range(n)]
            return MPVector(u, ctx)
        hz_lo = self._hz[i - 1]
        vlo = blocks[i - 1].data
        u = [mul(hz_lo, a) for a in vlo]
        if i + 1 < self.m:
            hz_hi = ctx.neg(self._hz[i])
            vhi = blocks[i + 1].data
            u = [fma(hz_hi, vhi[p], u[p]) for p in range(n)]
        return MPVector(u, ctx)

    def apply(self, v):
        if len(v.data) != self.m * self.n:
            raise DimensionMismatch(
                f"operator is {self.m * self.n}-dim, vector is {len(v.data)}")
        blocks = v.split(self.m)
        ctx = self.ctx
        sub = ctx.sub
        out = []
        for i in range(self.m):
            ju = self.J.matvec(self._x_row_times(blocks, i))
            vi = blocks[i].data
            out.extend(sub(vi[p], ju.data[p]) for p in range(self.n))
        return MPVector(out, ctx)

    def x_matrix(self):
        """The tridiagonal X at this operator's precision."""
        ctx = self.ctx
        X = MPMatrix.zeros(self.m, self.m, ctx)
        X[0, 0] = ctx.div(mpfr(1), mpfr(2))
        for k in range(self.m - 1):
            X[k, k + 1] = ctx.neg(self.zeta[k])
            X[k + 1, k] = self.zeta[k]
        return X

    def dense(self):
        """Explicit I - h X kron J (oracle/testing; O((mn)^2) memory)."""
        ctx = self.ctx
        n, m = self.n, self.m
        Jd = self.J.to_dense() if isinstance(self.J, BandedMatrix) else self.J
        X = self.x_matrix()
        big = MPMatrix.zeros(m * n, m * n, ctx)
        mul, sub = ctx.mul, ctx.sub
        one = mpfr(1)
        for i in range(m):
            for l in range(m):
                x = X[i, l]
                if x == 0 and i != l:
                    continue
                hx = mul(self.h, x)
                for p in range(n):
                    for q in range(n):
                        v = ctx.neg(mul(hx, Jd[p, q]))
                        if i == l and p == q:
                            v = ctx.add(one, v)
                        big[i * n + p, l * n + q] = v
        return big


def assemble_reduced(J, h, wt):
    """Reduced stage operator for Jacobian J, step h and W-transform data."""
    hs = J.ctx.scalar(h)
    if not hs > 0:
        raise ValueError("step size must be positive")
    m = len(wt.zeta) + 1
    zeta = convert(wt.zeta, J.ctx)
    return ReducedOperator(J, hs, zeta, m)


# ---------------------------------------------------------------------------
# block LU preconditioner / direct S solver


class _BlockTridiagLU:
    """Block-tridiagonal elimination of the reduced matrix, dense J."""

    def __init__(self, red, ctx):
        J = convert(red.J, ctx)
        if isinstance(J, BandedMatrix):
            J = J.to_dense()
        n, m = red.n, red.m
        self.n, self.m, self.ctx = n, m, ctx
        h = ctx.scalar(red.h)
        hz = [ctx.mul(h, ctx.scalar(z)) for z in red.zeta]
        self.hz = hz
        self.J = J
        mul, sub, add = ctx.mul, ctx.sub, ctx.add
        hhalf = ctx.div(h, mpfr(2))
        T0 = MPMatrix(
            [[sub(mpfr(1) if p == q else mpfr(0), mul(hhalf, J[p, q]))
              for q in range(n)] for p in range(n)], ctx)
        self.lus = [lu_factor(T0)]
        self.wf = []
        for i in range(m - 1):
            # Wf[i] = T_i^{-1} S_i with S_i = h zeta_i J
            cols = []
            for q in range(n):
                col = [mul(hz[i], J[p, q]) for p in range(n)]
                cols.append(self.lus[i].solve(col).data)
            wf = MPMatrix([[cols[q][p] for q in range(n)] for p in range(n)], ctx)
            self.wf.append(wf)
            # T_{i+1} = I - G_i Wf[i] = I + h zeta_i J Wf[i]
            JW = J.matmul(wf)
            T = MPMatrix(
                [[add(mpfr(1) if p == q else mpfr(0), mul(hz[i], JW[p, q]))
                  for q in range(n)] for p in range(n)], ctx)
            self.lus.append(lu_factor(T))

    def solve(self, v):
        n, m, ctx = self.n, self.m, self.ctx
        blocks = v.split(m)
        ps = []
        u = blocks[0]
        for i in range(m):
            if i > 0:
                # u_i = v_i - G_{i-1} p_{i-1} = v_i + h zeta J p_{i-1}
                jp = self.J.matvec(ps[i - 1])
                u = blocks[i].axpy(self.hz[i - 1], jp)
            ps.append(self.lus[i].solve(u))
        xs = [None] * m
        xs[m - 1] = ps[m - 1]
        neg_one = mpfr(-1)
        for i in range(m - 2, -1, -1):
            wx = self.wf[i].matvec(xs[i + 1])
            xs[i] = ps[i].axpy(neg_one, wx)
        return MPVector.concat(xs)


def _band_layout(red):
    """Component-major permutation turning the reduced matrix banded.

    Index (stage i, component p) maps to p*m + i; the bandwidth becomes
    m*nu + 1 where nu is the Jacobian bandwidth.
    """
    J = red.J
    nu = max(J.kl, J.ku)
    bw = red.m * nu + 1
    return nu, bw


class _BandLUMP:
    """Band LU of the permuted reduced matrix at an MP context."""

    def __init__(self, red, ctx):
        J = convert(red.J, ctx)
        n, m = red.n, red.m
        self.n, self.m, self.ctx = n, m, ctx
        nu, bw = _band_layout(red)
        h = ctx.scalar(red.h)
        hz = [ctx.mul(h, ctx.scalar(z)) for z in red.zeta]
        hhalf = ctx.div(h, mpfr(2))
        big = BandedMatrix.zeros(m * n, bw, bw, ctx)
        mul, sub = ctx.mul, ctx.sub
        one = mpfr(1)
        for p in range(n):
            for q in range(max(0, p - J.kl), min(n, p + J.ku + 1)):
                jpq = J.entry(p, q)
                rbase, cbase = p * m, q * m
                # X(0,0) = 1/2 diagonal coupling
                v = ctx.neg(mul(hhalf, jpq))
                if p == q:
                    v = ctx.add(one, v)
                big.set_entry(rbase, cbase, v)
                for i in range(1, m):
                    v = one if p == q else mpfr(0)
                    big.set_entry(rbase + i, cbase + i, v)
                for k in range(m - 1):
                    coup = mul(hz[k], jpq)
                    # X(k,k+1) = -zeta_k -> entry +h zeta J
                    big.set_entry(rbase + k, cbase + k + 1, coup)
                    big.set_entry(rbase + k + 1, cbase + k, ctx.neg(coup))
        self.factor = band_lu_factor(big)

    def solve(self, v):
        n, m = self.n, self.m
        perm = [None] * (m * n)
        for i in range(m):
            base = i * n
            for p in range(n):
                perm[p * m + i] = v.data[base + p]
        sol = self.factor.solve(MPVector(perm, self.ctx))
        out = [None] * (m * n)
        for i in range(m):
            base = i * n
            for p in range(n):
                out[base + p] = sol.data[p * m + i]
        return MPVector(out, self.ctx)


class _DenseLUF64:
    """LAPACK LU of the dense reduced matrix at 53 bits."""

    def __init__(self, red, ctx):
        self.ctx = ctx
        J = red.J
        Jf = (_band_to_csr(J).toarray() if isinstance(J, BandedMatrix)
              else J.to_float_array())
        Xf = _x_float(red)
        K = np.eye(red.m * red.n) - float(red.h) * np.kron(Xf, Jf)
        lu, piv, info = _lapack.dgetrf(K)
        if info != 0:
            raise SingularMatrix(f"dense 53-bit reduced LU failed (info={info})")
        self.lu, self.piv = lu, piv

    def solve_f64(self, arr):
        x, info = _lapack.dgetrs(self.lu, self.piv, arr)
        if info != 0:
            raise SingularMatrix(f"dense 53-bit solve failed (info={info})")
        return x

    def solve(self, v):
        return MPVector.from_floats(self.solve_f64(v.to_floats()), self.ctx)


class _BandLUF64:
    """LAPACK band LU of the permuted reduced matrix at 53 bits."""

    def __init__(self, red, ctx):
        self.ctx = ctx
        J = red.J
        n, m = red.n, red.m
        self.n, self.m = n, m
        nu, bw = _band_layout(red)
        self.bw = bw
        h = float(red.h)
        hz = [h * float(z) for z in red.zeta]
        ab = np.zeros((2 * bw + bw + 1, m * n))
        row0 = 2 * bw  # diagonal row in gbtrf layout with kl extra rows

        def put(i, j, val):
            ab[row0 + i - j, j] += val

        for p in range(n):
            for q in range(max(0, p - J.kl), min(n, p + J.ku + 1)):
                jpq = float(J.entry(p, q))
                rbase, cbase = p * m, q * m
                put(rbase, cbase, -0.5 * h * jpq + (1.0 if p == q else 0.0))
                if p == q:
                    for i in range(1, m):
                        put(rbase + i, cbase + i, 1.0)
                for k in range(m - 1):
                    put(rbase + k, cbase + k + 1, hz[k] * jpq)
                    put(rbase + k + 1, cbase + k, -hz[k] * jpq)
        lu, ipiv, info = _lapack.dgbtrf(ab, kl=bw, ku=bw)
        if info != 0:
            raise SingularMatrix(f"banded 53-bit reduced LU failed (info={info})")
        self.lu, self.ipiv = lu, ipiv
        mn = m * n
        fwd = np.empty(mn, dtype=np.intp)
        for i in range(m):
            for p in range(n):
                fwd[p * m + i] = i * n + p
        self.fwd = fwd

    def solve_f64(self, arr):
        x, info = _lapack.dgbtrs(self.lu, self.bw, self.bw, arr[self.fwd],
                                 self.ipiv)
        if info != 0:
            raise SingularMatrix(f"banded 53-bit solve failed (info={info})")
        out = np.empty_like(x)
        out[self.fwd] = x
        return out

    def solve(self, v):
        return MPVector.from_floats(self.solve_f64(v.to_floats()), self.ctx)


def _band_to_csr(J):
    rows, cols, vals = [], [], []
    for i in range(J.n):
        for j in range(max(0, i - J.kl), min(J.n, i + J.ku + 1)):
            rows.append(i)
            cols.append(j)
            vals.append(float(J.ab[J.ku + i - j][j]))
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(J.n, J.n))


def _x_float(red):
    m = red.m
    X = np.zeros((m, m))
    X[0, 0] = 0.5
    for k in range(m - 1):
        z = float(red.zeta[k])
        X[k, k + 1] = -z
        X[k + 1, k] = z
    return X


def block_lu_precond(red, ctx_s):
    """Exact S-precision solver for the reduced system (also the Krylov
    preconditioner).  Dense J: block-tridiagonal elimination, O(m n^3) to
    factor.  Banded J: band LU of the component-major reordering, bandwidth
    m*nu + 1.  At 53 bits both run on LAPACK.
    """
    banded = isinstance(red.J, BandedMatrix)
    if ctx_s.bits == 53:
        return _BandLUF64(red, ctx_s) if banded else _DenseLUF64(red, ctx_s)
    return _BandLUMP(red, ctx_s) if banded else _BlockTridiagLU(red, ctx_s)


# ---------------------------------------------------------------------------
# mixed-precision iterative refinement


def mixed_refine(op_s, op_l, d, cfg, residual_norms=None):
    """S/L iterative refinement of op_l's system with right side d.

    x0 comes from the S solve of d; each pass computes r = d - C x at L,
    normalizes r by its max norm, S-solves for the correction direction and
    adds it back scaled.  Stops at relative residual cfg.tol or after
    cfg.max_iter corrections; returns (x, corrections).  Raises
    RefinementStalled when the residual fails to halve across any three
    consecutive iterations.
    """
    lctx = cfg.l_ctx
    sctx = cfg.s_ctx
    same_bits = sctx.bits == lctx.bits
    nd = d.norm_inf()
    target = lctx.mul(cfg.tol, nd)

    def down(v):
        return v if same_bits else convert(v, sctx)

    def up(v):
        return v if same_bits else convert(v, lctx)

    x = up(op_s.solve(down(d)))
    iters = 0
    norms = []
    half = lctx.scalar("0.5")
    while True:
        r = d - op_l.apply(x)
        nr = r.norm_inf()
        if residual_norms is not None:
            residual_norms.append(nr)
        if not gmpy2.is_finite(nr):
            raise RefinementStalled("residual overflowed; S solve is unusable")
        if nr <= target:
            return x, iters
        norms.append(nr)
        if len(norms) >= 4 and not norms[-1] <= lctx.mul(half, norms[-4]):
            raise RefinementStalled(
                f"residual {float(norms[-1]):.3e} not halved over three "
                f"iterations (was {float(norms[-4]):.3e})")
        if iters >= cfg.max_iter:
            return x, iters
        rnorm = r.scale(lctx.div(mpfr(1), nr))
        z = up(op_s.solve(down(rnorm)))
        x = x.axpy(nr, z)
        iters += 1


class DenseOperator:
    """A dense MPMatrix as the L-side operator of mixed_refine."""

    __slots__ = ("M", "ctx")

    def __init__(self, M):
        self.M = M
        self.ctx = M.ctx

    def apply(self, v):
        return self.M.matvec(v)


class DenseLUSolver:
    """Direct S-side solver over a dense matrix for mixed_refine.

    The matrix is rounded into `ctx` and factored once; 53 bits runs on
    LAPACK, anything else on the MP LU.
    """

    __slots__ = ("ctx", "iterations", "_lapack_lu", "_mp")

    def __init__(self, M, ctx):
        self.ctx = ctx
        self.iterations = 0
        if ctx.bits == 53:
            lu, piv, info = _lapack.dgetrf(M.to_float_array())
            if info != 0:
                raise SingularMatrix(f"53-bit LU failed (info={info})")
            self._lapack_lu = (lu, piv)
            self._mp = None
        else:
            self._lapack_lu = None
            self._mp = lu_factor(convert(M, ctx))

    def solve(self, v):
        self.iterations += 1
        if self._mp is not None:
            return self._mp.solve(v)
        lu, piv = self._lapack_lu
        x, info = _lapack.dgetrs(lu, piv, v.to_floats())
        if info != 0:
            raise SingularMatrix(f"53-bit solve failed (info={info})")
        return MPVector.from_floats(x, self.ctx)


# ---------------------------------------------------------------------------
# Krylov solvers, MP lane


def bicgstab(op, d, pre, ctx, tol, max_iter):
    """BiCGSTAB at precision ctx; returns when the true relative 2-norm
    residual is at or below tol.  `pre` (or None) supplies approximate
    inverse applications via .solve()."""
    n = len(d.data)
    x = MPVector.zeros(n, ctx)
    nd = d.norm_2()
    if nd == 0:
        return x, 0
    target = ctx.mul(ctx.scalar(tol), nd)
    r = d.copy()
    rhat = d.copy()
    rho = alpha = omega = mpfr(1)
    v = p = None
    mul, div, sub = ctx.mul, ctx.div, ctx.sub
    for it in range(1, max_iter + 1):
        rho_new = rhat.dot(r)
        if rho_new == 0:
            raise Breakdown("rho vanished")
        if p is None:
            p = r.copy()
        else:
            beta = mul(div(rho_new, rho), div(alpha, omega))
            p = r + (p.axpy(ctx.neg(omega), v)).scale(beta)
        phat = pre.solve(p) if pre is not None else p
        v = op.apply(phat)
        denom = rhat.dot(v)
        if denom == 0:
            raise Breakdown("r-hat lost orthogonality")
        alpha = div(rho_new, denom)
        s = r.axpy(ctx.neg(alpha), v)
        x = x.axpy(alpha, phat)
        if s.norm_2() <= target:
            return x, it
        shat = pre.solve(s) if pre is not None else s
        t = op.apply(shat)
        tt = t.dot(t)
        if tt == 0:
            raise Breakdown("t vanished")
        omega = div(t.dot(s), tt)
        if omega == 0:
            raise Breakdown("omega vanished")
        x = x.axpy(omega, shat)
        r = s.axpy(ctx.neg(omega), t)
        rho = rho_new
        if r.norm_2() <= target:
            return x, it
    raise NotConverged(f"bicgstab: {max_iter} iterations without reaching tol")


def gmres(op, d, pre, ctx, tol, restart, max_iter):
    """Restarted GMRES at precision ctx (right-preconditioned).

    Residual norms are non-increasing within each restart cycle.  Returns
    (x, total inner iterations).
    """
    n = len(d.data)
    x = MPVector.zeros(n, ctx)
    nd = d.norm_2()
    if nd == 0:
        return x, 0
    target = ctx.mul(ctx.scalar(tol), nd)
    mul, div, sub, add, fma = ctx.mul, ctx.div, ctx.sub, ctx.add, ctx.fma
    total = 0
    while total < max_iter:
        r = d - op.apply(x)
        beta = r.norm_2()
        if beta <= target:
            return x, total
        vs = [r.scale(div(mpfr(1), beta))]
        hs = []  # columns of the Hessenberg matrix
        cs, sn = [], []
        g = [beta] + [mpfr(0)] * restart
        k = 0
        while k < restart and total < max_iter:
            w = vs[k]
            z = pre.solve(w) if pre is not None else w
            w = op.apply(z)
            col = []
            for i in range(k + 1):
                hik = vs[i].dot(w)
                col.append(hik)
                w = w.axpy(ctx.neg(hik), vs[i])
            hkk = w.norm_2()
            col.append(hkk)
            # apply accumulated Givens rotations to the new column
            for i in range(k):
                t0 = add(mul(cs[i], col[i]), mul(sn[i], col[i + 1]))
                t1 = sub(mul(cs[i], col[i + 1]), mul(sn[i], col[i]))
                col[i], col[i + 1] = t0, t1
            denom = ctx.hypot(col[k], col[k + 1])
            if denom == 0:
                raise Breakdown("gmres: zero Hessenberg column")
            cs.append(div(col[k], denom))
            sn.append(div(col[k + 1], denom))
            col[k] = denom
            col[k + 1] = mpfr(0)
            g[k + 1] = ctx.neg(mul(sn[k], g[k]))
            g[k] = mul(cs[k], g[k])
            hs.append(col)
            total += 1
            k += 1
            if ctx.abs(g[k]) <= target:
                break
            if hkk == 0:
                break
            vs.append(w.scale(div(mpfr(1), hkk)))
        # back-substitute the k x k triangular system
        ys = [mpfr(0)] * k
        for i in range(k - 1, -1, -1):
            s = g[i]
            for j in range(i + 1, k):
                s = fma(ctx.neg(hs[j][i]), ys[j], s)
            ys[i] = div(s, hs[i][i])
        dx = MPVector.zeros(n, ctx)
        for j in range(k):
            dx = dx.axpy(ys[j], vs[j])
        if pre is not None:
            dx = pre.solve(dx)
        x = x + dx
        r = d - op.apply(x)
        if r.norm_2() <= target:
            return x, total
    raise NotConverged(f"gmres: {max_iter} iterations without reaching tol")


# ---------------------------------------------------------------------------
# S-side solver wrappers used by the Newton drivers


class _DirectSSolver:
    def __init__(self, factor):
        self.factor = factor
        self.iterations = 0

    def solve(self, v):
        self.iterations += 1
        return self.factor.solve(v)


class _ReducedF64:
    """Float64 mirror of ReducedOperator for scipy Krylov."""

    def __init__(self, red):
        self.m, self.n = red.m, red.n
        self.hhalf = 0.5 * float(red.h)
        self.hz = [float(red.h) * float(z) for z in red.zeta]
        J = red.J
        if isinstance(J, BandedMatrix):
            self.Jcsr = _band_to_csr(J)
            self.Jt = None
        else:
            self.Jt = J.to_float_array().T
            self.Jcsr = None

    def matvec(self, arr):
        m, n = self.m, self.n
        V = np.asarray(arr, dtype=np.float64).reshape(m, n)
        U = np.empty_like(V)
        U[0] = self.hhalf * V[0]
        if m > 1:
            U[0] -= self.hz[0] * V[1]
        for i in range(1, m):
            U[i] = self.hz[i - 1] * V[i - 1]
            if i + 1 < m:
                U[i] -= self.hz[i] * V[i + 1]
        JU = (U @ self.Jt) if self.Jt is not None else self.Jcsr.dot(U.T).T
        return (V - JU).ravel()


class _KrylovF64Solver:
    """scipy BiCGSTAB/GMRES at 53 bits behind the MPVector interface."""

    def __init__(self, red, pre, cfg):
        self.ctx = cfg.s_ctx
        self.kind = cfg.inner
        self.cfg = cfg
        self.opf = _ReducedF64(red)
        mn = red.m * red.n
        self.shape = mn
        self.linop = scipy.sparse.linalg.LinearOperator(
            (mn, mn), matvec=self.opf.matvec)
        if pre is not None:
            self.M = scipy.sparse.linalg.LinearOperator(
                (mn, mn), matvec=pre.solve_f64)
        else:
            self.M = None
        self.iterations = 0

    def solve(self, v):
        arr = v.to_floats()
        nd = np.linalg.norm(arr)
        if nd == 0.0:
            return MPVector.zeros(self.shape, self.ctx)
        # float64 dot products of a tiny rhs underflow; solve at unit scale
        arr = arr / nd
        count = [0]

        def cb(_):
            count[0] += 1

        if self.kind == BICGSTAB:
            x, info = scipy.sparse.linalg.bicgstab(
                self.linop, arr, rtol=self.cfg.krylov_tol, atol=0.0,
                maxiter=self.cfg.krylov_max_iter, M=self.M, callback=cb)
        else:
            x, info = scipy.sparse.linalg.gmres(
                self.linop, arr, rtol=self.cfg.krylov_tol, atol=0.0,
                restart=self.cfg.restart, maxiter=self.cfg.krylov_max_iter,
                M=self.M, callback=cb, callback_type="pr_norm")
        # scipy's early exit can skip the callback on a sub-iteration
        # convergence; the solve still cost one Krylov iteration
        self.iterations += max(count[0], 1)
        if info < 0:
            raise Breakdown(f"{self.kind}: parameter breakdown (info={info})")
        if info > 0:
            raise NotConverged(f"{self.kind}: no convergence in {info} iterations")
        true_res = np.linalg.norm(arr - self.opf.matvec(x))
        if not np.isfinite(true_res) or true_res > 10 * self.cfg.krylov_tol:
            raise NotConverged(
                f"{self.kind}: returned residual {true_res:.3e} above target")
        return MPVector.from_floats(x * nd, self.ctx)


class _KrylovMPSolver:
    """MP-lane Krylov solve of the S-precision reduced system."""

    def __init__(self, red, pre, cfg):
        self.ctx = cfg.s_ctx
        sJ = convert(red.J, cfg.s_ctx)
        szeta = convert(red.zeta, cfg.s_ctx)
        self.op = ReducedOperator(sJ, cfg.s_ctx.scalar(red.h), szeta, red.m)
        self.pre = pre
        self.cfg = cfg
        self.iterations = 0

    def solve(self, v):
        if self.cfg.inner == BICGSTAB:
            x, it = bicgstab(self.op, v, self.pre, self.ctx,
                             self.cfg.krylov_tol, self.cfg.krylov_max_iter)
        else:
            x, it = gmres(self.op, v, self.pre, self.ctx, self.cfg.krylov_tol,
                          self.cfg.restart, self.cfg.krylov_max_iter)
        self.iterations += it
        return x


def _build_s_solver(red, cfg):
    if cfg.inner == DIRECT_LU:
        return _DirectSSolver(block_lu_precond(red, cfg.s_ctx))
    pre = None
    if cfg.precondition == PRECOND_BLOCK_LU_S:
        pre = block_lu_precond(red, cfg.s_ctx)
    if cfg.s_ctx.bits == 53:
        return _KrylovF64Solver(red, pre, cfg)
    return _KrylovMPSolver(red, pre, cfg)


# ---------------------------------------------------------------------------
# Newton drivers


def _kron_rows(rows, blocks, ctx, negate=False):
    """out_i = sum_j rows[i][j] * blocks[j] (optionally negated)."""
    n = len(blocks[0].data)
    fma = ctx.fma
    out = []
    for row in rows:
        acc = [mpfr(0)] * n
        for w, blk in zip(row, blocks):
            if w == 0:
                continue
            data = blk.data
            ww = ctx.neg(w) if negate else w
            acc = [fma(ww, data[p], acc[p]) for p in range(n)]
        out.append(MPVector(acc, ctx))
    return out


_LINEAR_FAILURES = (RefinementStalled, Breakdown, NotConverged, SingularMatrix,
                    NonFiniteValue)


def simplified_newton(prob, t, wt, x0, y0, h, opt):
    """Simplified Newton on the W-transformed stage system.

    The Jacobian is evaluated once at (x0, y0); each iteration solves
    (I - h X kron J) Zhat = (W^T B kron I)(-F(Y)) by the configured linear
    path and maps the increment back with (W kron I).  Returns the m stage
    vectors and an InnerReport.
    """
    cfg = opt.refinement
    lctx = cfg.l_ctx
    if lctx.bits != prob.ctx.bits or t.ctx.bits != lctx.bits:
        raise DimensionMismatch("problem, tableau and L context disagree")
    m, n = t.m, prob.n
    hs = lctx.scalar(h)
    if not hs > 0:
        raise ValueError("step size must be positive")
    J = prob.jac(x0, y0)
    red = assemble_reduced(J, hs, wt)
    try:
        solver = _build_s_solver(red, cfg)
    except _LINEAR_FAILURES as exc:
        raise InnerDivergence(f"linear setup failed: {exc}") from exc

    W = wt.W
    wtb_rows = [[lctx.mul(W[j, i], wt.bdiag[j]) for j in range(m)]
                for i in range(m)]
    w_rows = [[W[i, j] for j in range(m)] for i in range(m)]
    xs = [lctx.fma(t.c[i], hs, x0) for i in range(m)]
    arow = [[lctx.mul(hs, t.A[i, j]) for j in range(m)] for i in range(m)]

    Y = [y0.copy() for _ in range(m)]
    newton_iters = 0
    refine_total = 0
    converged = False
    final_norm = mpfr("inf")
    inc_history = []
    for _ in range(opt.max_newton):
        fs = [prob.f(xs[j], Y[j]) for j in range(m)]
        F = []
        for i in range(m):
            acc = _kron_rows([arow[i]], fs, lctx)[0]  # h * sum_j a_ij f_j
            F.append((Y[i] - y0) - acc)
        rhs_blocks = _kron_rows(wtb_rows, F, lctx, negate=True)
        d = MPVector.concat(rhs_blocks)
        try:
            zhat, r_iters = mixed_refine(solver, red, d, cfg)
        except _LINEAR_FAILURES as exc:
            raise InnerDivergence(f"stage linear solve failed: {exc}") from exc
        refine_total += r_iters
        z_blocks = _kron_rows(w_rows, zhat.split(m), lctx)
        nz = mpfr(0)
        ny = mpfr(0)
        for i in range(m):
            Y[i] = Y[i] + z_blocks[i]
            nz = max(nz, z_blocks[i].norm_inf())
            ny = max(ny, Y[i].norm_inf())
        newton_iters += 1
        final_norm = nz
        if nz <= lctx.mul(opt.newton_tol, lctx.add(mpfr(1), ny)):
            converged = True
            break
        inc_history.append(nz)
        if len(inc_history) >= 4 and all(
                inc_history[-k] > inc_history[-k - 1] for k in (1, 2, 3)):
            raise InnerDivergence(
                f"increment norms grew three times in a row "
                f"(last {float(nz):.3e})")
    return Y, InnerReport(newton_iters, solver.iterations, refine_total,
                          converged, final_norm)


class _QuasiOperator:
    """I_mn - (h a_pq J_p) blocks, applied implicitly at L precision."""

    def __init__(self, jacs, harow, m, n, ctx):
        self.jacs = jacs
        self.harow = harow
        self.m, self.n = m, n
        self.ctx = ctx

    def apply(self, v):
        blocks = v.split(self.m)
        ctx = self.ctx
        out = []
        for p in range(self.m):
            u = _kron_rows([self.harow[p]], blocks, ctx)[0]
            ju = self.jacs[p].matvec(u)
            out.append(blocks[p].axpy(mpfr(-1), ju))
        return MPVector.concat(out)


class _QuasiDirectF64:
    def __init__(self, jacs, harow, m, n, ctx):
        self.ctx = ctx
        mn = m * n
        K = np.eye(mn)
        for p in range(m):
            Jf = (_band_to_csr(jacs[p]).toarray()
                  if isinstance(jacs[p], BandedMatrix)
                  else jacs[p].to_float_array())
            for q in range(m):
                K[p * n:(p + 1) * n, q * n:(q + 1) * n] -= float(harow[p][q]) * Jf
        lu, piv, info = _lapack.dgetrf(K)
        if info != 0:
            raise SingularMatrix(f"quasi-Newton 53-bit LU failed (info={info})")
        self.lu, self.piv = lu, piv
        self.iterations = 0

    def solve(self, v):
        self.iterations += 1
        x, info = _lapack.dgetrs(self.lu, self.piv, v.to_floats())
        if info != 0:
            raise SingularMatrix(f"quasi-Newton 53-bit solve failed (info={info})")
        return MPVector.from_floats(x, self.ctx)


class _QuasiDirectMP:
    def __init__(self, jacs, harow, m, n, ctx):
        self.ctx = ctx
        mn = m * n
        big = MPMatrix.zeros(mn, mn, ctx)
        one = mpfr(1)
        mul, sub = ctx.mul, ctx.sub
        for p in range(m):
            Jp = jacs[p].to_dense() if isinstance(jacs[p], BandedMatrix) else jacs[p]
            Jp = convert(Jp, ctx)
            for q in range(m):
                ha = ctx.scalar(harow[p][q])
                if ha == 0 and p != q:
                    continue
                for i in range(n):
                    row = big.data[p * n + i]
                    jrow = Jp.data[i]
                    for j in range(n):
                        v = ctx.neg(mul(ha, jrow[j]))
                        if p == q and i == j:
                            v = ctx.add(one, v)
                        row[q * n + j] = v
        self.factor = lu_factor(big)
        self.iterations = 0

    def solve(self, v):
        self.iterations += 1
        return self.factor.solve(v)


def quasi_newton(prob, t, x0, y0, h, opt):
    """Frozen-Jacobian Newton on the full mn-dimensional stage-derivative
    system.  J_p is evaluated once at the initial-guess stage arguments
    (k0_i = f at the abscissae from y0) and never refreshed.  The S side
    factors the whole mn x mn matrix; L applications stay implicit.
    Returns the m stage derivative vectors and an InnerReport.
    """
    cfg = opt.refinement
    lctx = cfg.l_ctx
    if lctx.bits != prob.ctx.bits or t.ctx.bits != lctx.bits:
        raise DimensionMismatch("problem, tableau and L context disagree")
    m, n = t.m, prob.n
    hs = lctx.scalar(h)
    if not hs > 0:
        raise ValueError("step size must be positive")
    xs = [lctx.fma(t.c[i], hs, x0) for i in range(m)]
    harow = [[lctx.mul(hs, t.A[i, j]) for j in range(m)] for i in range(m)]
    k = [prob.f(xs[i], y0) for i in range(m)]
    jacs = []
    for p in range(m):
        arg = y0 + _kron_rows([harow[p]], k, lctx)[0]
        jacs.append(prob.jac(xs[p], arg))
    op_l = _QuasiOperator(jacs, harow, m, n, lctx)
    try:
        if cfg.s_ctx.bits == 53:
            solver = _QuasiDirectF64(jacs, harow, m, n, cfg.s_ctx)
        else:
            solver = _QuasiDirectMP(jacs, harow, m, n, cfg.s_ctx)
    except _LINEAR_FAILURES as exc:
        raise InnerDivergence(f"linear setup failed: {exc}") from exc

    newton_iters = 0
    refine_total = 0
    converged = False
    final_norm = mpfr("inf")
    inc_history = []
    for _ in range(opt.max_newton):
        G = []
        for i in range(m):
            arg = y0 + _kron_rows([harow[i]], k, lctx)[0]
            G.append(k[i] - prob.f(xs[i], arg))
        d = MPVector.concat([-g for g in G])
        try:
            z, r_iters = mixed_refine(solver, op_l, d, cfg)
        except _LINEAR_FAILURES as exc:
            raise InnerDivergence(f"stage linear solve failed: {exc}") from exc
        refine_total += r_iters
        z_blocks = z.split(m)
        nz = mpfr(0)
        nk = mpfr(0)
        for i in range(m):
            k[i] = k[i] + z_blocks[i]
            nz = max(nz, z_blocks[i].norm_inf())
            nk = max(nk, k[i].norm_inf())
        newton_iters += 1
        final_norm = nz
        if nz <= lctx.mul(opt.newton_tol, lctx.add(mpfr(1), nk)):
            converged = True
            break
        inc_history.append(nz)
        if len(inc_history) >= 4 and all(
                inc_history[-j] > inc_history[-j - 1] for j in (1, 2, 3)):
            raise InnerDivergence(
                f"increment norms grew three times in a row "
                f"(last {float(nz):.3e})")
    return k, InnerReport(newton_iters, solver.iterations, refine_total,
                          converged, final_norm)
