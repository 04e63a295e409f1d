"""Step loop: one implicit RK step with embedded error estimate,
accept/reject logic, step-size control, and run reporting.

A step solves the stage system (simplified Newton on the transformed
tridiagonal form, or quasi-Newton on the full system), forms the base
update from the stage derivatives and a companion lower-order value from
the embedded weights, and measures their difference in a scaled RMS norm.
The controller shrinks or grows the step from that estimate.
"""

import time

from gmpy2 import mpfr
import gmpy2

from .mpnum import MPVector
from .inner import InnerDivergence, InnerReport, quasi_newton, simplified_newton


class StepFailed(Exception):
    """The inner iteration failed with no room left to shrink the step."""


class MaxStepsExceeded(Exception):
    """Step budget exhausted before reaching the end of the interval."""


class ZeroDenominator(Exception):
    """Error-norm scaling hit atol = 0 with both reference entries zero."""


class StepControl:
    """Accept/reject thresholds and step-size update parameters.

    atol/rtol scale the error norm (not both zero), `safety` multiplies the
    controller factor, `exponent_order` is the m in err^(-1/(m+1)),
    `exponent_sign` -1 for the standard controller (+1 reproduces the
    shrink-on-small-error variant for comparison runs), h_min/h_max bound
    the step absolutely (h_max=None means unbounded), max_growth/max_shrink
    bound the per-step change factor.
    """

    __slots__ = ("ctx", "atol", "rtol", "safety", "exponent_order",
                 "exponent_sign", "h_min", "h_max", "max_growth",
                 "max_shrink", "accept_threshold")

    def __init__(self, ctx, exponent_order, atol, rtol, safety="0.9",
                 exponent_sign=-1, h_min=0, h_max=None, max_growth=5,
                 max_shrink="0.1", accept_threshold=1):
        self.ctx = ctx
        self.atol = ctx.scalar(atol)
        self.rtol = ctx.scalar(rtol)
        if self.atol < 0 or self.rtol < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.atol == 0 and self.rtol == 0:
            raise ValueError("atol and rtol cannot both be zero")
        self.safety = ctx.scalar(safety)
        if not 0 < self.safety < 1:
            raise ValueError("safety must lie in (0, 1)")
        self.exponent_order = int(exponent_order)
        if self.exponent_order < 1:
            raise ValueError("exponent_order must be at least 1")
        if exponent_sign not in (-1, 1):
            raise ValueError("exponent_sign must be -1 or +1")
        self.exponent_sign = exponent_sign
        self.h_min = ctx.scalar(h_min)
        self.h_max = None if h_max is None else ctx.scalar(h_max)
        if self.h_max is not None and self.h_min > self.h_max:
            raise ValueError("h_min exceeds h_max")
        self.max_growth = ctx.scalar(max_growth)
        self.max_shrink = ctx.scalar(max_shrink)
        if not self.max_growth > 1 or not 0 < self.max_shrink < 1:
            raise ValueError("growth factor must exceed 1, shrink must be in (0,1)")
        self.accept_threshold = ctx.scalar(accept_threshold)
        if not self.accept_threshold > 0:
            raise ValueError("accept_threshold must be positive")


class StepResult:
    """One attempted step: both candidate values, the error estimate, the
    step actually used and the proposed next one."""

    __slots__ = ("y_next", "y_hat", "err_norm", "h_used", "h_next",
                 "accepted", "inner")

    def __init__(self, y_next, y_hat, err_norm, h_used, h_next, accepted,
                 inner):
        self.y_next = y_next
        self.y_hat = y_hat
        self.err_norm = err_norm
        self.h_used = h_used
        self.h_next = h_next
        self.accepted = accepted
        self.inner = inner


class RunReport:
    """Outcome of one integration run.

    history rows are (index, x, h, err_norm, accepted, newton_iters,
    linear_iters); max/min_rel_error are filled when the problem carries an
    exact solution and at least one step was accepted.
    """

    __slots__ = ("steps_accepted", "steps_rejected", "final_x", "final_y",
                 "max_rel_error", "min_rel_error", "wall_time", "history")

    def __init__(self):
        self.steps_accepted = 0
        self.steps_rejected = 0
        self.final_x = None
        self.final_y = None
        self.max_rel_error = None
        self.min_rel_error = None
        self.wall_time = 0.0
        self.history = []


def error_norm(y_next, y_hat, y_prev, atol, rtol):
    """Scaled RMS difference of the two candidate step values:
    sqrt((1/n) sum_j (|yhat_j - y_j| / (atol + rtol*max(|y_j|, |yprev_j|)))^2).
    """
    ctx = y_next.ctx
    n = len(y_next.data)
    cabs, sub, fma, div = ctx.abs, ctx.sub, ctx.fma, ctx.div
    s = mpfr(0)
    for j in range(n):
        ref = max(cabs(y_next.data[j]), cabs(y_prev.data[j]))
        denom = fma(rtol, ref, atol)
        if denom == 0:
            raise ZeroDenominator(
                f"component {j}: atol = 0 and both step values are zero")
        q = div(cabs(sub(y_hat.data[j], y_next.data[j])), denom)
        s = fma(q, q, s)
    return ctx.sqrt(div(s, mpfr(n)))


def next_step_size(err_norm, h, ctl):
    """safety * err^(sign/(order+1)) * h, clamped to the per-step change
    factors and then to [h_min, h_max].  err = 0 maps to max growth."""
    ctx = ctl.ctx
    h = ctx.scalar(h)
    lo = ctx.mul(h, ctl.max_shrink)
    hi = ctx.mul(h, ctl.max_growth)
    if err_norm == 0:
        cand = hi
    else:
        p = ctx.div(mpfr(ctl.exponent_sign),
                    mpfr(ctl.exponent_order + 1))
        fac = ctx.exp(ctx.mul(p, ctx.log(err_norm)))
        cand = ctx.mul(ctx.mul(ctl.safety, fac), h)
        if cand < lo:
            cand = lo
        elif cand > hi:
            cand = hi
    if cand < ctl.h_min:
        cand = ctl.h_min
    if ctl.h_max is not None and cand > ctl.h_max:
        cand = ctl.h_max
    return cand


def _reject_step_size(h, ctl):
    ctx = ctl.ctx
    cand = ctx.mul(h, ctl.max_shrink)
    if cand < ctl.h_min:
        cand = ctl.h_min
    return cand


def irk_step(prob, t, wt, e, x, y, h, opt, ctl):
    """Attempt one step of size h from (x, y).

    Stage derivatives come from the configured Newton mode; the base update
    is y + h sum_j b_j k_j, the companion value adds an explicit first stage
    weighted gamma0 and uses the embedded weights.  With ctl=None (fixed-step
    mode) or e=None no error test runs and convergence alone decides
    acceptance.  Inner divergence turns into a rejected step while the step
    can still shrink, StepFailed otherwise.
    """
    ctx = prob.ctx
    hs = ctx.scalar(h)
    if not hs > 0:
        raise ValueError("step size must be positive")
    try:
        if opt.mode == "quasi":
            ks, rep = quasi_newton(prob, t, x, y, hs, opt)
        else:
            if wt is None:
                raise ValueError("simplified Newton requires transform data")
            Y, rep = simplified_newton(prob, t, wt, x, y, hs, opt)
            ks = [prob.f(ctx.fma(t.c[i], hs, x), Y[i]) for i in range(t.m)]
    except InnerDivergence as exc:
        if ctl is None or hs <= ctl.h_min:
            raise StepFailed(
                f"stage iteration diverged at x={float(x)}, "
                f"h={float(hs)} with no room to shrink: {exc}") from exc
        rep = InnerReport(0, 0, 0, False, mpfr("inf"))
        return StepResult(y, y, mpfr("inf"), hs, _reject_step_size(hs, ctl),
                          False, rep)

    y_next = y
    for j in range(t.m):
        y_next = y_next.axpy(ctx.mul(hs, t.b[j]), ks[j])
    if e is not None:
        y_hat = y.axpy(ctx.mul(hs, e.gamma0), prob.f(x, y))
        for j in range(t.m):
            y_hat = y_hat.axpy(ctx.mul(hs, e.bhat[j]), ks[j])
    else:
        y_hat = y_next

    if ctl is not None and e is not None:
        err = error_norm(y_next, y_hat, y, ctl.atol, ctl.rtol)
    else:
        err = mpfr(0)
    if ctl is None:
        accepted = rep.converged
        h_next = hs
    else:
        accepted = rep.converged and err <= ctl.accept_threshold
        if rep.converged:
            h_next = next_step_size(err, hs, ctl)
        else:
            h_next = _reject_step_size(hs, ctl)
    return StepResult(y_next, y_hat, err, hs, h_next, accepted, rep)


def _rel_error(y, y_exact):
    num = (y - y_exact).norm_inf()
    den = y_exact.norm_inf()
    if den == 0:
        return num
    return y.ctx.div(num, den)


def integrate(prob, t, wt, e, span, y0, h0, opt, ctl=None, advance="base",
              max_steps=10_000_000, keep_history=True):
    """March irk_step across span = (x0, alpha).

    ctl=None runs fixed steps of h0 (the last one truncated to land exactly
    on alpha); otherwise the controller adapts h, retrying rejected steps
    without advancing.  advance="embedded" moves the trajectory along the
    companion value instead of the base one (order studies).  When the
    problem has an exact solution, per-point relative errors are tracked
    over the accepted steps.
    """
    if advance not in ("base", "embedded"):
        raise ValueError(f"unknown advance policy {advance!r}")
    if advance == "embedded" and e is None:
        raise ValueError("embedded advance needs embedded weights")
    ctx = prob.ctx
    x0, alpha = ctx.scalar(span[0]), ctx.scalar(span[1])
    if not alpha > x0:
        raise ValueError("the interval must have positive length")
    h = ctx.scalar(h0)
    if not h > 0:
        raise ValueError("the initial step must be positive")
    exact = getattr(prob, "exact", None)

    report = RunReport()
    start = time.perf_counter()
    x = x0
    y = y0.copy()
    total = 0
    while True:
        remaining = ctx.sub(alpha, x)
        if remaining <= 0:
            break
        if total >= max_steps:
            raise MaxStepsExceeded(
                f"{max_steps} steps without reaching x={float(alpha)} "
                f"(stopped at {float(x)})")
        total += 1
        hh = remaining if h >= remaining else h
        res = irk_step(prob, t, wt, e, x, y, hh, opt, ctl)
        if keep_history:
            report.history.append(
                (total, x, hh, res.err_norm, res.accepted,
                 res.inner.newton_iters, res.inner.linear_iters_total))
        if res.accepted:
            report.steps_accepted += 1
            x = alpha if hh == remaining else ctx.add(x, hh)
            y = res.y_hat if advance == "embedded" else res.y_next
            if exact is not None:
                rel = _rel_error(y, exact(x))
                if report.max_rel_error is None or rel > report.max_rel_error:
                    report.max_rel_error = rel
                if report.min_rel_error is None or rel < report.min_rel_error:
                    report.min_rel_error = rel
        else:
            report.steps_rejected += 1
            if ctl is None:
                raise StepFailed(
                    f"fixed-step run cannot recover a rejected step at "
                    f"x={float(x)}, h={float(hh)}")
            if res.h_next >= hh:
                raise StepFailed(
                    f"step rejected at x={float(x)} with h={float(hh)} "
                    f"already at the minimum")
        if ctl is not None:
            h = res.h_next
    report.final_x = x
    report.final_y = y
    report.wall_time = time.perf_counter() - start
    return report
