"""Acceptance gate: the end-to-end numerical contract, one criterion per test.

Run with `pytest tests/test_acceptance.py -v -s` to get one PASS/FAIL line
per criterion with the measured numbers. Each criterion carries a wall-time
budget that is asserted along with the numerics. Budgets are generous on
desktop hardware; the whole gate is minutes, so it is marked `acceptance`
and can be deselected with -m "not acceptance".

AC7 (van der Pol) is expected to FAIL on the step-size-pattern clause: the
unfiltered embedded estimate saturates on very stiff problems when the base
formula is not L-stable, pinning the accepted step size far below what the
smooth solution allows. The test measures and reports the pinning instead
of hiding it; the FAIL line carries the evidence.
"""

import csv
import json
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from mpirk.cli import main
from mpirk.inner import (BICGSTAB, DenseLUSolver, DenseOperator,
                         NewtonOptions, PRECOND_BLOCK_LU_S, PRECOND_NONE,
                         RefinementConfig, mixed_refine)
from mpirk.integrate import MaxStepsExceeded, StepControl, integrate, irk_step
from mpirk.mpnum import (MPMatrix, MPVector, PrecisionContext, cond_inf,
                         lu_factor)
from mpirk.problems import make_brusselator_1d, make_problem
from mpirk.tableau import (embedded_weights, gauss_tableau, order_residuals,
                           radau2a_tableau, stability_grid, w_transform)

pytestmark = pytest.mark.acceptance

CTX = PrecisionContext(167)
GAMMA0 = CTX.scalar("0.125")


def report(n, name, ok, detail):
    print(f"\nAC{n} {name}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)


def ls_slope(hs, errs):
    """Least-squares log2-log2 slope over the asymptotic samples (rel < 1)."""
    pts = [(math.log2(h), math.log2(e)) for h, e in zip(hs, errs) if e < 1]
    n = len(pts)
    sx = sum(p[0] for p in pts)
    sy = sum(p[1] for p in pts)
    sxx = sum(p[0] * p[0] for p in pts)
    sxy = sum(p[0] * p[1] for p in pts)
    return (n * sxy - sx * sy) / (n * sxx - sx * sx), n


def rel_inf(a, b):
    ctx = a.ctx
    return float(ctx.div((a - b).norm_inf(), b.norm_inf()))


def test_ac1_order_conditions():
    t0 = time.perf_counter()
    worst = 0.0
    for m in range(1, 16):
        rb, rc = order_residuals(gauss_tableau(m, CTX))
        worst = max(worst, float(rb), float(rc))
    rb, rc = order_residuals(radau2a_tableau(CTX))
    worst = max(worst, float(rb), float(rc))
    wall = time.perf_counter() - t0
    ok = worst < 1e-45 and wall < 5
    report(1, "quadrature/collocation conditions m=1..15", ok,
           f"worst residual {worst:.2e} < 1e-45, {wall:.2f}s < 5s")
    assert ok


def test_ac2_transform_conditioning():
    t0 = time.perf_counter()
    expected = {3: 3.24, 5: 6.27, 10: 16.4, 15: 29.3, 20: 44.5, 50: 172.0}
    measured = {}
    for m, want in expected.items():
        kappa = float(cond_inf(w_transform(gauss_tableau(m, CTX)).W))
        measured[m] = kappa
        assert abs(kappa - want) / want < 0.01, (m, kappa, want)
    wall = time.perf_counter() - t0
    ok = wall < 30
    report(2, "transform condition numbers", ok,
           "kappa " + " ".join(f"m{m}={v:.3g}" for m, v in measured.items())
           + f", all within 1%, {wall:.2f}s < 30s")
    assert ok


def test_ac3_convergence_orders():
    t0 = time.perf_counter()
    t = gauss_tableau(3, CTX)
    wt = w_transform(t)
    e = embedded_weights(t, GAMMA0)
    opt = NewtonOptions(RefinementConfig(CTX, CTX))
    prob = make_problem("mxy", CTX)
    exact10 = prob.exact(CTX.scalar(10))
    hs = [0.5 ** k for k in range(1, 7)]
    slopes = {}
    counts = {}
    for mode in ("base", "embedded"):
        errs = []
        for k in range(1, 7):
            rep = integrate(prob, t, wt, e, (0, 10), prob.y0,
                            Fraction(1, 2 ** k), opt, advance=mode,
                            keep_history=False)
            errs.append(rel_inf(rep.final_y, exact10))
        slopes[mode], counts[mode] = ls_slope(hs, errs)
    wall = time.perf_counter() - t0
    ok = (abs(slopes["base"] - 6.0) < 0.3 and abs(slopes["embedded"] - 3.0) < 0.3
          and counts["base"] >= 4 and counts["embedded"] >= 4 and wall < 60)
    report(3, "order check (y'=-xy, x=10)", ok,
           f"base slope {slopes['base']:.2f} (6.0+-0.3, {counts['base']} pts), "
           f"companion slope {slopes['embedded']:.2f} (3.0+-0.3, "
           f"{counts['embedded']} pts), {wall:.1f}s < 60s")
    assert ok


def test_ac4_refinement_matches_full_precision_lu():
    t0 = time.perf_counter()
    S = PrecisionContext(53)
    n = 128
    worst_rel = 0.0
    worst_iters = 0
    used = skipped = 0
    seed = 0
    while used < 20:
        seed += 1
        rng = random.Random(seed)
        A = MPMatrix([[CTX.scalar(rng.uniform(-1.0, 1.0)) for _ in range(n)]
                      for _ in range(n)], CTX)
        if np.linalg.cond(A.to_float_array(), np.inf) > 1e4:
            skipped += 1
            continue
        used += 1
        sign_rng = random.Random(1000 + seed)
        d = A.matvec(MPVector([CTX.scalar(sign_rng.choice((-1.0, 1.0)))
                               for _ in range(n)], CTX))
        x_ref = lu_factor(A).solve(d)
        norms = []
        x, iters = mixed_refine(DenseLUSolver(A, S), DenseOperator(A), d,
                                RefinementConfig(S, CTX, tol="1e-46"), norms)
        assert all(norms[i + 1] < norms[i] for i in range(len(norms) - 1)), \
            f"seed {seed}: residuals not strictly decreasing"
        worst_rel = max(worst_rel, rel_inf(x, x_ref))
        worst_iters = max(worst_iters, iters)
    wall = time.perf_counter() - t0
    ok = worst_rel < 1e-45 and worst_iters <= 10 and wall < 60
    report(4, "mixed refinement vs full-precision oracle", ok,
           f"20 systems ({skipped} seeds skipped for conditioning), worst "
           f"rel {worst_rel:.2e} < 1e-45, worst corrections {worst_iters} "
           f"<= 10, residuals strictly decreasing, {wall:.1f}s < 60s")
    assert ok


def test_ac5_benchmark_parity_and_speed(tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "bench.csv"
    rc = main(["bench", "linear", "--m-min", "3", "--m-max", "12",
               "--dim", "128", "--seed", "1", "--out", str(out)])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["status"] == "ok" for r in rows)
    cells = {(r["algorithm"], int(r["m"])): (float(r["rel_error"]),
                                             float(r["wall_time"]))
             for r in rows}
    algos = ("iterref-dm", "wtrans", "witerref-mm", "witerref-dm")
    worst_ratio = 0.0
    for m in range(3, 13):
        errs = [cells[a, m][0] for a in algos]
        worst_ratio = max(worst_ratio, max(errs) / min(errs))
    speed_ok = all(cells["witerref-dm", m][1] < cells["wtrans", m][1]
                   for m in range(8, 13))
    wall = time.perf_counter() - t0
    ok = worst_ratio <= 10 and speed_ok and wall < 600
    report(5, "four-path benchmark parity", ok,
           f"worst per-m error ratio {worst_ratio:.3f} <= 10, 53-bit refined "
           f"transform faster than full-precision transform for m=8..12: "
           f"{speed_ok}, {wall:.0f}s < 600s")
    assert ok


def test_ac6_lorenz_two_stage_counts_agree():
    t0 = time.perf_counter()
    ctx = PrecisionContext(233)
    prob = make_problem("lorenz", ctx)
    finals = {}
    steps = {}
    for m in (10, 15):
        t = gauss_tableau(m, ctx)
        wt = w_transform(t)
        e = embedded_weights(t, ctx.scalar("0.125"))
        opt = NewtonOptions(RefinementConfig(ctx, ctx))
        ctl = StepControl(ctx, e.order_hat, atol="0", rtol="1e-30")
        rep = integrate(prob, t, wt, e, (0, 1), prob.y0, Fraction(1, 100),
                        opt, ctl, keep_history=False)
        assert rep.final_x == ctx.scalar(1)
        finals[m] = rep.final_y
        steps[m] = (rep.steps_accepted, rep.steps_rejected)
    rel = rel_inf(finals[10], finals[15])
    wall = time.perf_counter() - t0
    ok = rel < 1e-25 and wall < 300
    report(6, "Lorenz cross-order consistency (233 bits)", ok,
           f"m=10 {steps[10][0]}+{steps[10][1]} steps, m=15 {steps[15][0]}"
           f"+{steps[15][1]} steps, final-state rel {rel:.2e} < 1e-25, "
           f"no unrecovered failures, {wall:.0f}s < 300s")
    assert ok


def test_ac7_van_der_pol_step_size_pattern():
    t0 = time.perf_counter()
    prob = make_problem("vdpol", CTX)
    t = gauss_tableau(15, CTX)
    wt = w_transform(t)
    e = embedded_weights(t, GAMMA0)
    opt = NewtonOptions(RefinementConfig(CTX, CTX))

    ctl = StepControl(CTX, e.order_hat, atol="0", rtol="1e-30")
    rep = integrate(prob, t, wt, e, (0, Fraction(1, 2)), prob.y0,
                    Fraction(1, 200), opt, ctl)
    completes = rep.final_x == CTX.scalar(Fraction(1, 2))
    acc_h = [row[2] for row in rep.history if row[4]]
    ratio = float(CTX.div(min(acc_h), max(acc_h)))

    # reference leg at rtol 1e-40, capped: measure where the controller pins
    ctl40 = StepControl(CTX, e.order_hat, atol="0", rtol="1e-40")
    cap = 25_000
    x = CTX.scalar(0)
    y = prob.y0
    h = CTX.scalar(Fraction(1, 200))
    taken = 0
    ref_final = None
    for _ in range(cap):
        res = irk_step(prob, t, wt, e, x, y, h, opt, ctl40)
        if res.accepted:
            x = CTX.add(x, h)
            y = res.y_next
            taken += 1
        h = res.h_next
        remaining = CTX.sub(CTX.scalar(Fraction(1, 2)), x)
        if remaining <= 0:
            ref_final = y
            break
        if h > remaining:
            h = remaining
    ref_done = ref_final is not None
    pinned = float(h)
    projected = taken + (0.5 - float(x)) / pinned if not ref_done else taken
    conv = rel_inf(rep.final_y, ref_final) if ref_done else None

    wall = time.perf_counter() - t0
    ok = completes and ratio < 1e-4 and ref_done and wall < 600 and (
        conv is not None and conv <= 1e-25)
    detail = (f"rtol 1e-30 run completes: {completes} "
              f"({rep.steps_accepted}+{rep.steps_rejected} steps); accepted-h "
              f"min/max ratio {ratio:.2e} (need < 1e-4, h in "
              f"[{float(min(acc_h)):.2e}, {float(max(acc_h)):.2e}]); rtol "
              f"1e-40 reference ")
    if ref_done:
        detail += f"completes, self-convergence {conv:.2e} (need <= 1e-25); "
    else:
        detail += (f"PINNED at h={pinned:.2e} after {cap} attempts "
                   f"(x={float(x):.3f}, projected ~{projected:.0f} steps), "
                   f"self-convergence not evaluable in budget; ")
    detail += (f"{wall:.0f}s budget 600s. The companion-formula error "
               f"estimate saturates at gamma0*|h*lambda|*(stiff deviation) "
               f"because the base formula is not L-stable, so the controller "
               f"pins h near the accumulation equilibrium instead of "
               f"growing it on the smooth phase")
    report(7, "van der Pol step-size pattern", ok, detail)
    assert ok, detail


def test_ac8_brusselator_preconditioning():
    t0 = time.perf_counter()
    S = PrecisionContext(53)
    prob = make_problem("bruss1d:50", CTX)
    t = gauss_tableau(10, CTX)
    wt = w_transform(t)
    e = embedded_weights(t, GAMMA0)
    ctl = StepControl(CTX, e.order_hat, atol="1e-20", rtol="1e-20")
    finals = {}
    accepted = {}
    linear = {}
    for precond in (PRECOND_BLOCK_LU_S, PRECOND_NONE):
        cfg = RefinementConfig(S, CTX, inner=BICGSTAB, precondition=precond)
        rep = integrate(prob, t, wt, e, (0, 1), prob.y0, Fraction(1, 100),
                        NewtonOptions(cfg), ctl)
        assert rep.final_x == CTX.scalar(1)
        finals[precond] = rep.final_y
        accepted[precond] = rep.steps_accepted
        linear[precond] = sum(row[6] for row in rep.history)
    rel = rel_inf(finals[PRECOND_BLOCK_LU_S], finals[PRECOND_NONE])

    # banded Jacobian-vector products must be bit-identical to the dense form
    dense = make_brusselator_1d(20, CTX, banded=False)
    banded = make_brusselator_1d(20, CTX, banded=True)
    rng = random.Random(7)
    bit_exact = True
    for _ in range(5):
        yv = MPVector([CTX.scalar(rng.uniform(0.0, 3.0)) for _ in range(40)], CTX)
        v = MPVector([CTX.scalar(rng.uniform(-1.0, 1.0)) for _ in range(40)], CTX)
        x0 = CTX.scalar(0)
        jd = dense.jac(x0, yv).matvec(v)
        jb = banded.jac(x0, yv).matvec(v)
        bit_exact &= all(a == b for a, b in zip(jd.data, jb.data))

    wall = time.perf_counter() - t0
    ok = (accepted[PRECOND_BLOCK_LU_S] <= accepted[PRECOND_NONE]
          and rel < 1e-15 and bit_exact and wall < 900)
    report(8, "Brusselator banded Krylov with S-precision block preconditioner",
           ok,
           f"accepted {accepted[PRECOND_BLOCK_LU_S]} (preconditioned, "
           f"{linear[PRECOND_BLOCK_LU_S]} linear iters) <= "
           f"{accepted[PRECOND_NONE]} (none, {linear[PRECOND_NONE]} linear "
           f"iters), finals rel {rel:.2e} < 1e-15, banded J*v bit-exact: "
           f"{bit_exact}, {wall:.0f}s < 900s")
    assert ok


def test_ac9_stability_regions():
    t0 = time.perf_counter()
    g3 = gauss_tableau(3, CTX)
    e_g = embedded_weights(g3, GAMMA0)
    r = radau2a_tableau(CTX)
    # classic companion-weight choice for Radau IIA: the real eigenvalue of A
    ln3 = CTX.log(CTX.scalar(3))
    gam_r = CTX.div(CTX.scalar(1), CTX.sub(
        CTX.add(CTX.scalar(3), CTX.exp(CTX.mul(ln3, CTX.scalar(Fraction(2, 3))))),
        CTX.exp(CTX.mul(ln3, CTX.scalar(Fraction(1, 3))))))
    e_r = embedded_weights(r, gam_r)
    rect = (("-6", "0"), ("-6", "6"), 61, 121)

    guard = CTX.add(CTX.scalar(1), CTX.scalar(Fraction(1, 2 ** (CTX.bits - 24))))
    base = stability_grid(g3, None, *rect)
    base_max = max(v[2] for v in base)
    emb_over = sum(1 for v in stability_grid(g3, e_g, *rect) if v[2] > 1)
    radau_over = sum(1 for v in stability_grid(r, e_r, *rect)
                     if v[2] > 1 and v[0] < 0)
    wall = time.perf_counter() - t0
    ok = base_max <= guard and emb_over >= 1 and radau_over >= 1 and wall < 30
    report(9, "stability regions", ok,
           f"base max |R| {float(base_max):.15f} <= 1+2^-{CTX.bits - 24} over "
           f"{len(base)} samples, companion samples over 1: {emb_over}, "
           f"Radau companion strict-left samples over 1: {radau_over}, "
           f"{wall:.1f}s < 30s")
    assert ok


def test_ac10_report_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.delenv("MPIRK_BITS", raising=False)
    args = ["solve", "--problem", "bruss1d:6", "--solver", "bicgstab",
            "--precondition", "block-lu-s", "--s-bits", "53",
            "--rtol", "1e-12", "--atol", "1e-12", "--interval", "0:0.1"]
    docs = []
    for sub in ("first", "second"):
        d = tmp_path / sub
        d.mkdir()
        monkeypatch.chdir(d)
        assert main(args) == 0
        doc = json.loads((d / "report.json").read_text())
        doc.pop("wall_time")
        docs.append(doc)
    wall = time.perf_counter() - t0
    ok = docs[0] == docs[1]
    report(10, "bit-identical reports", ok,
           f"two runs, report.json equal excluding wall_time: {ok}, "
           f"{wall:.1f}s")
    assert ok
