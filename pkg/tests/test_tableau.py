"""Tableau generation, W-transformation, embedded weights, stability."""

import random

import gmpy2
import pytest
from gmpy2 import mpfr

from mpirk.mpnum import (
    MPMatrix,
    MPVector,
    PrecisionContext,
    SingularMatrix,
    cond_inf,
    convert,
)
from mpirk.tableau import (
    GAUSS,
    RADAU2A,
    EmbeddedWeights,
    SingularAtZ,
    Tableau,
    embedded_weights,
    gauss_tableau,
    radau2a_tableau,
    shifted_legendre,
    stability_grid,
    stability_value,
    tableau_from_json,
    tableau_to_json,
    w_transform,
    zeta_values,
    _eval_binomial,
    _recurrence_pair,
)

CTX = PrecisionContext(167)


def order_residuals(t):
    """Max B(2m) and C(m) residuals of a tableau, measured at its precision."""
    ctx = t.ctx
    m = t.m
    pows = []
    for j in range(m):
        col = [mpfr(1)]
        for _ in range(2 * m - 1):
            col.append(ctx.mul(col[-1], t.c[j]))
        pows.append(col)
    worst_b = mpfr(0)
    for q in range(1, 2 * m + 1):
        s = mpfr(0)
        for j in range(m):
            s = ctx.fma(t.b[j], pows[j][q - 1], s)
        r = ctx.abs(ctx.sub(s, ctx.div(mpfr(1), mpfr(q))))
        worst_b = max(worst_b, r)
    worst_c = mpfr(0)
    for i in range(m):
        cpow = mpfr(1)
        for q in range(1, m + 1):
            cpow = ctx.mul(cpow, t.c[i])
            s = mpfr(0)
            for j in range(m):
                s = ctx.fma(t.A[i, j], pows[j][q - 1], s)
            r = ctx.abs(ctx.sub(s, ctx.div(cpow, mpfr(q))))
            worst_c = max(worst_c, r)
    return worst_b, worst_c


class TestGauss:
    def test_midpoint_m1(self):
        t = gauss_tableau(1, CTX)
        assert t.c[0] == mpfr(1) / 2
        assert t.b[0] == 1
        assert t.A[0, 0] == mpfr(1) / 2
        assert t.order == 2 and t.family == GAUSS

    def test_m2_closed_form(self):
        t = gauss_tableau(2, CTX)
        s3_6 = CTX.div(CTX.sqrt(mpfr(3)), mpfr(6))
        half = CTX.scalar("0.5")
        quarter = CTX.scalar("0.25")
        tol = 1e-48
        assert abs(float(CTX.sub(t.c[0], CTX.sub(half, s3_6)))) < tol
        assert abs(float(CTX.sub(t.c[1], CTX.add(half, s3_6)))) < tol
        assert abs(float(CTX.sub(t.b[0], half))) < tol
        assert abs(float(CTX.sub(t.A[0, 0], quarter))) < tol
        assert abs(float(CTX.sub(t.A[0, 1], CTX.sub(quarter, s3_6)))) < tol
        assert abs(float(CTX.sub(t.A[1, 0], CTX.add(quarter, s3_6)))) < tol

    def test_m3_closed_form(self):
        t = gauss_tableau(3, CTX)
        s15_10 = CTX.div(CTX.sqrt(mpfr(15)), mpfr(10))
        half = CTX.scalar("0.5")
        tol = 1e-48
        assert abs(float(CTX.sub(t.c[0], CTX.sub(half, s15_10)))) < tol
        assert abs(float(CTX.sub(t.c[1], half))) < tol
        assert abs(float(CTX.sub(t.c[2], CTX.add(half, s15_10)))) < tol
        for got, num, den in zip(t.b, (5, 4, 5), (18, 9, 18)):
            assert abs(float(CTX.sub(got, CTX.div(mpfr(num), mpfr(den))))) < tol

    def test_order_conditions_through_m15(self):
        tol = float(gmpy2.exp2(16 - CTX.bits))
        for m in range(1, 16):
            t = gauss_tableau(m, CTX)
            wb, wc = order_residuals(t)
            assert float(wb) <= tol, f"B(2m) residual {float(wb)} at m={m}"
            assert float(wc) <= tol, f"C(m) residual {float(wc)} at m={m}"

    def test_row_sums_and_weight_sum(self):
        for m in (1, 4, 9):
            t = gauss_tableau(m, CTX)
            s = mpfr(0)
            for x in t.b:
                s = CTX.add(s, x)
            assert abs(float(CTX.sub(s, mpfr(1)))) < 1e-48
            for i in range(m):
                rs = mpfr(0)
                for j in range(m):
                    rs = CTX.add(rs, t.A[i, j])
                assert abs(float(CTX.sub(rs, t.c[i]))) < 1e-48

    def test_stage_count_range(self):
        with pytest.raises(ValueError):
            gauss_tableau(0, CTX)
        with pytest.raises(ValueError):
            gauss_tableau(51, CTX)

    def test_respects_precision(self):
        t = gauss_tableau(4, PrecisionContext(84))
        assert t.ctx.bits == 84
        assert t.c[0].precision == 84


class TestRadau:
    def test_closed_forms(self):
        t = radau2a_tableau(CTX)
        s6 = CTX.sqrt(mpfr(6))
        assert t.c[2] == 1
        assert t.order == 5 and t.family == RADAU2A and t.m == 3
        b1 = CTX.div(CTX.sub(mpfr(16), s6), mpfr(36))
        assert t.b[0] == b1
        assert t.b[2] == CTX.div(mpfr(1), mpfr(9))
        c1 = CTX.div(CTX.sub(mpfr(4), s6), mpfr(10))
        assert t.c[0] == c1

    def test_stiffly_accurate(self):
        t = radau2a_tableau(CTX)
        for j in range(3):
            assert t.A[2, j] == t.b[j]

    def test_row_sums_and_order5_quadrature(self):
        t = radau2a_tableau(CTX)
        for i in range(3):
            rs = mpfr(0)
            for j in range(3):
                rs = CTX.add(rs, t.A[i, j])
            assert abs(float(CTX.sub(rs, t.c[i]))) < 1e-49
        # order-5 quadrature conditions sum b c^(q-1) = 1/q, q = 1..5
        for q in range(1, 6):
            s = mpfr(0)
            for j in range(3):
                p = mpfr(1)
                for _ in range(q - 1):
                    p = CTX.mul(p, t.c[j])
                s = CTX.fma(t.b[j], p, s)
            assert abs(float(CTX.sub(s, CTX.div(mpfr(1), mpfr(q))))) < 1e-49


class TestShiftedLegendre:
    def test_degree_zero_is_one(self):
        assert shifted_legendre(0, CTX.scalar("0.37"), CTX) == 1

    def test_degree_one_root_at_midpoint(self):
        assert shifted_legendre(1, CTX.scalar("0.5"), CTX) == 0

    def test_degree_two_at_zero(self):
        # sqrt(5) * (6x^2 - 6x + 1) at x=0
        assert shifted_legendre(2, CTX.scalar(0), CTX) == CTX.sqrt(mpfr(5))

    def test_binomial_and_recurrence_agree(self):
        # the alternating sum cancels up to ~(1+sqrt(2))^(2j) of its own
        # terms, so agreement is measured against that magnitude
        from mpirk.tableau import _binomial_coeffs
        rng = random.Random(41)
        tol = float(gmpy2.exp2(24 - CTX.bits))
        for j in range(2, 21):
            for _ in range(5):
                xf = rng.uniform(0, 1)
                x = CTX.scalar(xf)
                a = _eval_binomial(j, x, CTX)
                b = _recurrence_pair(j, x, CTX)[0]
                scale = sum(abs(co) * xf ** k
                            for k, co in enumerate(_binomial_coeffs(j)))
                assert abs(float(CTX.sub(a, b))) <= tol * max(1.0, scale)

    def test_degree_bounds(self):
        with pytest.raises(ValueError):
            shifted_legendre(61, CTX.scalar(0.5), CTX)
        with pytest.raises(ValueError):
            shifted_legendre(-1, CTX.scalar(0.5), CTX)

    def test_context_from_operand(self):
        x = PrecisionContext(84).scalar("0.25")
        v = shifted_legendre(3, x)
        assert v.precision == 84


class TestWTransform:
    def test_zeta_closed_form(self):
        z = zeta_values(4, CTX)
        want = CTX.div(mpfr(1), CTX.mul(mpfr(2), CTX.sqrt(mpfr(3))))
        assert z[0] == want
        assert abs(float(z[0]) - 0.2886751345948129) < 1e-15

    def test_identities_entrywise_through_m15(self):
        work = PrecisionContext(350)
        tol = float(gmpy2.exp2(8 - CTX.bits))
        from mpirk.tableau import _x_closed_form
        for m in range(2, 16):
            t = gauss_tableau(m, CTX)
            wt = w_transform(t)
            Ww = convert(wt.W, work)
            Bw = MPMatrix.zeros(m, m, work)
            for i in range(m):
                Bw[i, i] = gmpy2.mpfr(t.b[i], precision=work.bits)
            WtB = Ww.transpose().matmul(Bw)
            D = WtB.matmul(Ww)
            dev_d = max(abs(float(work.sub(D[i, j], mpfr(1 if i == j else 0))))
                        for i in range(m) for j in range(m))
            assert dev_d <= tol, f"W^T B W off by {dev_d} at m={m}"
            X = WtB.matmul(convert(t.A, work)).matmul(Ww)
            Xc = _x_closed_form(m, zeta_values(m, work), work)
            dev_x = max(abs(float(work.sub(X[i, j], Xc[i, j])))
                        for i in range(m) for j in range(m))
            assert dev_x <= tol, f"W^T B A W off by {dev_x} at m={m}"

    def test_m3_identity_norm(self):
        wt = w_transform(gauss_tableau(3, CTX))
        b = wt.bdiag
        B = MPMatrix.zeros(3, 3, CTX)
        for i in range(3):
            B[i, i] = b[i]
        D = wt.W.transpose().matmul(B).matmul(wt.W)
        dev = (D - MPMatrix.identity(3, CTX)).norm_inf()
        assert float(dev) < 1e-45

    def test_condition_numbers_match_reference(self):
        for m, want in ((3, 3.24), (5, 6.27)):
            wt = w_transform(gauss_tableau(m, CTX))
            k = float(cond_inf(wt.W))
            assert abs(k - want) / want < 0.01

    def test_x_matches_stored(self):
        wt = w_transform(gauss_tableau(6, CTX))
        assert abs(float(CTX.sub(wt.X[0, 0], CTX.scalar("0.5")))) < 1e-48
        for k in range(5):
            assert abs(float(CTX.add(wt.X[k, k + 1], wt.zeta[k]))) < 1e-48
            assert abs(float(CTX.sub(wt.X[k + 1, k], wt.zeta[k]))) < 1e-48

    def test_radau_rejected(self):
        with pytest.raises(ValueError):
            w_transform(radau2a_tableau(CTX))


class TestEmbedded:
    def test_weight_sum_gauss_m3(self):
        t = gauss_tableau(3, CTX)
        e = embedded_weights(t, "0.125")
        s = mpfr(0)
        for x in e.bhat:
            s = CTX.add(s, x)
        assert abs(float(CTX.sub(s, CTX.scalar("0.875")))) < 1e-48
        assert e.order_hat == 3

    def test_gamma_zero_reduces_to_base(self):
        tol = float(gmpy2.exp2(24 - CTX.bits))
        for t in (gauss_tableau(3, CTX), radau2a_tableau(CTX)):
            e = embedded_weights(t, 0)
            for bh, b in zip(e.bhat, t.b):
                assert abs(float(CTX.sub(bh, b))) <= tol

    def test_moment_conditions(self):
        tol = float(gmpy2.exp2(16 - CTX.bits))
        for m in (2, 5, 8, 12):
            t = gauss_tableau(m, CTX)
            for g0 in ("0.125", "-0.25", "0.3"):
                e = embedded_weights(t, g0)
                # gamma0 * 0^(q-1) + sum bhat c^(q-1) = 1/q; first row adds gamma0
                for q in range(1, m + 1):
                    s = e.gamma0 if q == 1 else mpfr(0)
                    for j in range(m):
                        p = mpfr(1)
                        for _ in range(q - 1):
                            p = CTX.mul(p, t.c[j])
                        s = CTX.fma(e.bhat[j], p, s)
                    assert abs(float(CTX.sub(s, CTX.div(mpfr(1), mpfr(q))))) <= tol

    def test_radau_closed_form_third_weight(self):
        t = radau2a_tableau(CTX)
        g0 = CTX.scalar("0.2")
        e = embedded_weights(t, g0)
        want = CTX.sub(t.b[2], CTX.div(g0, mpfr(3)))
        assert abs(float(CTX.sub(e.bhat[2], want))) < 1e-45
        assert e.order_hat == 3

    def test_order_hat_capped_by_base_order(self):
        assert embedded_weights(gauss_tableau(7, CTX), "0.125").order_hat == 7

    def test_duplicate_abscissae_raise(self):
        t = gauss_tableau(2, CTX)
        dup = Tableau(2, MPVector.from_values(["0.3", "0.3"], CTX),
                      t.A, t.b, 4, GAUSS)
        with pytest.raises(SingularMatrix):
            embedded_weights(dup, "0.125")


class TestStability:
    def test_origin_is_one(self):
        for t in (gauss_tableau(3, CTX), radau2a_tableau(CTX)):
            rr, ri = stability_value(t, None, (0, 0))
            assert rr == 1 and ri == 0

    def test_m1_closed_form(self):
        t = gauss_tableau(1, CTX)
        rr, ri = stability_value(t, None, (-2, 0))
        assert rr == 0 and ri == 0
        # (1 + z/2)/(1 - z/2) at z = -1
        rr, _ = stability_value(t, None, (-1, 0))
        assert abs(float(CTX.sub(rr, CTX.div(mpfr(1), mpfr(3))))) < 1e-49

    def test_gauss_modulus_one_on_imaginary_axis(self):
        t = gauss_tableau(3, CTX)
        for y in ("0.1", "1", "10"):
            rr, ri = stability_value(t, None, (0, CTX.scalar(y)))
            mag = CTX.hypot(rr, ri)
            assert abs(float(CTX.sub(mag, mpfr(1)))) < 1e-40

    def test_gamma_zero_embedded_equals_base(self):
        t = gauss_tableau(3, CTX)
        e = embedded_weights(t, 0)
        tol = float(gmpy2.exp2(24 - CTX.bits))
        for z in ((-1, 2), (-3, 0), (0, 1), (-0.25, -4)):
            rr0, ri0 = stability_value(t, None, z)
            rr1, ri1 = stability_value(t, e, z)
            assert abs(float(CTX.sub(rr0, rr1))) <= tol
            assert abs(float(CTX.sub(ri0, ri1))) <= tol

    def test_pole_raises(self):
        t = gauss_tableau(1, CTX)
        with pytest.raises(SingularAtZ):
            stability_value(t, None, (2, 0))  # 1 - z/2 = 0

    def test_grid_single_point_origin(self):
        t = gauss_tableau(2, CTX)
        grid = stability_grid(t, None, (0, 0), (0, 0), 1, 1)
        assert len(grid) == 1
        assert grid[0][2] == 1

    def test_grid_marks_poles_inf(self):
        t = gauss_tableau(1, CTX)
        grid = stability_grid(t, None, (2, 2), (0, 0), 1, 1)
        assert gmpy2.is_infinite(grid[0][2])

    def test_grid_row_major_layout(self):
        t = gauss_tableau(1, CTX)
        grid = stability_grid(t, None, (-2, 0), (-1, 1), 3, 2)
        assert len(grid) == 6
        # first row sweeps re at the lowest im
        assert [float(g[0]) for g in grid[:3]] == [-2.0, -1.0, 0.0]
        assert all(float(g[1]) == -1.0 for g in grid[:3])
        assert all(float(g[1]) == 1.0 for g in grid[3:])

    def test_a_stability_property_gauss_m3(self):
        # base Gauss formula: no sample exceeds 1 beyond rounding noise
        t = gauss_tableau(3, CTX)
        guard = CTX.add(mpfr(1), CTX.scalar(gmpy2.exp2(24 - CTX.bits)))
        grid = stability_grid(t, None, (-10, 0), (-10, 10), 200, 200)
        assert all(not m_ > guard for _, _, m_ in grid)

    def test_embedded_not_a_stable(self):
        t = gauss_tableau(3, CTX)
        e = embedded_weights(t, "0.125")
        grid = stability_grid(t, e, (-6, 0), (-6, 6), 31, 61)
        assert any(re < 0 and m_ > 1 for re, _, m_ in grid)


class TestJSON:
    def test_roundtrip_exact(self):
        for t in (gauss_tableau(4, CTX), radau2a_tableau(PrecisionContext(84))):
            doc = tableau_to_json(t)
            back = tableau_from_json(doc)
            assert back.family == t.family
            assert back.m == t.m and back.order == t.order
            assert back.ctx.bits == t.ctx.bits
            assert all(a == b for a, b in zip(back.c, t.c))
            assert all(a == b for a, b in zip(back.b, t.b))
            assert all(back.A[i, j] == t.A[i, j]
                       for i in range(t.m) for j in range(t.m))

    def test_bad_family(self):
        t = gauss_tableau(2, CTX)
        doc = tableau_to_json(t).replace("gauss", "lobatto")
        with pytest.raises(ValueError):
            tableau_from_json(doc)

    def test_inconsistent_dimensions(self):
        import json as _json
        t = gauss_tableau(2, CTX)
        doc = _json.loads(tableau_to_json(t))
        doc["c"] = doc["c"][:1]
        with pytest.raises(ValueError):
            tableau_from_json(_json.dumps(doc))
