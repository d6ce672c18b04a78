import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from kdetect import distill as kd
from kdetect.detector import softmax
from oracles import gradient_check, random_loss_instance

prob_cols = st.integers(1, 12).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=st.floats(0, 1)),
                        arrays(np.float64, n, elements=st.floats(0, 1))))


def _massive(u, v):
    return u.sum() > 1e-6 and v.sum() > 1e-6


class TestKDConfig:
    def test_defaults(self):
        c = kd.KDConfig()
        assert (c.lambda_ndbe, c.lambda_neoplasia, c.lambda_polyp) == (0.165, 0.33, 0.33)
        assert c.eps_floor == 1e-7 and c.normalize_over_batch

    @pytest.mark.parametrize("kw", [{"lambda_ndbe": 0.0}, {"lambda_polyp": -1.0}, {"eps_floor": 0.0},
                                    {"eps_floor": 1e-3}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            kd.KDConfig(**kw)


class TestBhattacharyya:
    def test_identical(self):
        u = np.array([0.2, 0.5, 0.3])
        assert kd.bhattacharyya_coefficient(u, u) == pytest.approx(1.0, abs=1e-15)
        assert kd.bhattacharyya_distance(u, u, 0.33) == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_clamped(self):
        d = kd.bhattacharyya_distance([1, 0], [0, 1], 1.0, 1e-7)
        assert d == pytest.approx(-math.log(1e-7))
        assert d == pytest.approx(16.118, abs=5e-4)

    def test_worked_value(self):
        u, v = [0.9, 0.1], [0.1, 0.9]
        assert kd.bhattacharyya_coefficient(u, v) == pytest.approx(0.6, abs=1e-15)
        d = kd.bhattacharyya_distance(u, v)
        assert d == pytest.approx(-math.log(0.6), abs=1e-15)
        assert d == pytest.approx(0.5108, abs=5e-5)

    def test_lambda_scales(self):
        u, v = [0.9, 0.1], [0.1, 0.9]
        assert kd.bhattacharyya_distance(u, v, 0.33) == pytest.approx(0.33 * -math.log(0.6), abs=1e-15)

    def test_normalisation(self):
        # scaling a raw column does not change the normalised distance
        u, v = np.array([0.4, 0.1, 0.3]), np.array([0.2, 0.2, 0.5])
        assert kd.bhattacharyya_distance(3 * u, v) == pytest.approx(kd.bhattacharyya_distance(u, v), abs=1e-15)

    def test_raw_mode_can_go_negative(self):
        # without normalisation the coefficient may exceed one
        assert kd.bhattacharyya_distance([0.9, 0.9], [0.9, 0.9], normalize=False) < 0

    def test_all_zero(self):
        with pytest.raises(kd.EmptyDistributionError):
            kd.bhattacharyya_distance([0, 0], [0.5, 0.5])

    def test_shape_and_lambda_errors(self):
        with pytest.raises(ValueError):
            kd.bhattacharyya_distance([0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            kd.bhattacharyya_distance([0.5], [0.5], lam=0.0)

    @given(prob_cols)
    def test_symmetry(self, uv):
        u, v = uv
        assume(_massive(u, v))
        assert kd.bhattacharyya_distance(u, v) == pytest.approx(kd.bhattacharyya_distance(v, u), abs=1e-12)

    @given(prob_cols)
    def test_nonnegative(self, uv):
        u, v = uv
        assume(_massive(u, v))
        assert kd.bhattacharyya_distance(u, v) >= -1e-12

    @given(prob_cols)
    def test_zero_iff_equal(self, uv):
        u, v = uv
        assume(_massive(u, v))
        uh, vh = u / u.sum(), v / v.sum()
        d = kd.bhattacharyya_distance(u, v)
        if np.allclose(uh, vh, rtol=0, atol=1e-9):
            assert d == pytest.approx(0.0, abs=1e-9)
        else:
            assert d > 0
        assert kd.bhattacharyya_distance(u, 2.5 * u) == pytest.approx(0.0, abs=1e-12)


def _probs(rng, n, k):
    return softmax(rng.normal(size=(n, k)))


class TestKDPenalty:
    def test_matching_columns_zero(self):
        t = np.array([[0.8, 0.2], [0.4, 0.6], [0.7, 0.3]])
        s = np.column_stack([np.full(3, 0.1), t[:, 1] * 0.3, t[:, 1] * 0.3, t[:, 1] * 0.3])
        d, per = kd.kd_penalty(s, t)
        assert d == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(per, 0.0, atol=1e-15)

    def test_equal_distances_cancel_weights(self):
        t = np.array([[0.9, 0.1], [0.1, 0.9]])
        col = np.array([0.9, 0.1]) / 3
        s = np.column_stack([1 - 3 * col, col, col, col])
        d, per = kd.kd_penalty(s, t)
        np.testing.assert_allclose(per, np.array([0.165, 0.33, 0.33]) * -math.log(0.6), atol=1e-15)
        assert d == pytest.approx(-math.log(0.6), abs=1e-15)
        assert d == pytest.approx(0.5108, abs=5e-5)

    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_homogeneity(self, seed, alpha):
        rng = np.random.default_rng(seed)
        s, t = _probs(rng, 7, 4), _probs(rng, 7, 2)
        base = kd.KDConfig()
        scaled = kd.KDConfig(alpha * 0.165, alpha * 0.33, alpha * 0.33)
        assert kd.kd_penalty(s, t, scaled)[0] == pytest.approx(kd.kd_penalty(s, t, base)[0], rel=1e-12)

    def test_manual_formula(self, rng):
        s, t = _probs(rng, 9, 4), _probs(rng, 9, 2)
        v = t[:, 1] / t[:, 1].sum()
        lam = np.array([0.165, 0.33, 0.33])
        b = [-lam[c] * math.log(np.sum(np.sqrt(s[:, c + 1] / s[:, c + 1].sum() * v))) for c in range(3)]
        d, per = kd.kd_penalty(s, t)
        np.testing.assert_allclose(per, b, rtol=1e-13)
        assert d == pytest.approx(sum(b) / lam.sum(), rel=1e-13)

    def test_misaligned(self, rng):
        with pytest.raises(ValueError):
            kd.kd_penalty(_probs(rng, 5, 4), _probs(rng, 4, 2))


class TestCrossEntropy:
    def test_uniform(self):
        assert kd.cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3])) == pytest.approx(math.log(4), abs=1e-15)

    def test_confident(self):
        z = np.array([[30.0, 0.0, 0.0, 0.0]])
        assert kd.cross_entropy(z, np.array([0])) == pytest.approx(0.0, abs=1e-9)

    def test_closed_form(self):
        z = np.log([[1.0, 3.0]])
        assert kd.cross_entropy(z, np.array([1])) == pytest.approx(-math.log(0.75), abs=1e-15)

    def test_ignored_excluded(self):
        z = np.array([[0.0, 0.0], [5.0, -5.0]])
        assert kd.cross_entropy(z, np.array([0, -1])) == pytest.approx(math.log(2), abs=1e-15)

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            kd.cross_entropy(np.zeros((2, 3)), np.array([-1, -1]))


class TestSmoothL1:
    def test_zero(self):
        assert kd.smooth_l1(np.zeros((3, 4)), np.zeros((3, 4)), [True, True, False]) == 0.0

    def test_quadratic(self):
        assert kd.smooth_l1([[0.5, 0, 0, 0]], [[0, 0, 0, 0]], [True]) == pytest.approx(0.125)

    def test_linear(self):
        assert kd.smooth_l1([[2.0, 0, 0, 0]], [[0, 0, 0, 0]], [True]) == pytest.approx(1.5)

    def test_no_positives(self):
        assert kd.smooth_l1([[9.0, 9, 9, 9]], [[0, 0, 0, 0]], [False]) == 0.0

    def test_mean_over_positives(self):
        pred = [[0.5, 0, 0, 0], [2.0, 0, 0, 0], [7.0, 7, 7, 7]]
        assert kd.smooth_l1(pred, np.zeros((3, 4)), [True, True, False]) == pytest.approx((0.125 + 1.5) / 2)


def _perfect_student():
    """Student that is certain of the right label on each one-hot anchor."""
    x = np.eye(3)
    labels = np.array([1, 2, 3])
    big = 40.0
    w_cls = np.zeros((4, 3))
    w_cls[1:, :] = big * np.eye(3)
    params = {"w_cls": w_cls, "b_cls": np.zeros(4), "w_reg": np.zeros((12, 3)), "b_reg": np.zeros(12)}
    return params, kd.Batch(x, labels, np.zeros((3, 4)))


class TestTotalLoss:
    def test_components_sum(self, rng):
        params, batch, teacher = random_loss_instance(rng)
        loss, comps = kd.total_student_loss(params, batch, teacher, reg_weight=0.7)
        assert loss == pytest.approx(comps["ce"] + comps["kd"] + comps["reg"], abs=1e-12)
        assert comps["reg"] == pytest.approx(0.7 * comps["reg_raw"], abs=1e-15)

    def test_disabled_is_baseline(self, rng):
        params, batch, teacher = random_loss_instance(rng)
        loss, comps = kd.total_student_loss(params, batch, teacher, kd_enabled=False)
        assert comps["kd"] == 0.0
        assert loss == comps["ce"] + comps["reg"]
        no_teacher = kd.total_student_loss(params, batch, None, kd_enabled=False)[0]
        assert loss == no_teacher

    def test_enabled_requires_teacher(self, rng):
        params, batch, _ = random_loss_instance(rng)
        with pytest.raises(ValueError):
            kd.total_student_loss(params, batch, None)

    def test_perfect_student_without_kd(self):
        params, batch = _perfect_student()
        loss, _, grads = kd.loss_and_grad(params, batch, kd_enabled=False)
        assert loss == pytest.approx(0.0, abs=1e-9)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_perfect_student(self):
        # one anchor: every normalised column is the same point mass as the teacher's
        params, _ = _perfect_student()
        batch = kd.Batch(np.eye(3)[2:], np.array([3]), np.zeros((1, 4)))
        loss, comps, grads = kd.loss_and_grad(params, batch, np.array([[0.3, 0.7]]))
        assert comps["kd"] == pytest.approx(0.0, abs=1e-12)
        assert loss == pytest.approx(0.0, abs=1e-9)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_finite_for_extreme_params(self, rng):
        params, batch, teacher = random_loss_instance(rng)
        params = {k: v * 1e3 for k, v in params.items()}
        loss, _ = kd.total_student_loss(params, batch, teacher)
        assert np.isfinite(loss)


class TestGradient:
    def test_random_instances(self):
        rng = np.random.default_rng(7)
        worst = max(gradient_check(rng) for _ in range(20))
        assert worst < 1e-4

    def test_raw_mode(self):
        rng = np.random.default_rng(8)
        cfg = kd.KDConfig(normalize_over_batch=False)
        assert max(gradient_check(rng, kd=cfg) for _ in range(10)) < 1e-4

    def test_kd_disabled(self):
        rng = np.random.default_rng(9)
        assert max(gradient_check(rng, kd_enabled=False) for _ in range(5)) < 1e-4

    def test_zero_lambda_isolates_class(self, rng):
        s, t = _probs(rng, 6, 4), _probs(rng, 6, 2)
        _, per_all, g_all = kd.kd_penalty_grad(s, t, weights=np.array([0.165, 0.33, 0.33]))
        _, per_one, g_one = kd.kd_penalty_grad(s, t, weights=np.array([0.165, 0.0, 0.33]))
        np.testing.assert_array_equal(g_one[:, 2], 0.0)
        assert per_one[1] == 0.0
        # remaining columns differ only by the normaliser
        np.testing.assert_allclose(g_one[:, [1, 3]] * 0.495, g_all[:, [1, 3]] * 0.825, rtol=1e-12)
        np.testing.assert_array_equal(g_all[:, 0], 0.0)

    def test_underflowed_column(self):
        # softmax underflows to exactly zero but the log-space penalty stays finite
        params, batch, teacher = random_loss_instance(np.random.default_rng(1))
        params["b_cls"] = np.array([0.0, -800.0, 0.0, 0.0])
        loss, comps, grads = kd.loss_and_grad(params, batch, teacher)
        assert np.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())

    def test_loss_path_matches_probability_path(self, rng):
        params, batch, teacher = random_loss_instance(rng)
        probs = softmax(batch.descriptors @ params["w_cls"].T + params["b_cls"])
        d, per = kd.kd_penalty(probs, teacher)
        _, comps, _ = kd.loss_and_grad(params, batch, teacher)
        assert comps["kd"] == pytest.approx(d, rel=1e-12)
        np.testing.assert_allclose(comps["kd_per_class"], per, rtol=1e-12)

    def test_reference_loss_agrees(self, rng):
        from oracles import reference_loss

        for _ in range(20):
            params, batch, teacher = random_loss_instance(rng)
            for cfg in (kd.KDConfig(), kd.KDConfig(normalize_over_batch=False)):
                got = kd.total_student_loss(params, batch, teacher, cfg, reg_weight=0.5)[0]
                assert got == pytest.approx(reference_loss(params, batch, teacher, cfg, 0.5), rel=1e-12)
