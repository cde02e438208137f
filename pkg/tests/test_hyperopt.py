import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from toys import central_difference, ridge_toy

from pacbayes_hpo.hyperopt import (
    HISTORY_COLUMNS,
    HyperOptConfig,
    Problem,
    RegularizerTrace,
    evaluate_objective,
    incoherence_summand,
    optimize_eq5_alg1,
    optimize_eq5_alg3,
    optimize_eq5_alg4_online,
    t1t2_val_hypergrad,
    truncated_hypergrad,
    write_history_csv,
)
from pacbayes_hpo.models import (
    Dataset,
    InitDistribution,
    LinearRegression,
    LossSpec,
    generate_gaussian_classes,
    grad_risk,
    make_model,
)


def lam_path(history):
    return [r.hypergrad_norm for r in history]


def softmax_toy(seed=0):
    data = generate_gaussian_classes(60, 5, k=3, noise=1.0, seed=seed)
    model, _ = make_model("linear_softmax", (5, 3))
    spec = LossSpec("softmax_xent", "per_parameter", tau=30.0)
    return Problem(model, data.subset(np.arange(30)), data.subset(np.arange(30, 60)), spec,
                   InitDistribution("gaussian", std=0.1), eta=0.05, inner="sgd")


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(zeta=-1.0), dict(T=0), dict(K=11), dict(W=0), dict(W=11), dict(C=0),
                                    dict(outer_optimizer="adam"), dict(outer_lr=0.0), dict(eps_Y=0.0),
                                    dict(val_hypergrad="ift")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            HyperOptConfig(**kw)

    def test_objective_kind(self):
        assert HyperOptConfig().objective_kind == "eq1"
        assert HyperOptConfig(zeta=0.1).objective_kind == "eq5"

    def test_depths(self):
        cfg = HyperOptConfig(T=6, K=2)
        assert [cfg.summand_depth(t) for t in range(6)] == [0, 1, 2, 2, 2, 2]
        w = HyperOptConfig(T=6, W=3)
        assert [w.summand_depth(t) for t in range(6)] == [0, 1, 2, 0, 1, 2]
        assert w.val_depth() == 3

    def test_trace(self):
        tr = RegularizerTrace()
        for d2 in [0.5, 0.0, 2.0]:
            tr.add(d2)
        assert tr.value == pytest.approx(math.sqrt(2.5), abs=1e-12)
        with pytest.raises(ValueError):
            tr.add(-1e-3)


class TestIncoherenceSummand:
    def test_identical_sets(self):
        p = ridge_toy(0)
        same = replace(p, val=p.train, val_includes_decay=True)
        d2, hg = incoherence_summand(same, [0.7], [0.2])
        assert d2 == 0.0 and np.all(hg == 0.0)

    def test_orthogonal_unit_gradients(self):
        # at theta = 0 a single point (x, y) has gradient -2 y x
        train = Dataset(np.array([[1.0, 0.0]]), np.array([-0.5]))
        val = Dataset(np.array([[0.0, 1.0]]), np.array([-0.5]))
        p = Problem(LinearRegression(2), train, val, LossSpec())
        d2, _ = incoherence_summand(p, np.zeros(2), np.zeros(0))
        assert d2 == pytest.approx(2.0)

    def test_matches_explicit_subtraction(self):
        p = ridge_toy(3)
        rng = np.random.default_rng(3)
        theta, lam = rng.normal(size=1), rng.normal(size=1)
        bt, bv = np.arange(5), np.arange(5, 12)
        d2, _ = incoherence_summand(p, theta, lam, bt, bv)
        g_t = grad_risk(p.model, theta, p.train.subset(bt), lam, p.spec, True)
        g_v = grad_risk(p.model, theta, p.val.subset(bv), lam, p.spec, False)
        assert d2 == pytest.approx(float(np.sum((g_t - g_v) ** 2)), rel=1e-12)

    def test_direct_gradient_finite_difference(self):
        p = ridge_toy(4)
        theta = np.array([1.3])
        lam = np.array([-0.4])
        _, hg = incoherence_summand(p, theta, lam)
        fd = central_difference(lambda l: incoherence_summand(p, theta, l)[0], lam)
        np.testing.assert_allclose(hg, fd, rtol=1e-7)

    def test_clipped_gradients(self):
        p = ridge_toy(5)
        d2, _ = incoherence_summand(p, [50.0], [0.0], clip_gamma=1e-3)
        assert d2 <= 4e-6 + 1e-18


class TestTruncatedHypergrad:
    def test_depth_zero_is_direct_partial(self):
        p = ridge_toy(1)
        theta, lam = np.array([0.8]), np.array([0.3])
        direct = incoherence_summand(p, theta, lam)[1]
        np.testing.assert_allclose(truncated_hypergrad(p, lam, [], theta, 0, "summand"), direct, rtol=1e-12)

    def test_depth_exceeding_window(self):
        p = ridge_toy(1)
        with pytest.raises(ValueError):
            truncated_hypergrad(p, np.zeros(1), [], np.zeros(1), 1, "val")

    @pytest.mark.parametrize("inner", ["sgd", "sgld"])
    def test_two_step_full_unroll(self, inner):
        p = ridge_toy(2, inner=inner)
        cfg = HyperOptConfig(zeta=0.3, T=2, K=2)
        lam = np.array([0.1])
        _, d, _ = evaluate_objective(p, cfg, lam, seed=9)
        fd = central_difference(lambda l: evaluate_objective(p, cfg, l, seed=9)[0], lam)
        np.testing.assert_allclose(d, fd, rtol=1e-6)

    def test_window_of_full_length_equals_full_depth(self):
        p = ridge_toy(6)
        lam = np.array([-0.2])
        a = evaluate_objective(p, HyperOptConfig(zeta=0.4, T=5, K=5), lam, seed=2)[1]
        b = evaluate_objective(p, HyperOptConfig(zeta=0.4, T=5, W=5), lam, seed=2)[1]
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_windows_restart_the_unroll(self):
        # with W=1 every summand is a direct partial, like K=0, but the validation term unrolls one step
        p = ridge_toy(6)
        lam = np.array([-0.2])
        w1 = evaluate_objective(p, HyperOptConfig(zeta=0.4, T=4, W=1), lam, seed=2)[1]
        k0 = evaluate_objective(p, HyperOptConfig(zeta=0.4, T=4, K=0), lam, seed=2)[1]
        k0_val = evaluate_objective(p, HyperOptConfig(zeta=0.0, T=4, K=0), lam, seed=2)[1]
        k1_val = evaluate_objective(p, HyperOptConfig(zeta=0.0, T=4, K=1), lam, seed=2)[1]
        np.testing.assert_allclose(w1, k0 - k0_val + k1_val, rtol=1e-10)


class TestT1T2:
    def test_zero_when_validation_gradient_vanishes(self):
        p = ridge_toy(7)
        x, y = p.val.inputs, p.val.labels
        theta = np.linalg.lstsq(x, y, rcond=None)[0]
        out = t1t2_val_hypergrad(p, theta, np.array([0.5]), 0.1)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    @pytest.mark.parametrize("include_decay", [False, True])
    def test_single_step_is_exact(self, include_decay):
        p = replace(ridge_toy(8, inner="sgd"), val_includes_decay=include_decay)
        lam = np.array([0.4])
        exact = evaluate_objective(p, HyperOptConfig(T=1, K=1), lam, seed=1)[1]
        approx = evaluate_objective(p, HyperOptConfig(T=1, K=0, val_hypergrad="t1t2"), lam, seed=1)[1]
        np.testing.assert_allclose(approx, exact, rtol=1e-10)
        fd = central_difference(lambda l: evaluate_objective(p, HyperOptConfig(T=1), l, seed=1)[0], lam)
        np.testing.assert_allclose(approx, fd, rtol=1e-6)

    def test_closed_forms_under_decay(self):
        # decay-only lam: the mixed partial of grad R_T is exp(lam) * theta_prev
        p = softmax_toy()
        rng = np.random.default_rng(0)
        theta, prev, lam = rng.normal(size=(3, p.model.m))
        _, g_v = p.risk_V(theta, lam)
        np.testing.assert_allclose(t1t2_val_hypergrad(p, theta, lam, 0.05, prev),
                                   -np.exp(lam) * prev * 0.05 * g_v, rtol=1e-12)
        # with decay in the validation risk the tape path adds the direct partial
        q = replace(p, val_includes_decay=True)
        _, g_vd = q.risk_V(theta, lam)
        expected = 0.5 * np.exp(lam) * theta**2 - np.exp(lam) * prev * 0.05 * g_vd
        np.testing.assert_allclose(t1t2_val_hypergrad(q, theta, lam, 0.05, prev), expected, rtol=1e-10, atol=1e-14)

    def test_vector_step_size(self):
        p = softmax_toy()
        rng = np.random.default_rng(1)
        theta, lam = rng.normal(size=(2, p.model.m))
        a = t1t2_val_hypergrad(p, theta, lam, 0.02)
        b = t1t2_val_hypergrad(p, theta, lam, np.full(p.model.m, 0.02))
        np.testing.assert_array_equal(a, b)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            t1t2_val_hypergrad(ridge_toy(0), [0.0], [0.0], 0.0)


class TestAlgorithm1:
    def test_matches_finite_differences(self):
        for s in range(10):
            T = 1 + s % 5
            p = ridge_toy(s)
            cfg = HyperOptConfig(zeta=0.5, T=T, K=T)
            lam = np.array([np.random.default_rng(100 + s).uniform(-1, 1)])
            _, d, _ = evaluate_objective(p, cfg, lam, seed=s)
            fd = central_difference(lambda l: evaluate_objective(p, cfg, l, seed=s)[0], lam)
            np.testing.assert_allclose(d, fd, rtol=1e-3)

    def test_accumulator_identity(self):
        # X / sqrt(Y) is the exact gradient of zeta * sqrt(Y)
        p = ridge_toy(11)
        zeta, lam = 0.7, np.array([0.25])
        cfg = HyperOptConfig(zeta=zeta, T=4, K=4)
        with_reg = evaluate_objective(p, cfg, lam, seed=3)[1]
        without = evaluate_objective(p, replace(cfg, zeta=0.0), lam, seed=3)[1]

        def reg(l):
            return zeta * evaluate_objective(p, cfg, l, seed=3)[2][0].value

        np.testing.assert_allclose(with_reg - without, central_difference(reg, lam), rtol=1e-6)

    def test_zeta_zero_is_plain_validation_path(self):
        # deterministic inner loop so every outer step can be recomputed from scratch
        p = replace(ridge_toy(12, inner="sgd"), init=InitDistribution("point", loc=0.5))
        cfg = HyperOptConfig(zeta=0.0, T=3, K=3, outer_steps=5, outer_optimizer="gd", outer_lr=0.1)
        lam, hist = optimize_eq5_alg1(p, cfg, [0.0], seed=4)
        # replay by hand: each update is the bare validation hypergradient
        expected = np.array([0.0])
        for k in range(5):
            val_grad = central_difference(lambda l: evaluate_objective(p, cfg, l, seed=4)[0], expected)
            assert hist[k].hypergrad_norm == pytest.approx(abs(val_grad[0]), rel=1e-6)
            expected = expected - 0.1 * evaluate_objective(p, cfg, expected, seed=4)[1]
        np.testing.assert_allclose(lam, expected, rtol=1e-12)
        assert all(r.objective_kind == "eq1" for r in hist)

    def test_identical_sets_follow_eq1_path(self):
        p = ridge_toy(13)
        same = replace(p, val=p.train, val_includes_decay=True)
        cfg = HyperOptConfig(zeta=1.0, T=3, K=2, outer_steps=4)
        lam5, hist5 = optimize_eq5_alg1(same, cfg, [0.3], seed=1)
        lam1, _ = optimize_eq5_alg1(same, replace(cfg, zeta=0.0), [0.3], seed=1)
        np.testing.assert_array_equal(lam5, lam1)
        assert all(r.Y == 0.0 and r.floor_triggered for r in hist5)

    def test_requires_single_chain(self):
        with pytest.raises(ValueError):
            optimize_eq5_alg1(ridge_toy(0), HyperOptConfig(C=2, outer_steps=1), [0.0])

    def test_history(self, tmp_path):
        p = softmax_toy()
        p = replace(p, test=p.val)
        cfg = HyperOptConfig(zeta=0.1, T=3, K=1, outer_steps=3)
        _, hist = optimize_eq5_alg1(p, cfg, np.zeros(p.model.m), seed=0)
        assert [r.outer_step for r in hist] == [0, 1, 2]
        for r in hist:
            assert r.sqrt_Y == pytest.approx(math.sqrt(r.Y), abs=1e-12)
            assert 0.0 <= r.val_acc <= 1.0
            assert r.gen_error_estimate == pytest.approx(r.test_loss - r.val_loss)
        write_history_csv(tmp_path / "h.csv", hist)
        with open(tmp_path / "h.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 4

    def test_wrong_hyperparameter_shape(self):
        with pytest.raises(ValueError):
            optimize_eq5_alg1(softmax_toy(), HyperOptConfig(outer_steps=1), np.zeros(3))


class TestAlgorithm3:
    cfg = HyperOptConfig(zeta=0.5, T=3, K=2, outer_steps=4)

    def test_single_chain_matches_algorithm1(self):
        p = ridge_toy(14)
        a = optimize_eq5_alg1(p, self.cfg, [0.1], seed=5)
        b = optimize_eq5_alg3(p, self.cfg, [0.1], seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        assert lam_path(a[1]) == lam_path(b[1])

    def test_identical_chains_equal_single_chain(self):
        p = ridge_toy(14)
        a = optimize_eq5_alg3(p, self.cfg, [0.1], seed=5)
        b = optimize_eq5_alg3(p, replace(self.cfg, C=4, shared_chain_seeds=True), [0.1], seed=5)
        np.testing.assert_array_equal(a[0], b[0])

    def test_more_chains_reduce_variance(self):
        p = ridge_toy(15)
        lam = np.array([0.0])

        def spread(C):
            cfg = HyperOptConfig(zeta=0.5, T=3, K=3, C=C)
            return np.var([evaluate_objective(p, cfg, lam, seed=s)[1][0] for s in range(30)])

        assert spread(8) < spread(1)


class TestAlgorithm4:
    def test_identical_sets_skip_inner_updates(self):
        p = ridge_toy(16)
        same = replace(p, val=p.train, val_includes_decay=True)
        cfg = HyperOptConfig(zeta=1.0, T=3, K=0, outer_steps=3, val_hypergrad="t1t2")
        lam_on, hist = optimize_eq5_alg4_online(same, cfg, [0.2], seed=0)
        lam_off, _ = optimize_eq5_alg3(same, replace(cfg, zeta=0.0), [0.2], seed=0)
        np.testing.assert_array_equal(lam_on, lam_off)
        assert all(r.floor_triggered for r in hist)

    def test_zeta_zero_equals_offline(self):
        p = ridge_toy(17)
        cfg = HyperOptConfig(T=3, K=3, C=2, outer_steps=4)
        np.testing.assert_array_equal(optimize_eq5_alg4_online(p, cfg, [0.0], seed=2)[0],
                                      optimize_eq5_alg3(p, cfg, [0.0], seed=2)[0])

    def test_single_inner_step_against_manual_updates(self):
        p = replace(ridge_toy(18, inner="sgd"), init=InitDistribution("point", loc=0.9))
        zeta, lr, eta = 0.6, 0.05, 0.1
        cfg = HyperOptConfig(zeta=zeta, T=1, K=0, outer_steps=1, outer_optimizer="gd", outer_lr=lr,
                             val_hypergrad="t1t2")
        lam0 = np.array([0.3])
        theta0 = np.array([0.9])
        d2, hg = incoherence_summand(p, theta0, lam0)
        step = zeta * hg / (2 * math.sqrt(d2))
        theta1 = theta0 - eta * p.risk_T(theta0, lam0)[1]

        offline = lam0 - lr * (step * math.sqrt(d2) / math.sqrt(d2 + cfg.eps_Y)
                               + t1t2_val_hypergrad(p, theta1, lam0, eta, theta0))
        np.testing.assert_allclose(optimize_eq5_alg3(p, cfg, lam0)[0], offline, rtol=1e-12)

        half = lam0 - lr * step
        online = half - lr * t1t2_val_hypergrad(p, theta1, half, eta, theta0)
        np.testing.assert_allclose(optimize_eq5_alg4_online(p, cfg, lam0)[0], online, rtol=1e-12)


class TestProperties:
    def test_descent_direction(self):
        hits = 0
        for s in range(100):
            p = ridge_toy(1000 + s)
            cfg = HyperOptConfig(zeta=0.5, T=4, K=4)
            lam = np.array([np.random.default_rng(s).uniform(-2, 2)])
            _, d, _ = evaluate_objective(p, cfg, lam, seed=s)
            fd = central_difference(lambda l: evaluate_objective(p, cfg, l, seed=s)[0], lam)
            hits += float(d @ fd) > 0
        assert hits >= 95

    @pytest.mark.parametrize("K", [0, 1, 4])
    def test_finite_norms(self, K):
        for p, lam in [(ridge_toy(2), np.zeros(1)), (softmax_toy(), np.zeros(softmax_toy().model.m))]:
            _, d, _ = evaluate_objective(p, HyperOptConfig(zeta=0.5, T=4, K=K), lam, seed=0)
            assert np.isfinite(np.linalg.norm(d))

    @pytest.mark.parametrize("cfg", [HyperOptConfig(zeta=0.5, T=6, K=2, outer_steps=2),
                                     HyperOptConfig(zeta=0.5, T=6, W=3, outer_steps=2),
                                     HyperOptConfig(zeta=0.5, T=6, K=0, outer_steps=2)])
    def test_window_high_water_mark(self, cfg):
        _, hist = optimize_eq5_alg1(ridge_toy(3), cfg, [0.0])
        assert max(r.window_peak for r in hist) == cfg.window

    def test_adam_inner_requires_one_step_unroll(self):
        p = replace(ridge_toy(0), inner="adam")
        with pytest.raises(ValueError):
            optimize_eq5_alg1(p, HyperOptConfig(T=2, K=1, outer_steps=1), [0.0])
        lam, hist = optimize_eq5_alg1(p, HyperOptConfig(zeta=0.1, T=3, K=0, outer_steps=2, val_hypergrad="t1t2"),
                                      [0.0])
        assert np.all(np.isfinite(lam)) and len(hist) == 2

    def test_decoupled_decay_single_step(self):
        # one AdamW step: theta_1 = theta_0 - eta * adam(g_data) - eta * exp(lam) * theta_0
        p = replace(softmax_toy(), inner="adamw", eta=0.01, init=InitDistribution("point", loc=0.3))
        cfg = HyperOptConfig(T=1, K=0, outer_steps=1, val_hypergrad="t1t2")
        lam = np.linspace(-1, 1, p.model.m)
        _, d, _ = evaluate_objective(p, cfg, lam)
        fd = central_difference(lambda l: evaluate_objective(p, cfg, l)[0], lam)
        np.testing.assert_allclose(d, fd, rtol=1e-5, atol=1e-12)

    def test_decoupled_decay_update(self):
        p = replace(ridge_toy(0), inner="adamw", eta=0.1, init=InitDistribution("point", loc=2.0))
        _, hist = optimize_eq5_alg1(p, HyperOptConfig(T=1, outer_steps=1, val_hypergrad="t1t2"), [np.log(0.5)])
        g_data = p.risk_T(np.array([2.0]), [np.log(0.5)])[1][0] - 0.5 * 2.0
        expected = 2.0 - 0.1 * (np.sign(g_data) * abs(g_data) / (abs(g_data) + 1e-8) + 0.5 * 2.0)
        assert hist[0].weight_norm == pytest.approx(abs(expected), rel=1e-12)

    def test_carried_inner_state(self):
        p = replace(ridge_toy(5, inner="sgd"), init=InitDistribution("point", loc=5.0))
        cfg = HyperOptConfig(T=2, outer_steps=3, reinit_inner=False)
        _, carried = optimize_eq5_alg1(p, cfg, [0.0])
        _, fresh = optimize_eq5_alg1(p, replace(cfg, reinit_inner=True), [0.0])
        assert carried[0].weight_norm == fresh[0].weight_norm
        assert carried[2].weight_norm != fresh[2].weight_norm
