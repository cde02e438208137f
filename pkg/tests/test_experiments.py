import itertools
import math

import numpy as np
import pytest

from pacbayes_hpo.experiments import (
    FREEDMAN_ZETA,
    LDConfig,
    WeightDecayConfig,
    WeightDecayRun,
    correlate,
    correlation_by_seed,
    eq5_objective_estimate,
    final_test_accuracy,
    forward_select,
    freedman_zeta,
    generalization_gap,
    min_weight_norm_baseline,
    ols_fit,
    regularizer_generalization_correlation,
    run_weight_decay_experiment,
    split_small,
)
from pacbayes_hpo.hyperopt import OuterRecord
from pacbayes_hpo.models import generate_freedman, generate_gaussian_classes

SMALL_LD = LDConfig(chains=8, eta=0.1, steps=10, tau_grid=(1.0, None))


def record(step, val_acc=0.5, weight_norm=1.0, test_acc=0.5, test_loss=1.0, val_loss=0.5, sqrt_y=1.0):
    return OuterRecord(step, 0, "eq1", 0.0, 0, 1, val_loss, val_acc, test_loss, test_acc, sqrt_y**2, sqrt_y,
                       test_loss - val_loss, weight_norm=weight_norm)


def brute_val_mse(train, val, features):
    theta = ols_fit(train, features)
    pred = val.inputs[:, list(features)] @ theta if features else np.zeros(val.size)
    return float(np.mean((pred - val.labels) ** 2))


@pytest.fixture(scope="module")
def data():
    return generate_freedman("signal", n_total=80, d=12, seed=1, n_test=500)


@pytest.fixture(scope="module")
def mixture():
    return generate_gaussian_classes(200, 6, k=3, noise=1.5, seed=0)


@pytest.fixture(scope="module")
def cfg():
    return WeightDecayConfig(n_train=20, n_val=20, inner_steps=20, outer_steps=4, inner_lr=1e-2, lam0=-2.0)


class TestFreedman:
    def test_zeta_readings(self):
        assert freedman_zeta() == 0.025
        assert freedman_zeta("sqrt") == pytest.approx(math.sqrt(0.025))
        assert set(FREEDMAN_ZETA) == {"eta_over_4", "sqrt"}
        with pytest.raises(ValueError):
            freedman_zeta("other")

    def test_ols_matches_lstsq(self, data):
        train = data[0]
        theta = ols_fit(train, [0, 3, 5])
        ref = np.linalg.lstsq(train.inputs[:, [0, 3, 5]], train.labels, rcond=None)[0]
        np.testing.assert_allclose(theta, ref, rtol=1e-10)
        assert ols_fit(train, []).size == 0

    def test_eq1_path_is_greedy(self, data):
        train, val, test = data
        path = forward_select(train, val, "eq1", max_p=3, test=test)
        assert [e.p for e in path.entries] == [0, 1, 2, 3]
        for prev, cur in itertools.pairwise(path.entries):
            assert cur.features[:-1] == prev.features
            options = [f for f in range(12) if f not in prev.features]
            scores = [brute_val_mse(train, val, list(prev.features) + [f]) for f in options]
            assert cur.features[-1] == options[int(np.argmin(scores))]
            assert cur.objective == pytest.approx(min(scores), rel=1e-9)

    def test_entry_fields(self, data):
        train, val, test = data
        path = forward_select(train, val, "aic", max_p=2, test=test)
        sst = np.mean((val.labels - val.labels.mean()) ** 2)
        for e in path.entries:
            assert e.aic == pytest.approx(2 * e.p + val.size * e.val_mse)
            assert e.objective == pytest.approx(e.aic)
            assert e.val_r2 == pytest.approx(1 - e.val_mse / sst)
            assert np.isfinite(e.test_mse)

    def test_strong_signal_found_first(self):
        train, val, _ = generate_freedman("signal", n_total=400, d=10, seed=3, n_test=10)
        for kind in ("eq1", "aic"):
            path = forward_select(train, val, kind, max_p=2)
            assert set(path.entries[2].features) == {0, 1}

    def test_eq5_reproducible(self, data):
        train, val, _ = data
        a = eq5_objective_estimate(train, val, [0, 1], 0.025, SMALL_LD, seed=4)
        b = eq5_objective_estimate(train, val, [0, 1], 0.025, SMALL_LD, seed=4)
        assert a == b and np.isfinite(a)

    def test_eq5_regularizer_adds_cost(self, data):
        train, val, _ = data
        base = eq5_objective_estimate(train, val, [0, 1, 2], 0.0, SMALL_LD, seed=2)
        assert eq5_objective_estimate(train, val, [0, 1, 2], 0.1, SMALL_LD, seed=2) > base

    def test_eq5_path(self, data):
        train, val, test = data
        path = forward_select(train, val, "eq5", max_p=3, test=test, ld=SMALL_LD, seed=0)
        assert len(path.entries) == 4 and path.kind == "eq5"
        assert path.best.objective == path.objectives.min()

    def test_invalid_arguments(self, data):
        train, val, _ = data
        with pytest.raises(ValueError):
            forward_select(train, val, "bic")
        with pytest.raises(ValueError):
            forward_select(train, val, "eq1", max_p=13)
        with pytest.raises(ValueError):
            LDConfig(tau_grid=(0.0,))


class TestWeightDecay:
    def test_split(self, mixture):
        tr, va, te = split_small(mixture, 20, 30, seed=1)
        assert (tr.size, va.size, te.size) == (20, 30, 150)
        rows = np.concatenate([tr.inputs, va.inputs, te.inputs])
        assert np.unique(rows, axis=0).shape[0] == 200
        assert split_small(mixture, 20, 30, seed=1, test_size=10)[2].size == 10
        with pytest.raises(ValueError):
            split_small(mixture, 100, 100, seed=0)

    def test_runs(self, mixture, cfg):
        runs = run_weight_decay_experiment(mixture, "linear_softmax", "eq5", 1e-3, [0, 1], cfg)
        assert [r.seed for r in runs] == [0, 1]
        for r in runs:
            assert len(r.records) == 4 and r.lam.shape == (6 * 3 + 3,)
            assert r.records[-1].objective_kind == "eq5"
            assert np.all(np.isfinite(r.series("val_loss")))
            assert 0 <= final_test_accuracy(r) <= 1

    def test_reproducible(self, mixture, cfg):
        a = run_weight_decay_experiment(mixture, "linear_softmax", "eq1", 0.0, [3], cfg)[0]
        b = run_weight_decay_experiment(mixture, "linear_softmax", "eq1", 0.0, [3], cfg)[0]
        np.testing.assert_array_equal(a.lam, b.lam)

    def test_mlp(self, mixture, cfg):
        small = WeightDecayConfig(n_train=20, n_val=20, inner_steps=5, outer_steps=2, hidden=4)
        run = run_weight_decay_experiment(mixture, "mlp", "eq1", 0.0, [0], small)[0]
        assert run.lam.shape == (6 * 4 + 4 + 4 * 3 + 3,)

    def test_objective_zeta_mismatch(self, mixture, cfg):
        with pytest.raises(ValueError):
            run_weight_decay_experiment(mixture, "linear_softmax", "eq1", 0.1, [0], cfg)
        with pytest.raises(ValueError):
            run_weight_decay_experiment(mixture, "linear_softmax", "eq5", 0.0, [0], cfg)
        with pytest.raises(ValueError):
            run_weight_decay_experiment(mixture, "cnn", "eq1", 0.0, [0], cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WeightDecayConfig(inner_lr=0.0)
        with pytest.raises(ValueError):
            WeightDecayConfig(n_val=0)

    def test_min_norm_baseline(self):
        run = WeightDecayRun("eq1", 0.0, 0, "linear_softmax", [
            record(0, val_acc=0.9, weight_norm=1.0),
            record(1, val_acc=1.0, weight_norm=3.0),
            record(2, val_acc=1.0, weight_norm=2.0, test_acc=0.7),
            record(3, val_acc=1.0, weight_norm=2.0),
        ])
        best = min_weight_norm_baseline(run)
        assert best.outer_step == 2 and best.test_acc == 0.7
        with pytest.raises(ValueError):
            min_weight_norm_baseline(WeightDecayRun("eq1", 0.0, 0, "linear_softmax"))


class TestAnalysis:
    def test_correlate(self):
        r = correlate([1, 2, 3, 4], [2, 4, 6, 9])
        assert r.spearman == pytest.approx(1.0) and r.pearson > 0.98 and not r.degenerate
        assert correlate([1, 1, 1], [1, 2, 3]).degenerate
        with pytest.raises(ValueError):
            correlate([1, 2], [1, 2])
        with pytest.raises(ValueError):
            correlate([1, 2, 3], [1, 2])

    def test_generalization_gap(self):
        run = WeightDecayRun("eq1", 0.0, 0, "x", [record(k, test_loss=1.0 + k, val_loss=0.5) for k in range(8)])
        assert generalization_gap(run) == pytest.approx(np.mean([3.5, 4.5, 5.5, 6.5, 7.5]))
        assert generalization_gap(run, last=1) == pytest.approx(7.5)

    def test_regularizer_correlation(self):
        runs = [WeightDecayRun("eq5", z, 0, "x", [record(0, sqrt_y=s, test_loss=0.5 + g)])
                for z, s, g in [(0.1, 3.0, 0.9), (0.2, 2.0, 0.5), (0.4, 1.0, 0.2)]]
        res = regularizer_generalization_correlation(runs)
        assert res.pearson > 0.9 and res.n == 3
        with pytest.raises(ValueError):
            regularizer_generalization_correlation(runs[:2])

    def test_correlation_by_seed_removes_split_offsets(self):
        # within each seed the gap rises with sqrt(Y); seed 1 has a large negative offset
        runs = [WeightDecayRun("eq5", z, seed, "x", [record(0, sqrt_y=s + 10 * seed, test_loss=0.5 + g - 2 * seed)])
                for seed in (0, 1) for z, s, g in [(0.1, 3.0, 0.9), (0.2, 2.0, 0.5), (0.4, 1.0, 0.2)]]
        assert regularizer_generalization_correlation(runs).pearson < 0
        per = correlation_by_seed(runs)
        assert sorted(per) == [0, 1] and all(c.pearson > 0.9 for c in per.values())
