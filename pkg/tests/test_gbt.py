"""Boosted-tree tests against hand arithmetic and an exhaustive split oracle."""

import json
import math

import numpy as np
import pytest

from vibemil.errors import ArityMismatch, DegenerateData, OneClassOnly
from vibemil.gbt import (
    GbtConfig,
    GbtModel,
    Growth,
    _bin_columns,
    _predict_tree,
    _TreeBuilder,
    leaf_weight,
    load_gbt,
    logistic_grad_hess,
    predict_gbt,
    save_gbt,
    sigmoid,
    soft_threshold,
    split_gain,
    train_gbt,
    weighted_logistic_loss,
    write_train_log_csv,
)
from vibemil.validation import roc_auc


# Oracles ---------------------------------------------------------------------

def oracle_soft(g, alpha):
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


def oracle_gain(gl, hl, gr, hr, alpha, lam):
    def term(G, H):
        s = oracle_soft(G, alpha)
        return s * s / (H + lam) if H + lam > 0 else 0.0

    return 0.5 * (term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr))


def oracle_grow(X, g, h, depth, max_depth, alpha, lam):
    """Exhaustive CART over every distinct threshold of every feature.

    Iterates features then thresholds in ascending order and replaces the
    incumbent only on strictly larger gain, so ties keep the lowest feature
    and the lowest threshold.
    """
    best = None
    if depth < max_depth and len(g) >= 2:
        for f in range(X.shape[1]):
            for cut in np.unique(X[:, f])[:-1]:
                mask = X[:, f] <= cut
                gain = oracle_gain(
                    g[mask].sum(), h[mask].sum(), g[~mask].sum(), h[~mask].sum(), alpha, lam
                )
                if gain > 0 and (best is None or gain > best[0]):
                    best = (gain, f, float(cut))
    if best is None:
        s = oracle_soft(g.sum(), alpha)
        return {"leaf": float(-s / (h.sum() + lam))}
    _, f, cut = best
    mask = X[:, f] <= cut
    return {
        "feature": f,
        "threshold": cut,
        "left": oracle_grow(X[mask], g[mask], h[mask], depth + 1, max_depth, alpha, lam),
        "right": oracle_grow(X[~mask], g[~mask], h[~mask], depth + 1, max_depth, alpha, lam),
    }


def make_blobs(n, n_features, shift, seed, n_pos=None):
    rng = np.random.default_rng(seed)
    n_pos = n // 2 if n_pos is None else n_pos
    y = np.zeros(n)
    y[:n_pos] = 1.0
    X = rng.normal(size=(n, n_features))
    X[:n_pos, :3] += shift
    perm = rng.permutation(n)
    return X[perm], y[perm]


# Scalar machinery -------------------------------------------------------------

class TestScalarOps:
    def test_grad_hess_pinned(self):
        g, h = logistic_grad_hess(np.array([1.0]), np.array([0.5]), pos_weight=2.0)
        assert g[0] == -1.0
        assert h[0] == 0.5

    def test_grad_hess_negative_row_unweighted(self):
        g, h = logistic_grad_hess(np.array([0.0]), np.array([0.5]), pos_weight=2.0)
        assert g[0] == 0.5
        assert h[0] == 0.25

    def test_grad_hess_clamps_extreme_probs(self):
        g, h = logistic_grad_hess(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert g[0] == pytest.approx(-1.0, abs=1e-11)
        assert g[1] == pytest.approx(1.0, abs=1e-11)
        assert np.all(h > 0)

    def test_soft_threshold_cases(self):
        assert soft_threshold(3.0, 1.0) == 2.0
        assert soft_threshold(-3.0, 1.0) == -2.0
        assert soft_threshold(0.5, 1.0) == 0.0
        assert soft_threshold(-0.5, 1.0) == 0.0

    def test_leaf_weight_pinned(self):
        assert leaf_weight(3.0, 4.0, alpha=1.0, lam=1.0) == pytest.approx(-0.4, abs=1e-15)

    def test_leaf_weight_inside_l1_deadzone_is_zero(self):
        assert leaf_weight(0.5, 4.0, alpha=1.0, lam=1.0) == 0.0

    def test_leaf_weight_minimizes_node_objective(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            G = rng.normal(scale=5.0)
            H = rng.uniform(0.1, 10.0)
            alpha = rng.uniform(0.0, 2.0)
            lam = rng.uniform(0.0, 3.0)
            w = leaf_weight(G, H, alpha, lam)

            def obj(v):
                return G * v + 0.5 * (H + lam) * v * v + alpha * abs(v)

            for eps in (1e-4, -1e-4, 1e-2, -1e-2):
                assert obj(w) <= obj(w + eps) + 1e-12

    def test_split_gain_pinned(self):
        gain = split_gain(-2.0, 4.0, 2.0, 4.0, alpha=0.0, lam=1.0)
        assert gain == pytest.approx(0.8, abs=1e-15)

    def test_split_gain_nonnegative_unregularized(self):
        # a^2/x + b^2/y >= (a+b)^2/(x+y) holds exactly when lambda is 0
        rng = np.random.default_rng(11)
        for _ in range(500):
            gl, gr = rng.normal(scale=4.0, size=2)
            hl, hr = rng.uniform(0.1, 5.0, size=2)
            assert split_gain(gl, hl, gr, hr, 0.0, 0.0) >= -1e-12

    def test_split_gain_proportional_children_zero_when_unregularized(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            G = rng.normal(scale=3.0)
            H = rng.uniform(0.5, 5.0)
            t = rng.uniform(0.05, 0.95)
            gain = split_gain(t * G, t * H, (1 - t) * G, (1 - t) * H, 0.0, 0.0)
            assert gain == pytest.approx(0.0, abs=1e-12)

    def test_split_gain_can_be_negative_with_l2(self):
        # lambda applies per child, so an uninformative split costs objective
        assert split_gain(0.5, 0.5, 0.5, 0.5, alpha=0.0, lam=1.0) < 0.0

    def test_split_gain_zero_gradients(self):
        assert split_gain(0.0, 2.0, 0.0, 3.0, alpha=0.0, lam=1.0) == 0.0

    def test_split_gain_matches_oracle_vectorized(self):
        rng = np.random.default_rng(3)
        gl = rng.normal(size=(4, 5))
        hl = rng.uniform(0.1, 2.0, size=(4, 5))
        gr = rng.normal(size=(4, 5))
        hr = rng.uniform(0.1, 2.0, size=(4, 5))
        gains = split_gain(gl, hl, gr, hr, 0.3, 1.2)
        for i in range(4):
            for j in range(5):
                expect = oracle_gain(gl[i, j], hl[i, j], gr[i, j], hr[i, j], 0.3, 1.2)
                assert gains[i, j] == pytest.approx(expect, rel=1e-12, abs=1e-15)

    def test_weighted_loss_pinned(self):
        # zero margin: loss = log 2 per sample regardless of label
        m = np.zeros(4)
        y = np.array([1.0, 0.0, 1.0, 0.0])
        w = np.ones(4)
        assert weighted_logistic_loss(m, y, w) == pytest.approx(math.log(2.0), rel=1e-15)

    def test_weighted_loss_weighting(self):
        # margin 2 on a positive: softplus(-2); on a negative: softplus(2)
        m = np.array([2.0, 2.0])
        y = np.array([1.0, 0.0])
        w = np.array([3.0, 1.0])
        sp = lambda z: math.log1p(math.exp(-abs(z))) + max(z, 0.0)
        expect = (3.0 * sp(-2.0) + 1.0 * sp(2.0)) / 4.0
        assert weighted_logistic_loss(m, y, w) == pytest.approx(expect, rel=1e-15)

    def test_sigmoid_stable_at_extremes(self):
        z = np.array([-800.0, 0.0, 800.0])
        p = sigmoid(z)
        assert p[0] == 0.0
        assert p[1] == 0.5
        assert p[2] == 1.0


# Binning ----------------------------------------------------------------------

class TestBinning:
    def test_few_distinct_values_one_bin_each(self):
        col = np.array([3.0, 1.0, 2.0, 1.0, 3.0, 2.0])[:, None]
        cuts, codes, width = _bin_columns(col, n_bins=256)
        np.testing.assert_array_equal(cuts[0], [1.0, 2.0])
        np.testing.assert_array_equal(codes[:, 0], [2, 0, 1, 0, 2, 1])
        assert width == 3

    def test_constant_column_has_no_cuts(self):
        col = np.full((5, 1), 7.0)
        cuts, codes, width = _bin_columns(col, n_bins=256)
        assert len(cuts[0]) == 0
        np.testing.assert_array_equal(codes[:, 0], 0)

    def test_wide_column_uses_quantile_cuts(self):
        rng = np.random.default_rng(0)
        col = rng.normal(size=(1000, 1))
        n_bins = 8
        cuts, codes, width = _bin_columns(col, n_bins=n_bins)
        s = np.sort(col[:, 0])
        expect = []
        for q in np.arange(1, n_bins) / n_bins:
            h = (len(s) - 1) * q
            lo = int(math.floor(h))
            expect.append(s[lo] + (h - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo]))
        np.testing.assert_allclose(cuts[0], np.unique(expect), rtol=0, atol=0)
        assert width <= n_bins

    def test_code_threshold_equivalence(self):
        rng = np.random.default_rng(5)
        col = rng.integers(0, 40, size=(500, 1)).astype(float)
        cuts, codes, _ = _bin_columns(col, n_bins=16)
        for b in range(len(cuts[0])):
            np.testing.assert_array_equal(codes[:, 0] <= b, col[:, 0] <= cuts[0][b])


# Single-tree growth vs exhaustive oracle ---------------------------------------

class TestTreeGrowth:
    def _builder(self, X, g, h, **kw):
        cfg = GbtConfig(**kw)
        return _TreeBuilder(cfg, X, g, h, np.arange(X.shape[1]))

    @pytest.mark.parametrize("alpha", [0.0, 0.7])
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_level_wise_matches_exhaustive_oracle(self, alpha, seed):
        # integer-valued X/g/h keep every partial sum exact, so the
        # histogram scan and the brute-force scan see identical gains
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 7, size=(80, 5)).astype(float)
        g = rng.integers(-3, 4, size=80).astype(float)
        h = rng.integers(1, 4, size=80).astype(float)
        builder = self._builder(X, g, h, max_depth=3, l1_alpha=alpha, l2_lambda=1.0)
        grown = builder.grow_level_wise()
        expected = oracle_grow(X, g, h, 0, 3, alpha, 1.0)
        assert grown == expected

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_leaf_wise_matches_oracle_partition_when_uncapped(self, seed):
        rng = np.random.default_rng(seed + 100)
        X = rng.integers(0, 5, size=(60, 4)).astype(float)
        g = rng.integers(-4, 5, size=60).astype(float)
        h = np.ones(60)
        builder = self._builder(
            X, g, h, max_depth=3, max_leaves=256, l1_alpha=0.0, l2_lambda=1.0
        )
        grown = builder.grow_leaf_wise()
        expected = oracle_grow(X, g, h, 0, 3, 0.0, 1.0)
        np.testing.assert_array_equal(_predict_tree(grown, X), _predict_tree(expected, X))

    def test_leaf_cap_limits_leaf_count(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(200, 6))
        g = rng.normal(size=200)
        h = np.ones(200)
        builder = self._builder(X, g, h, max_depth=8, max_leaves=5)
        tree = builder.grow_leaf_wise()

        def count_leaves(node):
            if "leaf" in node:
                return 1
            return count_leaves(node["left"]) + count_leaves(node["right"])

        assert count_leaves(tree) <= 5

    def test_depth_cap_respected(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(300, 4))
        g = rng.normal(size=300)
        h = np.ones(300)
        for tree in (
            self._builder(X, g, h, max_depth=2).grow_level_wise(),
            self._builder(X, g, h, max_depth=2, max_leaves=256).grow_leaf_wise(),
        ):
            def depth(node):
                if "leaf" in node:
                    return 0
                return 1 + max(depth(node["left"]), depth(node["right"]))

            assert depth(tree) <= 2

    def test_pure_gradient_direction_becomes_single_leaf_shift(self):
        # all-equal gradients admit no useful split on a constant feature
        X = np.zeros((10, 2))
        g = np.full(10, 2.0)
        h = np.ones(10)
        tree = self._builder(X, g, h).grow_level_wise()
        assert set(tree) == {"leaf"}
        assert tree["leaf"] == pytest.approx(
            -soft_threshold(20.0, 0.1) / (10.0 + 1.0), rel=1e-15
        )

    def test_growth_modes_agree_on_fully_split_tree(self):
        rng = np.random.default_rng(21)
        X = rng.integers(0, 4, size=(40, 3)).astype(float)
        g = rng.integers(-5, 6, size=40).astype(float)
        g[g == 0] = 1.0
        h = np.ones(40)
        level = self._builder(X, g, h, max_depth=3, l1_alpha=0.0).grow_level_wise()
        leaf = self._builder(
            X, g, h, max_depth=3, max_leaves=256, l1_alpha=0.0
        ).grow_leaf_wise()
        assert level == leaf


# Boosting ----------------------------------------------------------------------

class TestBoosting:
    def test_rejects_single_class(self):
        X = np.random.default_rng(0).normal(size=(10, 3))
        with pytest.raises(DegenerateData):
            train_gbt(GbtConfig(n_estimators=2), X, np.ones(10))

    def test_rejects_single_class_validation(self):
        X, y = make_blobs(30, 4, 2.0, 0)
        with pytest.raises(OneClassOnly):
            train_gbt(GbtConfig(n_estimators=2), X, y, X[:5], np.ones(5))

    def test_rejects_validation_arity_mismatch(self):
        X, y = make_blobs(30, 4, 2.0, 0)
        with pytest.raises(ArityMismatch):
            train_gbt(GbtConfig(n_estimators=2), X, y, X[:6, :3], y[:6])

    def test_predict_rejects_arity_mismatch(self):
        X, y = make_blobs(30, 4, 2.0, 0)
        model = train_gbt(GbtConfig(n_estimators=3), X, y)
        with pytest.raises(ArityMismatch):
            predict_gbt(model, X[:, :2])

    def test_train_loss_monotone_non_increasing(self):
        X, y = make_blobs(120, 10, 0.8, 3)
        cfg = GbtConfig(
            n_estimators=100,
            row_subsample=1.0,
            col_subsample=1.0,
            l1_alpha=0.0,
            learning_rate=0.05,
        )
        model = train_gbt(cfg, X, y)
        losses = np.array([e["train_loss"] for e in model.train_log])
        assert len(losses) == 100
        assert np.all(np.diff(losses) <= 1e-12)

    def test_separable_points_reach_perfect_train_auc(self):
        rng = np.random.default_rng(8)
        X = np.column_stack([np.linspace(-1, 1, 20), rng.normal(size=20)])
        y = (X[:, 0] > 0).astype(float)
        for growth in Growth:
            model = train_gbt(GbtConfig(n_estimators=50, growth=growth, seed=1), X, y)
            p = predict_gbt(model, X)
            assert roc_auc(y, p) == 1.0

    def test_zero_learning_rate_predicts_half(self):
        X, y = make_blobs(40, 5, 1.0, 2)
        model = train_gbt(GbtConfig(n_estimators=5, learning_rate=0.0), X, y)
        np.testing.assert_array_equal(predict_gbt(model, X), 0.5)

    def test_pos_weight_shifts_predictions_up(self):
        X, y = make_blobs(200, 6, 0.3, 4, n_pos=40)
        base = train_gbt(GbtConfig(n_estimators=30, seed=0, pos_weight=1.0), X, y)
        heavy = train_gbt(GbtConfig(n_estimators=30, seed=0, pos_weight=4.0), X, y)
        assert predict_gbt(heavy, X).mean() > predict_gbt(base, X).mean()

    def test_early_stopping_patience_and_best_iteration(self):
        X, y = make_blobs(80, 5, 3.0, 6)
        Xv, yv = make_blobs(40, 5, 3.0, 7)
        cfg = GbtConfig(n_estimators=100, early_stop_patience=5, seed=0)
        model = train_gbt(cfg, X, y, Xv, yv)
        aucs = np.array([e["val_auc"] for e in model.train_log])
        assert model.best_iteration == int(np.argmax(aucs)) + 1
        # stopped exactly patience rounds after the last improvement
        assert len(model.trees) == model.best_iteration + 5
        assert len(model.trees) < 100

    def test_prediction_uses_only_best_iteration_trees(self):
        X, y = make_blobs(80, 5, 2.0, 12)
        Xv, yv = make_blobs(40, 5, 2.0, 13)
        model = train_gbt(
            GbtConfig(n_estimators=40, early_stop_patience=8, seed=3), X, y, Xv, yv
        )
        margin = np.zeros(len(X))
        for tree in model.trees[: model.best_iteration]:
            margin += model.config.learning_rate * _predict_tree(tree, X)
        np.testing.assert_array_equal(predict_gbt(model, X), sigmoid(margin))

    def test_empty_model_predicts_half(self):
        model = GbtModel(config=GbtConfig(), trees=[], best_iteration=0, n_features=3)
        np.testing.assert_array_equal(predict_gbt(model, np.zeros((4, 3))), 0.5)

    def test_determinism_same_seed(self):
        X, y = make_blobs(100, 8, 0.7, 5)
        a = train_gbt(GbtConfig(n_estimators=20, seed=42), X, y)
        b = train_gbt(GbtConfig(n_estimators=20, seed=42), X, y)
        assert a.trees == b.trees
        assert a.train_log == b.train_log

    def test_seed_changes_subsampled_trees(self):
        X, y = make_blobs(100, 8, 0.7, 5)
        a = train_gbt(GbtConfig(n_estimators=10, seed=1), X, y)
        b = train_gbt(GbtConfig(n_estimators=10, seed=2), X, y)
        assert a.trees != b.trees

    @pytest.mark.parametrize("growth", list(Growth))
    def test_learns_mean_shift_task(self, growth):
        X, y = make_blobs(160, 10, 1.8, 9)
        Xv, yv = make_blobs(60, 10, 1.8, 10)
        model = train_gbt(
            GbtConfig(n_estimators=60, growth=growth, seed=2), X, y, Xv, yv
        )
        assert roc_auc(yv, predict_gbt(model, Xv)) > 0.9


# Serialization ------------------------------------------------------------------

class TestSerialization:
    def test_round_trip_identical_predictions(self, tmp_path):
        X, y = make_blobs(90, 6, 1.0, 14)
        model = train_gbt(GbtConfig(n_estimators=15, growth=Growth.LEAF_WISE, seed=5), X, y)
        path = tmp_path / "model.json"
        save_gbt(model, path, meta={"config_hash": "abc", "seed": 5})
        loaded = load_gbt(path)
        np.testing.assert_array_equal(predict_gbt(model, X), predict_gbt(loaded, X))
        assert loaded.config == model.config
        assert loaded.best_iteration == model.best_iteration
        payload = json.loads(path.read_text())
        assert payload["meta"] == {"config_hash": "abc", "seed": 5}

    def test_train_log_csv(self, tmp_path):
        X, y = make_blobs(60, 4, 1.5, 15)
        Xv, yv = make_blobs(30, 4, 1.5, 16)
        model = train_gbt(GbtConfig(n_estimators=8, seed=1), X, y, Xv, yv)
        path = tmp_path / "log.csv"
        write_train_log_csv(model, path, meta={"config_hash": "h", "seed": "1"})
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash=h"
        assert lines[1] == "# seed=1"
        assert lines[2] == "round,train_loss,val_auc"
        assert len(lines) == 3 + len(model.train_log)
        first = lines[3].split(",")
        assert int(first[0]) == 1
        assert float(first[1]) == model.train_log[0]["train_loss"]
