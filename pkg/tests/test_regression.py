"""Classical regressors: kernel ridge, epsilon-SVR, trees, forests, grid search."""

import numpy as np
import pytest

from cellflow.errors import DataError, NumericalError
from cellflow.kernels import rbf_kernel
from cellflow.regression import (
    EpsilonSVR,
    KernelRidge,
    RandomForest,
    RegressionTree,
    grid_search,
    make_model,
)


def wavy_data(n=40, seed=0, d=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, d))
    y = np.sin(2 * X[:, 0]) + 0.5 * X[:, -1]
    return X, y


class TestKernelRidge:
    def test_single_point_shrinkage(self):
        """With one training point, the prediction is y / (1 + alpha)."""
        for alpha in (0.5, 1.0, 4.0):
            kr = KernelRidge(alpha=alpha, gamma=1.0)
            kr.fit(np.array([[0.0]]), np.array([2.0]))
            assert kr.predict(np.array([[0.0]]))[0] == pytest.approx(2.0 / (1 + alpha))

    def test_zero_alpha_interpolates(self):
        X, y = wavy_data(n=25, seed=1)
        kr = KernelRidge(alpha=0.0, gamma=2.0).fit(X, y)
        assert np.max(np.abs(kr.predict(X) - y)) < 1e-6

    def test_matches_dense_solver(self):
        X, y = wavy_data(n=30, seed=2)
        alpha, gamma = 0.3, 1.5
        kr = KernelRidge(alpha=alpha, gamma=gamma).fit(X, y)
        K = rbf_kernel(X, X, gamma)
        beta = np.linalg.solve(K + alpha * np.eye(len(y)), y)
        assert np.max(np.abs(kr.dual_coef_ - beta)) < 1e-8
        Xq = wavy_data(n=10, seed=3)[0]
        assert np.max(np.abs(kr.predict(Xq) - rbf_kernel(Xq, X, gamma) @ beta)) < 1e-8

    def test_train_error_monotone_in_alpha(self):
        X, y = wavy_data(n=30, seed=4)
        errs = []
        for alpha in (0.0, 0.1, 1.0, 10.0, 100.0):
            kr = KernelRidge(alpha=alpha, gamma=2.0).fit(X, y)
            errs.append(float(np.mean((kr.predict(X) - y) ** 2)))
        assert all(b >= a - 1e-12 for a, b in zip(errs, errs[1:]))

    def test_sample_weight_scales_regularization(self):
        """Weight w_i acts like a per-row ridge alpha of alpha / w_i."""
        X, y = wavy_data(n=20, seed=5)
        rng = np.random.default_rng(6)
        w = rng.uniform(0.5, 2.0, size=len(y))
        alpha, gamma = 0.7, 1.2
        kr = KernelRidge(alpha=alpha, gamma=gamma).fit(X, y, sample_weight=w)
        K = rbf_kernel(X, X, gamma)
        beta = np.linalg.solve(K + np.diag(alpha / w), y)
        assert np.max(np.abs(kr.dual_coef_ - beta)) < 1e-8

    def test_negative_alpha_rejected(self):
        with pytest.raises(DataError):
            KernelRidge(alpha=-1.0).fit(np.zeros((2, 1)), np.zeros(2))

    def test_singular_system_raises(self):
        X = np.zeros((2, 1))
        with pytest.raises(NumericalError):
            KernelRidge(alpha=0.0, gamma=1.0).fit(X, np.array([1.0, 2.0]))

    def test_predict_before_fit_rejected(self):
        with pytest.raises(DataError):
            KernelRidge().predict(np.zeros((1, 1)))


class TestEpsilonSvr:
    def test_constant_target_needs_no_support_vectors(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(12, 2))
        svr = EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.1).fit(X, np.full(12, 5.0))
        assert svr.support_.size == 0
        assert svr.intercept_ == pytest.approx(5.0)
        assert np.allclose(svr.predict(X), 5.0)

    def test_kkt_feasibility(self):
        X, y = wavy_data(n=30, seed=7)
        C = 5.0
        svr = EpsilonSVR(C=C, gamma=1.0, epsilon=0.05).fit(X, y)
        assert abs(svr.dual_coef_.sum()) <= 1e-9
        assert np.all(np.abs(svr.dual_coef_) <= C + 1e-9)

    def test_epsilon_tube(self):
        """Non-support training points sit inside the epsilon tube."""
        X, y = wavy_data(n=30, seed=8)
        eps = 0.2
        svr = EpsilonSVR(C=50.0, gamma=1.0, epsilon=eps, tol=1e-4).fit(X, y)
        resid = np.abs(svr.predict(X) - y)
        non_sv = np.setdiff1d(np.arange(len(y)), svr.support_)
        assert non_sv.size > 0
        assert np.all(resid[non_sv] <= eps + 1e-3)

    def test_wider_epsilon_fewer_support_vectors(self):
        X, y = wavy_data(n=40, seed=9)
        narrow = EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.01).fit(X, y)
        wide = EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.5).fit(X, y)
        assert wide.support_.size < narrow.support_.size

    def test_zero_weight_rows_are_dropped(self):
        """A zero weight removes the row from the optimization entirely."""
        X, y = wavy_data(n=20, seed=10)
        w = np.ones(len(y))
        w[3] = 0.0
        svr = EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.05).fit(X, y, sample_weight=w)
        keep = np.arange(len(y)) != 3
        ref = EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.05).fit(X[keep], y[keep])
        assert np.array_equal(svr.predict(X), ref.predict(X))
        assert np.array_equal(svr.dual_coef_, ref.dual_coef_)

    def test_non_convergence_raises(self):
        X, y = wavy_data(n=30, seed=11)
        with pytest.raises(NumericalError, match="converge"):
            EpsilonSVR(C=10.0, gamma=1.0, epsilon=0.01, max_iter=1).fit(X, y)


class TestRegressionTree:
    def test_depth_zero_predicts_mean(self):
        X = np.arange(6.0).reshape(-1, 1)
        y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        t = RegressionTree(max_depth=0).fit(X, y)
        assert t.tree_.n_nodes == 1
        assert np.allclose(t.predict(X), y.mean())

    def test_constant_target_single_leaf(self):
        X = np.arange(8.0).reshape(-1, 1)
        t = RegressionTree(max_depth=5).fit(X, np.full(8, 7.0))
        assert t.tree_.n_nodes == 1
        assert np.allclose(t.predict(X), 7.0)

    def test_step_function_split(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        t = RegressionTree(max_depth=1).fit(X, y)
        assert t.tree_.feature[0] == 0
        assert t.tree_.threshold[0] == pytest.approx(1.5)
        assert np.array_equal(t.predict(X), y)

    def test_invariant_to_monotone_feature_transform(self):
        X, y = wavy_data(n=60, seed=12, d=3)
        t1 = RegressionTree(max_depth=4).fit(X, y)
        X2 = np.sign(X) * np.abs(X) ** 3
        t2 = RegressionTree(max_depth=4).fit(X2, y)
        Xq, _ = wavy_data(n=30, seed=13, d=3)
        Xq2 = np.sign(Xq) * np.abs(Xq) ** 3
        assert np.allclose(t1.predict(Xq), t2.predict(Xq2))

    def test_uniform_weights_equal_unweighted(self):
        """Uniform weights give the same tree up to float rounding."""
        X, y = wavy_data(n=40, seed=14)
        t1 = RegressionTree(max_depth=4).fit(X, y)
        for w in (np.ones(len(y)), np.full(len(y), 3.0)):
            t2 = RegressionTree(max_depth=4).fit(X, y, sample_weight=w)
            assert np.array_equal(t1.tree_.feature, t2.tree_.feature)
            assert np.array_equal(t1.tree_.threshold, t2.tree_.threshold)
            assert np.allclose(t1.predict(X), t2.predict(X), atol=1e-12)

    def test_one_hot_weight_pins_leaf_value(self):
        X, y = wavy_data(n=10, seed=15)
        w = np.zeros(len(y))
        w[4] = 1.0
        t = RegressionTree(max_depth=0).fit(X, y, sample_weight=w)
        assert t.predict(X[:1])[0] == pytest.approx(y[4])

    def test_tie_breaks_on_lowest_feature(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        Xdup = np.hstack([X, X])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        t = RegressionTree(max_depth=1).fit(Xdup, y)
        assert t.tree_.feature[0] == 0

    def test_min_samples_leaf_respected(self):
        X, y = wavy_data(n=50, seed=16)
        t = RegressionTree(max_depth=8, min_samples_leaf=10).fit(X, y)
        tr = t.tree_
        counts = np.zeros(tr.n_nodes, dtype=int)
        for x in X:
            node = 0
            while tr.feature[node] >= 0:
                if x[tr.feature[node]] <= tr.threshold[node]:
                    node = tr.left[node]
                else:
                    node = tr.right[node]
            counts[node] += 1
        leaf_counts = counts[tr.feature == -1]
        assert leaf_counts.min() >= 10


class TestRandomForest:
    def test_degenerate_forest_equals_tree(self):
        X, y = wavy_data(n=50, seed=17)
        rf = RandomForest(
            n_estimators=1, max_depth=4, max_features=None, bootstrap=False,
            random_state=0,
        ).fit(X, y)
        dt = RegressionTree(max_depth=4).fit(X, y)
        assert np.array_equal(rf.predict(X), dt.predict(X))

    def test_predictions_within_target_range(self):
        X, y = wavy_data(n=80, seed=18)
        rf = RandomForest(n_estimators=20, max_depth=6, random_state=1).fit(X, y)
        p = rf.predict(X)
        assert p.min() >= y.min() - 1e-12
        assert p.max() <= y.max() + 1e-12

    def test_seed_determinism(self):
        X, y = wavy_data(n=60, seed=19)
        p1 = RandomForest(n_estimators=10, random_state=7).fit(X, y).predict(X)
        p2 = RandomForest(n_estimators=10, random_state=7).fit(X, y).predict(X)
        p3 = RandomForest(n_estimators=10, random_state=8).fit(X, y).predict(X)
        assert np.array_equal(p1, p2)
        assert not np.array_equal(p1, p3)

    def test_n_jobs_does_not_change_result(self):
        X, y = wavy_data(n=60, seed=20)
        p1 = RandomForest(n_estimators=8, random_state=3, n_jobs=1).fit(X, y).predict(X)
        p2 = RandomForest(n_estimators=8, random_state=3, n_jobs=2).fit(X, y).predict(X)
        assert np.array_equal(p1, p2)

    def test_weighted_resampling_shifts_predictions(self):
        rng = np.random.default_rng(21)
        X = np.vstack([rng.normal(-2, 0.1, size=(30, 1)), rng.normal(2, 0.1, size=(30, 1))])
        y = np.concatenate([np.zeros(30), np.ones(30)])
        w = np.concatenate([np.full(30, 1e-6), np.ones(30)])
        rf = RandomForest(n_estimators=30, max_depth=0, random_state=0).fit(
            X, y, sample_weight=w
        )
        assert rf.predict(np.array([[0.0]]))[0] > 0.95

    def test_sample_weight_requires_bootstrap(self):
        X, y = wavy_data(n=10, seed=22)
        rf = RandomForest(n_estimators=2, bootstrap=False, random_state=0)
        with pytest.raises(DataError):
            rf.fit(X, y, sample_weight=np.ones(len(y)))


class TestGridSearch:
    def test_single_cell(self):
        X, y = wavy_data(n=30, seed=23)
        res = grid_search("dt", {"max_depth": [3]}, X, y, X, y)
        assert res.best_params == {"max_depth": 3}
        assert len(res.table) == 1
        assert res.table[0]["error"] is None

    def test_first_wins_on_ties(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        res = grid_search("dt", {"max_depth": [1, 2, 3]}, X, y, X, y)
        assert res.best_params == {"max_depth": 1}
        assert res.best_score == pytest.approx(1.0)

    def test_table_covers_product(self):
        X, y = wavy_data(n=30, seed=24)
        grid = {"max_depth": [2, 4], "min_samples_leaf": [1, 3, 5]}
        res = grid_search("dt", grid, X, y, X, y)
        assert len(res.table) == 6
        params_seen = [tuple(sorted(row["params"].items())) for row in res.table]
        assert len(set(params_seen)) == 6

    def test_failing_cell_recorded(self):
        X, y = wavy_data(n=20, seed=25)
        res = grid_search("kr", {"alpha": [-1.0, 0.5], "gamma": [1.0]}, X, y, X, y)
        assert res.best_params == {"alpha": 0.5, "gamma": 1.0}
        errs = [row["error"] for row in res.table]
        assert sum(e is not None for e in errs) == 1

    def test_all_cells_failing_raises(self):
        X, y = wavy_data(n=20, seed=26)
        with pytest.raises(NumericalError):
            grid_search("kr", {"alpha": [-1.0, -2.0]}, X, y, X, y)

    def test_empty_grid_rejected(self):
        X, y = wavy_data(n=10, seed=27)
        with pytest.raises(DataError):
            grid_search("dt", {}, X, y, X, y)
        with pytest.raises(DataError):
            grid_search("dt", {"max_depth": []}, X, y, X, y)

    def test_fixed_params_merged(self):
        X, y = wavy_data(n=30, seed=28)
        res = grid_search(
            "rf", {"max_depth": [2]}, X, y, X, y,
            fixed_params={"n_estimators": 3, "random_state": 0},
        )
        assert res.best_model.n_estimators == 3


class TestMakeModel:
    def test_known_kinds(self):
        assert isinstance(make_model("kr", {}), KernelRidge)
        assert isinstance(make_model("dt", {"max_depth": 2}), RegressionTree)
        assert isinstance(make_model("rf", {}), RandomForest)
        assert isinstance(make_model("svr", {}), EpsilonSVR)

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError):
            make_model("xgboost", {})

    def test_unknown_param_rejected(self):
        with pytest.raises(DataError):
            make_model("dt", {"bogus": 1})
