"""Classical regression suite: kernel ridge, epsilon-SVR, regression trees,
random forests, and exhaustive grid search.

All estimators follow the scikit-learn protocol (``fit`` / ``predict``,
constructor-only hyperparameters, trailing-underscore fitted attributes) so
they compose with ``clone`` and the rest of that ecosystem, but the
numerics are implemented here.

The RBF kernel estimators use the divide-by-gamma convention from
:mod:`cellflow.kernels`: larger gamma means a smoother model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import DataError, NumericalError
from .kernels import rbf_kernel
from .validation import (
    check_array,
    check_fitted,
    check_predict_input,
    check_sample_weight,
    check_X_y,
)


class KernelRidge(RegressorMixin, BaseEstimator):
    """Ridge regression in RBF feature space, solved in the dual.

    Minimizes ``sum_i w_i (y_i - f(x_i))^2 + alpha ||f||^2``; the dual
    coefficients solve ``(K + alpha W^-1) c = y``. Weights are absolute:
    scaling all weights by a constant is equivalent to dividing ``alpha``
    by it. The system is solved by Cholesky factorization; a singular
    system (for example ``alpha == 0`` with duplicate rows) raises
    :class:`NumericalError`.

    Parameters
    ----------
    alpha : float
        Regularization strength, non-negative.
    gamma : float
        RBF bandwidth; the squared distance is divided by this value.
    """

    def __init__(self, alpha=1.0, gamma=0.01):
        self.alpha = alpha
        self.gamma = gamma

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        if self.alpha < 0:
            raise DataError(f"alpha must be non-negative, got {self.alpha}")
        if sample_weight is not None:
            w = check_sample_weight(sample_weight, X.shape[0])
            keep = w > 0
            X, y, w = X[keep], y[keep], w[keep]
            if X.shape[0] == 0:
                raise DataError("all sample weights are zero")
        else:
            w = None
        K = rbf_kernel(X, gamma=self.gamma)
        A = K.copy()
        idx = np.arange(X.shape[0])
        A[idx, idx] += self.alpha if w is None else self.alpha / w
        try:
            factor = scipy.linalg.cho_factor(A)
            coef = scipy.linalg.cho_solve(factor, y)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(
                f"kernel system is singular ({exc}); increase alpha or "
                "deduplicate rows"
            ) from None
        self.X_fit_ = X
        self.dual_coef_ = coef
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_fitted(self, "dual_coef_")
        X = check_predict_input(X, self.n_features_in_)
        return rbf_kernel(X, self.X_fit_, self.gamma) @ self.dual_coef_


class EpsilonSVR(RegressorMixin, BaseEstimator):
    """Epsilon-insensitive support vector regression trained by SMO.

    Solves the standard dual with box constraint ``C`` and tube width
    ``epsilon`` using maximal-violating-pair working-set selection.
    Optimization stops when the KKT violation drops below ``tol``; failure
    to converge within ``max_iter`` pair updates raises
    :class:`NumericalError` carrying the residual violation.

    Per-sample weights scale the box constraint (``C_i = C * w_i``);
    zero-weight samples are dropped.
    """

    def __init__(self, C=10.0, gamma=0.001, epsilon=0.1, tol=1e-3, max_iter=100_000):
        self.C = C
        self.gamma = gamma
        self.epsilon = epsilon
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        if self.C <= 0:
            raise DataError(f"C must be positive, got {self.C}")
        if self.epsilon < 0:
            raise DataError(f"epsilon must be non-negative, got {self.epsilon}")
        if sample_weight is not None:
            w = check_sample_weight(sample_weight, X.shape[0])
            keep = w > 0
            X, y, w = X[keep], y[keep], w[keep]
            box = self.C * w
        else:
            box = np.full(X.shape[0], float(self.C))

        n = X.shape[0]
        K = rbf_kernel(X, gamma=self.gamma)
        # Extended variables: a[:n] are the positive-side multipliers,
        # a[n:] the negative side; sign[s] is the label of each.
        sign = np.concatenate([np.ones(n), -np.ones(n)])
        p = np.concatenate([self.epsilon - y, self.epsilon + y])
        cbox = np.concatenate([box, box])
        a = np.zeros(2 * n)
        g = p.copy()

        it = 0
        while True:
            vals = -sign * g
            up = ((sign > 0) & (a < cbox)) | ((sign < 0) & (a > 0))
            low = ((sign > 0) & (a > 0)) | ((sign < 0) & (a < cbox))
            if not up.any() or not low.any():
                raise NumericalError("SMO working sets became empty")
            i = int(np.argmax(np.where(up, vals, -np.inf)))
            j = int(np.argmin(np.where(low, vals, np.inf)))
            m, M = vals[i], vals[j]
            if m - M <= self.tol:
                break
            if it >= self.max_iter:
                raise NumericalError(
                    f"SMO did not converge in {self.max_iter} iterations; "
                    f"residual KKT violation {m - M:.3e}"
                )
            ii, jj = i % n, j % n
            quad = K[ii, ii] + K[jj, jj] - 2.0 * K[ii, jj]
            step = (m - M) / max(quad, 1e-12)
            cap_i = cbox[i] - a[i] if sign[i] > 0 else a[i]
            cap_j = a[j] if sign[j] > 0 else cbox[j] - a[j]
            step = min(step, cap_i, cap_j)
            a[i] = np.clip(a[i] + sign[i] * step, 0.0, cbox[i])
            a[j] = np.clip(a[j] - sign[j] * step, 0.0, cbox[j])
            g += step * sign * (
                np.concatenate([K[:, ii], K[:, ii]])
                - np.concatenate([K[:, jj], K[:, jj]])
            )
            it += 1

        beta = a[:n] - a[n:]
        mask = beta != 0
        self.support_ = np.where(mask)[0]
        self.support_vectors_ = X[mask]
        self.dual_coef_ = beta[mask]
        self.intercept_ = float((m + M) / 2.0)
        self.n_iter_ = it
        self.kkt_violation_ = float(m - M)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_fitted(self, "dual_coef_")
        X = check_predict_input(X, self.n_features_in_)
        if self.support_vectors_.shape[0] == 0:
            return np.full(X.shape[0], self.intercept_)
        k = rbf_kernel(X, self.support_vectors_, self.gamma)
        return k @ self.dual_coef_ + self.intercept_


@dataclass
class _Tree:
    """Flat array representation of a fitted tree.

    ``feature[i] == -1`` marks a leaf; internal nodes send
    ``x[feature] <= threshold`` left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    @property
    def depth(self):
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) if self.n_nodes else 0

    def predict(self, X):
        out = np.empty(X.shape[0])
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if idx.size == 0:
                continue
            f = self.feature[node]
            if f < 0:
                out[idx] = self.value[node]
                continue
            goes_left = X[idx, f] <= self.threshold[node]
            stack.append((self.left[node], idx[goes_left]))
            stack.append((self.right[node], idx[~goes_left]))
        return out

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
        )


def _best_split(X, idx, y, w, feat_ids, min_leaf):
    """Exhaustive weighted squared-error split search over one node.

    ``w`` may be None for the common unweighted case. Candidate
    thresholds are midpoints between consecutive distinct values; the
    winner is the split minimizing total child impurity, with ties broken
    toward the lowest feature index and then the lowest threshold.
    Returns ``(feature, threshold, score)`` or ``None``.
    """
    n = idx.size
    yn = y[idx]
    wn = None if w is None else w[idx]
    best_score = np.inf
    best = None
    for f in feat_ids:
        col = X[idx, f]
        order = np.argsort(col)
        xs = col[order]
        valid = xs[:-1] < xs[1:]
        if min_leaf > 1:
            valid[: min_leaf - 1] = False
            valid[n - min_leaf :] = False
        if not valid.any():
            continue
        ys = yn[order]
        if wn is None:
            cy = np.cumsum(ys)[:-1]
            cyy = np.cumsum(ys * ys)
            Sy, Syy = cy[-1] + ys[-1], cyy[-1]
            cyy = cyy[:-1]
            cnt = np.arange(1, n, dtype=float)
            score = (cyy - cy**2 / cnt) + (
                (Syy - cyy) - (Sy - cy) ** 2 / (n - cnt)
            )
        else:
            ws = wn[order]
            wy = ws * ys
            cw = np.cumsum(ws)
            cwy = np.cumsum(wy)
            cwyy = np.cumsum(wy * ys)
            W, Sy, Syy = cw[-1], cwy[-1], cwyy[-1]
            lw, ly, lyy = cw[:-1], cwy[:-1], cwyy[:-1]
            valid &= (lw > 0) & (W - lw > 0)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                score = (lyy - ly**2 / lw) + (
                    (Syy - lyy) - (Sy - ly) ** 2 / (W - lw)
                )
        score[~valid] = np.inf
        k = int(np.argmin(score))
        if score[k] < best_score:
            best_score = float(score[k])
            thr = (xs[k] + xs[k + 1]) / 2.0
            if thr >= xs[k + 1]:
                # midpoint rounded up to the upper neighbour; any value in
                # [xs[k], xs[k+1]) keeps the partition intact under "<="
                thr = xs[k]
            best = (int(f), float(thr))
    if best is None:
        return None
    f, thr = best
    return f, thr, best_score


class RegressionTree(RegressorMixin, BaseEstimator):
    """CART regression tree with weighted squared-error impurity.

    Split search is exhaustive over midpoints of consecutive distinct
    values; a node becomes a leaf at ``max_depth``, when it cannot satisfy
    ``min_samples_leaf`` on both sides, or when no split strictly reduces
    impurity (a constant target yields a single leaf at any depth).
    ``max_features`` enables per-split feature subsampling and then
    requires ``random_state`` for reproducibility.
    """

    def __init__(self, max_depth=10, min_samples_leaf=1, max_features=None,
                 random_state=None):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        if self.max_depth is not None and self.max_depth < 0:
            raise DataError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be at least 1")
        if sample_weight is not None:
            w = check_sample_weight(sample_weight, X.shape[0])
        else:
            w = None
        rng = None
        if self.max_features is not None:
            rng = np.random.default_rng(self.random_state)
        self.tree_ = _build_tree(
            X, y, w,
            max_depth=np.inf if self.max_depth is None else self.max_depth,
            min_leaf=self.min_samples_leaf,
            mtry=_resolve_mtry(self.max_features, X.shape[1]),
            rng=rng,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_fitted(self, "tree_")
        X = check_predict_input(X, self.n_features_in_)
        return self.tree_.predict(X)


def _resolve_mtry(max_features, p):
    if max_features is None:
        return p
    if max_features == "third":
        return max(1, int(np.ceil(p / 3.0)))
    if max_features == "sqrt":
        return max(1, int(np.ceil(np.sqrt(p))))
    if isinstance(max_features, (int, np.integer)):
        if max_features < 1:
            raise DataError("max_features must be at least 1")
        return min(int(max_features), p)
    raise DataError(f"unsupported max_features {max_features!r}")


def _build_tree(X, y, w, max_depth, min_leaf, mtry, rng):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    p = X.shape[1]

    def grow(idx, depth):
        node = new_node()
        yn = y[idx]
        if w is None:
            W = float(idx.size)
            mean = float(yn.mean())
            sse = float(yn @ yn - W * mean**2)
        else:
            wn = w[idx]
            W = wn.sum()
            mean = float(wn @ yn / W)
            sse = float(wn @ yn**2 - W * mean**2)
        value[node] = mean
        if depth >= max_depth or idx.size < 2 * min_leaf or sse <= 1e-12 * max(1.0, W):
            return node
        if rng is not None and mtry < p:
            feat_ids = np.sort(rng.choice(p, size=mtry, replace=False))
        else:
            feat_ids = np.arange(p)
        found = _best_split(X, idx, y, w, feat_ids, min_leaf)
        if found is None or found[2] >= sse - 1e-12 * max(1.0, sse):
            return node
        f, thr, _ = found
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return _Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
    )


def _fit_forest_tree(X, y, seed, n, bootstrap, p_draw, max_depth, min_leaf, mtry):
    rng = np.random.default_rng(seed)
    if bootstrap:
        idx = rng.choice(n, size=n, replace=True, p=p_draw)
    else:
        idx = np.arange(n)
    return _build_tree(
        X[idx], y[idx], None,
        max_depth=max_depth, min_leaf=min_leaf, mtry=mtry, rng=rng,
    )


class RandomForest(RegressorMixin, BaseEstimator):
    """Bagged regression trees with per-split feature subsampling.

    Each tree trains on a bootstrap resample (drawn proportionally to
    ``sample_weight`` when given) and averages into the prediction, so
    heavily weighted regions gain resolution in every tree. Per-tree
    seeds are spawned ahead of time from ``random_state``, so results do
    not depend on ``n_jobs``.
    """

    def __init__(self, n_estimators=100, max_depth=30, min_samples_leaf=1,
                 max_features="third", bootstrap=True, random_state=None,
                 n_jobs=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        if self.n_estimators < 1:
            raise DataError("n_estimators must be at least 1")
        n = X.shape[0]
        p_draw = None
        if sample_weight is not None:
            w = check_sample_weight(sample_weight, n)
            p_draw = w / w.sum()
            if not self.bootstrap:
                raise DataError(
                    "sample_weight requires bootstrap=True; weights enter "
                    "through the resampling probabilities"
                )
        mtry = _resolve_mtry(self.max_features, X.shape[1])
        depth = np.inf if self.max_depth is None else self.max_depth
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_estimators)
        if self.n_jobs in (None, 1):
            trees = [
                _fit_forest_tree(X, y, s, n, self.bootstrap, p_draw, depth,
                                 self.min_samples_leaf, mtry)
                for s in seeds
            ]
        else:
            trees = Parallel(n_jobs=self.n_jobs)(
                delayed(_fit_forest_tree)(
                    X, y, s, n, self.bootstrap, p_draw, depth,
                    self.min_samples_leaf, mtry
                )
                for s in seeds
            )
        self.trees_ = trees
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_fitted(self, "trees_")
        X = check_predict_input(X, self.n_features_in_)
        out = np.zeros(X.shape[0])
        for tree in self.trees_:
            out += tree.predict(X)
        return out / len(self.trees_)


MODEL_KINDS = ("kr", "svr", "dt", "rf", "lstm")


def make_model(kind, params=None):
    """Instantiate an estimator by short name with constructor params."""
    params = dict(params or {})
    if kind == "kr":
        cls = KernelRidge
    elif kind == "svr":
        cls = EpsilonSVR
    elif kind == "dt":
        cls = RegressionTree
    elif kind == "rf":
        cls = RandomForest
    elif kind == "lstm":
        from .lstm import LstmRegressor

        cls = LstmRegressor
    else:
        raise DataError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    try:
        return cls(**params)
    except TypeError as exc:
        raise DataError(f"bad parameters for model {kind!r}: {exc}") from exc


@dataclass
class GridSearchResult:
    """Outcome of an exhaustive grid search.

    ``table`` holds one entry per combination: its params, validation
    score (None if fitting failed), and the error message if any. The
    best combination is the highest-scoring one, first-wins on ties.
    """

    kind: str
    best_params: dict
    best_score: float
    best_model: object
    table: list


def grid_search(kind, grid, X_train, y_train, X_val, y_val, metric=None,
                sample_weight=None, fixed_params=None):
    """Fit every combination of ``grid`` values and score on validation data.

    ``grid`` maps parameter names to candidate lists; combinations are
    enumerated in the declared key order, so results are deterministic.
    Combinations whose fit raises a cellflow error are recorded in the
    table and skipped. If every combination fails, the last error is
    re-raised.
    """
    if metric is None:
        from .evaluation import r2_score

        metric = r2_score
    if not grid or not all(isinstance(v, (list, tuple)) and v for v in grid.values()):
        raise DataError("grid must map parameter names to non-empty lists")
    keys = list(grid)
    table = []
    best = None
    last_error = None
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(fixed_params or {})
        params.update(zip(keys, combo))
        model = make_model(kind, params)
        try:
            if sample_weight is not None:
                model.fit(X_train, y_train, sample_weight=sample_weight)
            else:
                model.fit(X_train, y_train)
            score = float(metric(y_val, model.predict(X_val)))
        except (DataError, NumericalError) as exc:
            last_error = exc
            table.append({"params": dict(params), "score": None, "error": str(exc)})
            continue
        table.append({"params": dict(params), "score": score, "error": None})
        if best is None or score > best[1]:
            best = (params, score, model)
    if best is None:
        raise NumericalError(f"every grid combination failed; last error: {last_error}")
    return GridSearchResult(
        kind=kind,
        best_params=best[0],
        best_score=best[1],
        best_model=best[2],
        table=table,
    )
