"""Transfer learning across road domains.

Two mechanisms are provided:

* Kernel mean matching (KMM): instance weights for the source samples
  that align the weighted source feature distribution with the target
  distribution in RBF kernel space. The weights then drive weighted
  refits of the classical estimators.
* Deep domain adaptation: a small head is trained on frozen trunk
  features of a pretrained LSTM, with source-side MSE plus a maximum mean
  discrepancy penalty that pulls source and target activations together
  at the adaptation layers.

Both use the divide-by-gamma RBF convention of :mod:`cellflow.kernels`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .kernels import median_squared_distance, rbf_kernel
from .lstm import MlpNetwork, fit_network
from .regression import make_model
from .validation import check_array

log = logging.getLogger(__name__)


def mmd2(A, B, gamma, unbiased=False):
    """Squared maximum mean discrepancy between two samples.

    The default is the biased V-statistic
    ``mean(K_AA) + mean(K_BB) - 2 mean(K_AB)``, clamped at zero against
    round-off; it vanishes when ``A`` and ``B`` are identical.
    ``unbiased=True`` uses the U-statistic (off-diagonal means, at least
    two rows per sample), which can be negative.
    """
    A = check_array(A, "A")
    B = check_array(B, "B")
    kaa = rbf_kernel(A, gamma=gamma)
    kbb = rbf_kernel(B, gamma=gamma)
    kab = rbf_kernel(A, B, gamma=gamma)
    if unbiased:
        na, nb = A.shape[0], B.shape[0]
        if na < 2 or nb < 2:
            raise DataError("unbiased MMD needs at least two rows per sample")
        taa = (kaa.sum() - np.trace(kaa)) / (na * (na - 1))
        tbb = (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1))
        return float(taa + tbb - 2.0 * kab.mean())
    value = float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())
    return max(value, 0.0)


def mmd2_with_grads(A, B, gamma):
    """Biased squared MMD and its gradients with respect to both samples.

    Returns ``(value, dA, dB)`` where the value is the raw V-statistic
    (unclamped) so the gradients are exact.
    """
    A = check_array(A, "A")
    B = check_array(B, "B")
    na, nb = A.shape[0], B.shape[0]
    kaa = rbf_kernel(A, gamma=gamma)
    kbb = rbf_kernel(B, gamma=gamma)
    kab = rbf_kernel(A, B, gamma=gamma)
    value = float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())
    c = 2.0 / gamma
    # d/dA_i of mean(K_AA): rows i of K appear twice by symmetry.
    dA = (-2.0 * c / na**2) * (kaa.sum(axis=1)[:, None] * A - kaa @ A)
    dA += (2.0 * c / (na * nb)) * (kab.sum(axis=1)[:, None] * A - kab @ B)
    dB = (-2.0 * c / nb**2) * (kbb.sum(axis=1)[:, None] * B - kbb @ B)
    dB += (2.0 * c / (na * nb)) * (kab.sum(axis=0)[:, None] * B - kab.T @ A)
    return value, dA, dB


@dataclass(frozen=True)
class KmmConfig:
    """Settings for the kernel mean matching solver.

    ``B`` bounds each weight; ``eps`` bounds the relative deviation of the
    weight sum from the source count (``None`` resolves to
    ``(sqrt(n) - 1)/sqrt(n)``); ``gamma=None`` resolves to the median
    squared distance over the pooled samples.
    """

    B: float = 1000.0
    eps: float = None
    gamma: float = None
    tol: float = 1e-6
    max_iter: int = 2000


@dataclass
class KmmResult:
    """Weights plus solver diagnostics.

    ``objective`` is the final quadratic objective value;
    ``uniform_objective`` the value at all-ones weights, which the solver
    never exceeds because it starts there and keeps its best iterate.
    """

    weights: np.ndarray
    objective: float
    uniform_objective: float
    gamma: float
    eps: float
    n_iter: int
    converged: bool


def _project_box_sum(v, upper, lo, hi):
    """Euclidean projection onto {0 <= x <= upper, lo <= sum(x) <= hi}.

    Clips to the box, then if the sum constraint is violated finds the
    shift ``mu`` (by bisection, since the clipped sum is monotone in
    ``mu``) that lands the sum exactly on the violated boundary.
    """

    def clipped(mu):
        return np.clip(v + mu, 0.0, upper)

    s = clipped(0.0).sum()
    if lo <= s <= hi:
        return clipped(0.0)
    target = lo if s < lo else hi
    span = upper + np.abs(v).max() + 1.0
    a, b = -span, span
    for _ in range(100):
        mid = 0.5 * (a + b)
        if clipped(mid).sum() < target:
            a = mid
        else:
            b = mid
    return clipped(0.5 * (a + b))


def _power_iteration_lmax(K, iters=50):
    v = np.full(K.shape[0], 1.0 / np.sqrt(K.shape[0]))
    lam = 1.0
    for _ in range(iters):
        w = K @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 1.0
        lam = norm
        v = w / norm
    return float(lam)


def kmm_weights(X_source, X_target, config=None):
    """Kernel mean matching instance weights for the source sample.

    Minimizes ``0.5 a' K a - kappa' a`` over ``0 <= a <= B`` with the
    weight sum confined to ``n_s * (1 +/- eps)``, where ``K`` is the
    source kernel matrix and ``kappa_i = (n_s / n_t) * sum_j k(x_i, t_j)``
    measures each source point's affinity to the target sample. Solved by
    projected gradient descent from uniform weights with a fixed
    ``1/lambda_max(K)`` step; the best feasible iterate is kept, so the
    result is never worse than uniform weighting.
    """
    cfg = config or KmmConfig()
    Xs = check_array(X_source, "X_source")
    Xt = check_array(X_target, "X_target")
    if Xs.shape[1] != Xt.shape[1]:
        raise DataError("source and target have mismatched feature counts")
    ns, nt = Xs.shape[0], Xt.shape[0]
    if cfg.B <= 0:
        raise DataError("B must be positive")
    eps = cfg.eps if cfg.eps is not None else (np.sqrt(ns) - 1.0) / np.sqrt(ns)
    if not 0 <= eps:
        raise DataError("eps must be non-negative")
    gamma = cfg.gamma if cfg.gamma is not None else median_squared_distance(Xs, Xt)

    K = rbf_kernel(Xs, gamma=gamma)
    kappa = (ns / nt) * rbf_kernel(Xs, Xt, gamma=gamma).sum(axis=1)

    def objective(a):
        return float(0.5 * a @ (K @ a) - kappa @ a)

    lo, hi = ns * (1.0 - eps), ns * (1.0 + eps)
    step = 1.0 / max(_power_iteration_lmax(K), 1e-12)
    alpha = np.ones(ns)
    alpha = _project_box_sum(alpha, cfg.B, lo, hi)
    best = alpha.copy()
    best_obj = objective(alpha)
    uniform_obj = best_obj
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        grad = K @ alpha - kappa
        alpha = _project_box_sum(alpha - step * grad, cfg.B, lo, hi)
        obj = objective(alpha)
        if obj < best_obj:
            improvement = best_obj - obj
            best_obj = obj
            best = alpha.copy()
            if improvement <= cfg.tol * max(1.0, abs(best_obj)):
                converged = True
                break
        else:
            converged = True
            break
    if not converged:
        log.warning(
            "KMM solver hit max_iter=%d without meeting tol=%g; "
            "returning best feasible weights", cfg.max_iter, cfg.tol,
        )
    return KmmResult(
        weights=best,
        objective=best_obj,
        uniform_objective=uniform_obj,
        gamma=float(gamma),
        eps=float(eps),
        n_iter=it,
        converged=converged,
    )


def fit_weighted(kind, X, y, weights, params=None):
    """Fit a classical estimator with per-sample weights.

    ``kind`` is one of ``kr``, ``svr``, ``dt``, ``rf``. The sequence
    model has its own transfer path (:func:`da_finetune`) and is
    rejected here.
    """
    if kind == "lstm":
        raise DataError(
            "weighted fitting is not defined for the sequence model; "
            "use domain adaptation instead"
        )
    model = make_model(kind, params)
    return model.fit(X, y, sample_weight=weights)


@dataclass(frozen=True)
class DaConfig:
    """Settings for MMD-regularized head adaptation.

    ``lam`` scales the penalty ``lam * sum_l mmd2`` over the adaptation
    layers; ``layers`` gives 1-based indices of the head layers to
    regularize, where 1 and 2 are the hidden ReLU layers and 3 is the
    linear output, whose alignment acts directly on the predicted
    distribution. ``adapt_mode="append"`` keeps the whole pretrained
    network as the frozen trunk and trains two fresh ReLU layers plus a
    new linear output on top; ``"retrain_head"`` cuts after the second
    LSTM layer and retrains the original dense head, warm-started from
    the pretrained weights. ``gamma=None`` resolves to the median
    heuristic per layer on the initial head activations; an explicit
    value is shared by every aligned layer.
    """

    lam: float = 1.0
    layers: tuple = (1, 2)
    gamma: float = None
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 32
    adapt_mode: str = "append"

    def __post_init__(self):
        if self.lam < 0:
            raise DataError("lam must be non-negative")
        if self.adapt_mode not in ("append", "retrain_head"):
            raise DataError(f"unknown adapt_mode {self.adapt_mode!r}")
        if not self.layers or not all(l in (1, 2, 3) for l in self.layers):
            raise DataError("layers must be a non-empty subset of (1, 2, 3)")


class AdaptedLstm:
    """A frozen pretrained trunk plus a trained adaptation head.

    ``predict`` runs trunk features through the head. The trunk network
    is held by reference and never modified.
    """

    def __init__(self, trunk_net, trunk_cut, head, config, gamma, training_log):
        self.trunk_net = trunk_net
        self.trunk_cut = trunk_cut
        self.head = head
        self.config = config
        self.gamma = gamma
        self.training_log = training_log

    def predict(self, X):
        feats = self.trunk_net.trunk_features(
            np.ascontiguousarray(X, dtype=float), upto=self.trunk_cut
        )
        out, _ = self.head.forward(feats)
        return out


def _head_layout(hidden):
    return [
        ("ad1", hidden, hidden, "relu"),
        ("ad2", hidden, hidden, "relu"),
        ("ad_out", hidden, 1, "linear"),
    ]


def da_finetune(pretrained, X_source, y_source, X_target, config=None, seed=0):
    """Adapt a pretrained sequence model to a target domain.

    Trains the adaptation head on source windows with MSE loss while an
    MMD penalty aligns source and target activations at the configured
    head layers; target labels are never used. Target batches cycle
    through a fixed shuffled order. With ``lam == 0`` or an empty target
    sample, the loop degenerates to plain head training on the source.

    ``pretrained`` is a fitted :class:`~cellflow.lstm.LstmRegressor`.
    Returns an :class:`AdaptedLstm`.
    """
    cfg = config or DaConfig()
    if not hasattr(pretrained, "net_"):
        raise DataError("pretrained model is not fitted")
    X_source = np.ascontiguousarray(X_source, dtype=float)
    X_target = np.ascontiguousarray(X_target, dtype=float)
    if X_target.ndim == 2 and X_target.shape[0] == 0:
        X_target = X_target.reshape(0, *X_source.shape[1:])
    y_source = check_array(y_source, "y_source", ndim=1)

    cut = "fc2" if cfg.adapt_mode == "append" else "lstm2"
    Fs = pretrained.net_.trunk_features(X_source, upto=cut)
    Ft = (
        pretrained.net_.trunk_features(X_target, upto=cut)
        if X_target.shape[0]
        else np.zeros((0, Fs.shape[1]))
    )

    hidden = Fs.shape[1]
    seq = np.random.SeedSequence(seed, spawn_key=(0,))
    if cfg.adapt_mode == "append":
        head = MlpNetwork(_head_layout(hidden), rng=np.random.default_rng(seq))
    else:
        src = pretrained.net_.params
        params = {
            "ad1": {"W": src["fc1"]["W"].copy(), "b": src["fc1"]["b"].copy()},
            "ad2": {"W": src["fc2"]["W"].copy(), "b": src["fc2"]["b"].copy()},
            "ad_out": {"W": src["out"]["W"].copy(), "b": src["out"]["b"].copy()},
        }
        head = MlpNetwork(_head_layout(hidden), params=params)

    use_penalty = cfg.lam > 0 and Ft.shape[0] > 0
    gamma = None
    if use_penalty:
        if cfg.gamma is not None:
            gamma = {layer: float(cfg.gamma) for layer in cfg.layers}
        else:
            acts_s = head.activations(Fs)
            acts_t = head.activations(Ft)
            gamma = {
                layer: median_squared_distance(acts_s[layer], acts_t[layer])
                for layer in cfg.layers
            }
    extra = None
    if use_penalty:
        order = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(3,))
        ).permutation(Ft.shape[0])
        cursor = {"pos": 0}

        def extra(bidx, yhat, cache, dy):
            nt = min(cfg.batch_size, Ft.shape[0])
            take = [(cursor["pos"] + k) % Ft.shape[0] for k in range(nt)]
            cursor["pos"] = (cursor["pos"] + nt) % Ft.shape[0]
            tb = Ft[order[take]]
            _, tcache = head.forward(tb)
            src_inject = {}
            tgt_inject = {}
            penalty = 0.0
            for layer in cfg.layers:
                a_src = cache[0][layer]
                a_tgt = tcache[0][layer]
                value, d_src, d_tgt = mmd2_with_grads(a_src, a_tgt, gamma[layer])
                penalty += cfg.lam * value
                src_inject[layer] = cfg.lam * d_src
                tgt_inject[layer] = cfg.lam * d_tgt
            grads = head.backward(cache, dy, inject=src_inject)
            tgrads = head.backward(tcache, np.zeros(tb.shape[0]), inject=tgt_inject)
            for name in grads:
                for k in grads[name]:
                    grads[name][k] = grads[name][k] + tgrads[name][k]
            return grads, penalty

    training_log = fit_network(
        head, Fs, y_source,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        seed=seed,
        extra=extra,
    )
    return AdaptedLstm(
        trunk_net=pretrained.net_,
        trunk_cut=cut,
        head=head,
        config=cfg,
        gamma=gamma,
        training_log=training_log,
    )


@dataclass
class DaObjective:
    """Full-batch value of the adaptation objective, by component."""

    mse: float
    penalty: float
    objective: float


def da_objective(adapted, X_source, y_source, X_target):
    """Evaluate the adaptation objective of a fitted :class:`AdaptedLstm`.

    Computes the source MSE of the head plus ``lam`` times the summed
    layer MMD penalties on the full source and target samples, using the
    gammas the model was trained with. Needs no target labels, so it can
    rank independent adaptation runs: a run whose alignment stalled keeps
    a large penalty and loses to one that converged.
    """
    X_source = np.ascontiguousarray(X_source, dtype=float)
    X_target = np.ascontiguousarray(X_target, dtype=float)
    y_source = check_array(y_source, "y_source", ndim=1)
    Fs = adapted.trunk_net.trunk_features(X_source, upto=adapted.trunk_cut)
    preds, _ = adapted.head.forward(Fs)
    mse = float(np.mean((preds - y_source) ** 2))
    penalty = 0.0
    if adapted.gamma is not None and X_target.shape[0]:
        Ft = adapted.trunk_net.trunk_features(X_target, upto=adapted.trunk_cut)
        acts_s = adapted.head.activations(Fs)
        acts_t = adapted.head.activations(Ft)
        penalty = float(sum(
            mmd2(acts_s[layer], acts_t[layer], adapted.gamma[layer])
            for layer in adapted.config.layers
        ))
    return DaObjective(
        mse=mse,
        penalty=penalty,
        objective=mse + adapted.config.lam * penalty,
    )
