"""Recurrent network for windowed flow regression, implemented on numpy.

Architecture: two stacked LSTM layers, dropout on the final hidden state,
two fully connected ReLU layers, and a linear output. Training is
mini-batch Adam on mean squared error, with backpropagation through time
derived and implemented here.

The module also exposes the generic pieces (parameter flattening, a
feed-forward head network, the training loop) reused by the domain
adaptation code, which trains a head on frozen trunk features with an
extra penalty term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin

from .datamodel import INTERVAL
from .errors import DataError, NumericalError
from .validation import check_array, check_fitted

LSTM_LAYER_ORDER = ("lstm1", "lstm2", "fc1", "fc2", "out")


def _check_windows(X, name="X"):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 3:
        raise DataError(f"{name} must have shape (n, window, features), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains non-finite values")
    return X


def make_windows(X, y, keys, window):
    """Slice per-road rows into overlapping training windows.

    ``keys`` pairs each row with (road_id, timestamp). Within a road,
    rows belong to the same window only if they are consecutive
    15-minute intervals; gaps start a new run. Each window's label is the
    target of its final row, and the returned keys identify that row.

    Returns ``(Xw, yw, wkeys)`` with ``Xw`` of shape
    ``(n_windows, window, n_features)``.
    """
    X = check_array(X, "X")
    y = check_array(y, "y", ndim=1)
    if window < 1:
        raise DataError("window must be at least 1")
    if len(keys) != X.shape[0]:
        raise DataError("keys length does not match X")
    by_road = {}
    for i, (road_id, ts) in enumerate(keys):
        by_road.setdefault(road_id, []).append((ts, i))
    xs, ys, wkeys = [], [], []
    for road_id in sorted(by_road):
        rows = sorted(by_road[road_id])
        run = [rows[0]]
        runs = [run]
        for prev, cur in zip(rows, rows[1:]):
            if cur[0] - prev[0] == INTERVAL:
                run.append(cur)
            else:
                run = [cur]
                runs.append(run)
        for run in runs:
            idx = [i for _, i in run]
            for k in range(window - 1, len(idx)):
                take = idx[k - window + 1 : k + 1]
                xs.append(X[take])
                ys.append(y[idx[k]])
                wkeys.append((road_id, run[k][0]))
    if not xs:
        raise DataError(
            f"no contiguous runs of length {window}; check the window size"
        )
    return np.stack(xs), np.array(ys), tuple(wkeys)


def _init_dense(rng, n_in, n_out):
    s = 1.0 / np.sqrt(n_in)
    return {"W": rng.uniform(-s, s, size=(n_in, n_out)), "b": np.zeros(n_out)}


def _init_lstm(rng, n_in, hidden):
    s = 1.0 / np.sqrt(n_in + hidden)
    p = {"W": rng.uniform(-s, s, size=(n_in + hidden, 4 * hidden)),
         "b": np.zeros(4 * hidden)}
    p["b"][hidden : 2 * hidden] = 1.0  # forget gate starts open
    return p


def _cell_act(name, c):
    if name == "tanh":
        a = np.tanh(c)
        return a, 1.0 - a * a
    if name == "relu":
        a = np.maximum(c, 0.0)
        return a, (c > 0).astype(float)
    raise DataError(f"unknown cell activation {name!r}; expected tanh or relu")


def _lstm_forward(p, X, activation):
    B, T, d = X.shape
    h = p["b"].shape[0] // 4
    H = np.empty((B, T, h))
    hs = np.zeros((B, h))
    cs = np.zeros((B, h))
    steps = []
    for t in range(T):
        xh = np.concatenate([X[:, t], hs], axis=1)
        z = xh @ p["W"] + p["b"]
        i = expit(z[:, :h])
        f = expit(z[:, h : 2 * h])
        g = np.tanh(z[:, 2 * h : 3 * h])
        o = expit(z[:, 3 * h :])
        c_prev = cs
        cs = f * c_prev + i * g
        ac, dac = _cell_act(activation, cs)
        hs = o * ac
        H[:, t] = hs
        steps.append((xh, i, f, g, o, c_prev, ac, dac))
    return H, steps


def _lstm_backward(p, X, steps, dH):
    B, T, d = X.shape
    h = p["b"].shape[0] // 4
    dW = np.zeros_like(p["W"])
    db = np.zeros_like(p["b"])
    dX = np.zeros_like(X)
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    for t in reversed(range(T)):
        xh, i, f, g, o, c_prev, ac, dac = steps[t]
        dh = dH[:, t] + dh_next
        do = dh * ac
        dc = dh * o * dac + dc_next
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc_next = dc * f
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dW += xh.T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ p["W"].T
        dX[:, t] = dxh[:, :d]
        dh_next = dxh[:, d:]
    return dW, db, dX


class LstmNetwork:
    """The full network: parameters plus forward and backward passes.

    ``params`` maps layer names (:data:`LSTM_LAYER_ORDER`) to dicts with
    ``W`` and ``b`` arrays. Dropout applies between the second LSTM layer
    and the first dense layer, only when ``train=True`` and a generator
    is supplied.
    """

    def __init__(self, n_features, hidden_size, dropout=0.2,
                 cell_activation="tanh", params=None, rng=None):
        self.n_features = n_features
        self.hidden_size = hidden_size
        self.dropout = dropout
        self.cell_activation = cell_activation
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            h = hidden_size
            self.params = {
                "lstm1": _init_lstm(rng, n_features, h),
                "lstm2": _init_lstm(rng, h, h),
                "fc1": _init_dense(rng, h, h),
                "fc2": _init_dense(rng, h, h),
                "out": _init_dense(rng, h, 1),
            }

    def forward(self, X, train=False, rng=None):
        p = self.params
        H1, s1 = _lstm_forward(p["lstm1"], X, self.cell_activation)
        H2, s2 = _lstm_forward(p["lstm2"], H1, self.cell_activation)
        last = H2[:, -1]
        mask = None
        if train and self.dropout > 0:
            if rng is None:
                raise NumericalError("dropout requires a generator in training mode")
            keep = 1.0 - self.dropout
            mask = (rng.random(last.shape) < keep) / keep
            dropped = last * mask
        else:
            dropped = last
        z1 = dropped @ p["fc1"]["W"] + p["fc1"]["b"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ p["fc2"]["W"] + p["fc2"]["b"]
        a2 = np.maximum(z2, 0.0)
        yhat = (a2 @ p["out"]["W"] + p["out"]["b"])[:, 0]
        cache = (X, H1, s1, H2, s2, mask, dropped, z1, a1, z2, a2)
        return yhat, cache

    def backward(self, cache, dy):
        p = self.params
        X, H1, s1, H2, s2, mask, dropped, z1, a1, z2, a2 = cache
        grads = {}
        da2 = dy[:, None] @ p["out"]["W"].T
        grads["out"] = {"W": a2.T @ dy[:, None], "b": np.array([dy.sum()])}
        dz2 = da2 * (z2 > 0)
        grads["fc2"] = {"W": a1.T @ dz2, "b": dz2.sum(axis=0)}
        da1 = dz2 @ p["fc2"]["W"].T
        dz1 = da1 * (z1 > 0)
        grads["fc1"] = {"W": dropped.T @ dz1, "b": dz1.sum(axis=0)}
        dlast = dz1 @ p["fc1"]["W"].T
        if mask is not None:
            dlast = dlast * mask
        dH2 = np.zeros_like(H2)
        dH2[:, -1] = dlast
        dW2, db2, dH1 = _lstm_backward(p["lstm2"], H1, s2, dH2)
        grads["lstm2"] = {"W": dW2, "b": db2}
        dW1, db1, _ = _lstm_backward(p["lstm1"], X, s1, dH1)
        grads["lstm1"] = {"W": dW1, "b": db1}
        return grads

    def trunk_features(self, X, upto="fc2"):
        """Deterministic activations of the frozen trunk (no dropout).

        ``upto="fc2"`` returns the second dense layer's ReLU output;
        ``upto="lstm2"`` the final hidden state of the second LSTM layer.
        """
        p = self.params
        H1, _ = _lstm_forward(p["lstm1"], X, self.cell_activation)
        H2, _ = _lstm_forward(p["lstm2"], H1, self.cell_activation)
        last = H2[:, -1]
        if upto == "lstm2":
            return last
        if upto != "fc2":
            raise DataError(f"unknown trunk cut {upto!r}")
        a1 = np.maximum(last @ p["fc1"]["W"] + p["fc1"]["b"], 0.0)
        return np.maximum(a1 @ p["fc2"]["W"] + p["fc2"]["b"], 0.0)


class MlpNetwork:
    """Small fully connected network used as an adaptation head.

    ``layout`` is a list of (name, n_in, n_out, activation) tuples with
    activation ``relu`` or ``linear``; the final layer must produce one
    output. ``backward`` accepts optional gradients injected at hidden
    activations, which lets a caller add penalty terms defined on
    intermediate layers.
    """

    def __init__(self, layout, params=None, rng=None):
        self.layout = list(layout)
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = {
                name: _init_dense(rng, n_in, n_out)
                for name, n_in, n_out, _ in self.layout
            }

    def forward(self, X, train=False, rng=None):
        acts = [X]
        pre = []
        a = X
        for name, _, _, activation in self.layout:
            z = a @ self.params[name]["W"] + self.params[name]["b"]
            pre.append(z)
            a = np.maximum(z, 0.0) if activation == "relu" else z
            acts.append(a)
        return a[:, 0], (acts, pre)

    def backward(self, cache, dy, inject=None):
        acts, pre = cache
        grads = {}
        da = dy[:, None]
        for k in reversed(range(len(self.layout))):
            name, _, _, activation = self.layout[k]
            if inject and (k + 1) in inject:
                da = da + inject[k + 1]
            dz = da * (pre[k] > 0) if activation == "relu" else da
            grads[name] = {"W": acts[k].T @ dz, "b": dz.sum(axis=0)}
            da = dz @ self.params[name]["W"].T
        return grads

    def activations(self, X):
        """Post-activation outputs of every layer, index 1-based."""
        _, (acts, _) = self.forward(X)
        return acts


def flatten_params(params):
    """Concatenate all parameter arrays into one vector plus a layout spec."""
    spec = []
    chunks = []
    for layer in sorted(params):
        for name in sorted(params[layer]):
            arr = params[layer][name]
            spec.append((layer, name, arr.shape))
            chunks.append(arr.ravel())
    return np.concatenate(chunks), spec


def unflatten_params(vec, spec):
    params = {}
    pos = 0
    for layer, name, shape in spec:
        size = int(np.prod(shape))
        params.setdefault(layer, {})[name] = vec[pos : pos + size].reshape(shape)
        pos += size
    if pos != vec.shape[0]:
        raise DataError("parameter vector length does not match layout")
    return params


def network_loss_and_grads(net, X, y):
    """Full-batch MSE and its parameter gradients, without dropout.

    The building block for finite-difference verification of the
    backward pass.
    """
    yhat, cache = net.forward(X, train=False)
    err = yhat - y
    loss = float(err @ err / len(y))
    grads = net.backward(cache, 2.0 * err / len(y))
    return loss, grads


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = frozenset(frozen)
        self.t = 0
        self.m = {
            layer: {k: np.zeros_like(v) for k, v in sub.items()}
            for layer, sub in params.items()
        }
        self.v = {
            layer: {k: np.zeros_like(v) for k, v in sub.items()}
            for layer, sub in params.items()
        }

    def step(self, params, grads, lr):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for layer, sub in params.items():
            if layer in self.frozen:
                continue
            for k, w in sub.items():
                g = grads[layer][k]
                m = self.m[layer][k]
                v = self.v[layer][k]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                w -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def snapshot(self):
        copy = lambda d: {l: {k: v.copy() for k, v in s.items()} for l, s in d.items()}
        return self.t, copy(self.m), copy(self.v)

    def restore(self, snap):
        self.t, self.m, self.v = snap


def _copy_params(params):
    return {layer: {k: v.copy() for k, v in sub.items()} for layer, sub in params.items()}


def fit_network(net, X, y, *, epochs, batch_size, learning_rate, seed,
                lr_fallback=False, frozen=(), extra=None):
    """Mini-batch Adam training shared by the LSTM and adaptation heads.

    ``extra``, when given, replaces the plain backward pass for each
    batch: it is called as ``extra(batch_idx, yhat, cache, dy)`` and must
    return ``(grads, penalty_value)``. With ``extra=None`` the loop is
    exactly plain MSE training, so penalty-free configurations reduce to
    ordinary fine-tuning by construction.

    ``lr_fallback`` reverts any epoch that increased the loss and halves
    the learning rate instead. Returns the per-epoch log; entries hold
    ``mse``, ``penalty``, ``total``, and the learning rate in effect.
    Divergence (non-finite loss) raises :class:`NumericalError`.
    """
    n = X.shape[0]
    if n == 0:
        raise DataError("no training windows")
    if epochs < 1 or batch_size < 1:
        raise DataError("epochs and batch_size must be positive")
    rng_shuffle = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    rng_dropout = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    adam = _Adam(net.params, frozen=frozen)
    lr = float(learning_rate)
    log = []
    prev_total = np.inf
    for epoch in range(epochs):
        if lr_fallback:
            saved = (_copy_params(net.params), adam.snapshot())
        perm = rng_shuffle.permutation(n)
        sse = 0.0
        penalty_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            bidx = perm[start : start + batch_size]
            yhat, cache = net.forward(X[bidx], train=True, rng=rng_dropout)
            err = yhat - y[bidx]
            sse += float(err @ err)
            dy = 2.0 * err / bidx.size
            if extra is None:
                grads = net.backward(cache, dy)
                penalty = 0.0
            else:
                grads, penalty = extra(bidx, yhat, cache, dy)
            penalty_sum += penalty
            n_batches += 1
            adam.step(net.params, grads, lr)
        mse = sse / n
        penalty_avg = penalty_sum / n_batches
        total = mse + penalty_avg
        if not np.isfinite(total):
            raise NumericalError(
                f"training diverged at epoch {epoch}: loss is not finite; "
                "reduce the learning rate"
            )
        if lr_fallback and total > prev_total:
            net.params = saved[0]
            adam.restore(saved[1])
            lr /= 2.0
            log.append(
                {"epoch": epoch, "mse": None, "penalty": None,
                 "total": prev_total, "lr": lr, "reverted": True}
            )
            if lr < 1e-12:
                break
            continue
        prev_total = total
        log.append(
            {"epoch": epoch, "mse": mse, "penalty": penalty_avg,
             "total": total, "lr": lr, "reverted": False}
        )
    return log


def write_training_log(log, path):
    """Export a training log as CSV."""
    with open(path, "w") as fh:
        fh.write("epoch,mse,penalty,total,lr,reverted\n")
        for entry in log:
            fh.write(
                "{epoch},{mse},{penalty},{total},{lr},{reverted}\n".format(
                    epoch=entry["epoch"],
                    mse="" if entry["mse"] is None else repr(entry["mse"]),
                    penalty="" if entry["penalty"] is None else repr(entry["penalty"]),
                    total=repr(entry["total"]),
                    lr=repr(entry["lr"]),
                    reverted=int(entry["reverted"]),
                )
            )


class LstmRegressor(RegressorMixin, BaseEstimator):
    """Windowed sequence regressor around :class:`LstmNetwork`.

    ``fit`` expects pre-windowed input of shape (n, window, features), as
    produced by :func:`make_windows`. ``window`` is carried as a
    hyperparameter so pipeline code can build matching windows; the
    network itself accepts whatever window length the data has.
    """

    def __init__(self, hidden_size=100, window=5, dropout=0.2,
                 learning_rate=0.0009, epochs=300, batch_size=32,
                 cell_activation="tanh", lr_fallback=False, random_state=None):
        self.hidden_size = hidden_size
        self.window = window
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.cell_activation = cell_activation
        self.lr_fallback = lr_fallback
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_windows(X)
        y = check_array(y, "y", ndim=1)
        if X.shape[0] != y.shape[0]:
            raise DataError("X and y have mismatched lengths")
        if not 0 <= self.dropout < 1:
            raise DataError("dropout must be in [0, 1)")
        seed = 0 if self.random_state is None else int(self.random_state)
        rng_init = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        net = LstmNetwork(
            n_features=X.shape[2],
            hidden_size=self.hidden_size,
            dropout=self.dropout,
            cell_activation=self.cell_activation,
            rng=rng_init,
        )
        self.training_log_ = fit_network(
            net, X, y,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=seed,
            lr_fallback=self.lr_fallback,
        )
        self.net_ = net
        self.n_features_in_ = X.shape[2]
        self.window_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_fitted(self, "net_")
        X = _check_windows(X)
        if X.shape[2] != self.n_features_in_:
            raise DataError(
                f"X has {X.shape[2]} features, model was fitted with "
                f"{self.n_features_in_}"
            )
        yhat, _ = self.net_.forward(X, train=False)
        return yhat

    def trunk_features(self, X, upto="fc2"):
        check_fitted(self, "net_")
        return self.net_.trunk_features(_check_windows(X), upto=upto)
