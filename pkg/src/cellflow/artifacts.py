"""Model persistence.

Fitted estimators serialize to a single JSON document holding the
constructor parameters, the fitted state, and the feature recipe used at
training time (column names, scaling stats, window length) so that a
loaded model can be applied to freshly built features. Floats are written
with full round-trip precision and keys are sorted, making save/load/save
byte-stable.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .lstm import LstmNetwork, LstmRegressor, MlpNetwork
from .regression import (
    EpsilonSVR,
    KernelRidge,
    RandomForest,
    RegressionTree,
    _Tree,
    make_model,
)
from .transfer import AdaptedLstm, DaConfig

FORMAT = "cellflow-model"
VERSION = 1


def _arr(a):
    return np.asarray(a).tolist()


def _params_of(model):
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in model.get_params().items()}


def _state_of(model):
    if isinstance(model, KernelRidge):
        return {
            "X_fit": _arr(model.X_fit_),
            "dual_coef": _arr(model.dual_coef_),
            "n_features_in": int(model.n_features_in_),
        }
    if isinstance(model, EpsilonSVR):
        return {
            "support": _arr(model.support_),
            "support_vectors": _arr(model.support_vectors_),
            "dual_coef": _arr(model.dual_coef_),
            "intercept": float(model.intercept_),
            "n_iter": int(model.n_iter_),
            "kkt_violation": float(model.kkt_violation_),
            "n_features_in": int(model.n_features_in_),
        }
    if isinstance(model, RegressionTree):
        return {"tree": model.tree_.to_dict(),
                "n_features_in": int(model.n_features_in_)}
    if isinstance(model, RandomForest):
        return {"trees": [t.to_dict() for t in model.trees_],
                "n_features_in": int(model.n_features_in_)}
    if isinstance(model, LstmRegressor):
        net = model.net_
        return {
            "params": {layer: {k: _arr(v) for k, v in sub.items()}
                       for layer, sub in net.params.items()},
            "hidden_size": int(net.hidden_size),
            "cell_activation": net.cell_activation,
            "dropout": float(net.dropout),
            "n_features_in": int(model.n_features_in_),
            "window_in": int(model.window_in_),
        }
    raise DataError(f"cannot serialize model of type {type(model).__name__}")


def _kind_of(model):
    for kind, cls in (("kr", KernelRidge), ("svr", EpsilonSVR),
                      ("dt", RegressionTree), ("rf", RandomForest),
                      ("lstm", LstmRegressor)):
        if isinstance(model, cls):
            return kind
    if isinstance(model, AdaptedLstm):
        return "da"
    raise DataError(f"cannot serialize model of type {type(model).__name__}")


def _da_document(model):
    cfg = model.config
    return {
        "trunk": {
            "params": {layer: {k: _arr(v) for k, v in sub.items()}
                       for layer, sub in model.trunk_net.params.items()},
            "hidden_size": int(model.trunk_net.hidden_size),
            "cell_activation": model.trunk_net.cell_activation,
            "dropout": float(model.trunk_net.dropout),
            "n_features": int(model.trunk_net.n_features),
        },
        "trunk_cut": model.trunk_cut,
        "head": {
            "layout": [[n, int(i), int(o), a] for n, i, o, a in model.head.layout],
            "params": {layer: {k: _arr(v) for k, v in sub.items()}
                       for layer, sub in model.head.params.items()},
        },
        "gamma": None if model.gamma is None else {
            str(layer): float(g) for layer, g in model.gamma.items()
        },
        "config": {
            "lam": cfg.lam,
            "layers": list(cfg.layers),
            "gamma": cfg.gamma,
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "adapt_mode": cfg.adapt_mode,
        },
    }


def save_model(model, path, feature_meta=None):
    """Write a fitted model (and its feature recipe) as JSON."""
    kind = _kind_of(model)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind}
    if kind == "da":
        doc["state"] = _da_document(model)
        doc["params"] = {}
    else:
        doc["params"] = _params_of(model)
        doc["state"] = _state_of(model)
    doc["features"] = feature_meta
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _np(x):
    return np.asarray(x, dtype=float)


def load_model(path):
    """Load a model written by :func:`save_model`.

    Returns ``(model, feature_meta)``; predictions match the original
    exactly.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from None
    if doc.get("format") != FORMAT:
        raise DataError(f"{path} is not a cellflow model file")
    if doc.get("version") != VERSION:
        raise DataError(f"unsupported model file version {doc.get('version')!r}")
    kind = doc.get("kind")
    state = doc.get("state", {})
    feature_meta = doc.get("features")

    if kind == "da":
        trunk = state["trunk"]
        trunk_net = LstmNetwork(
            n_features=trunk["n_features"],
            hidden_size=trunk["hidden_size"],
            dropout=trunk["dropout"],
            cell_activation=trunk["cell_activation"],
            params={layer: {k: _np(v) for k, v in sub.items()}
                    for layer, sub in trunk["params"].items()},
        )
        head = MlpNetwork(
            layout=[tuple(entry) for entry in state["head"]["layout"]],
            params={layer: {k: _np(v) for k, v in sub.items()}
                    for layer, sub in state["head"]["params"].items()},
        )
        cfg = state["config"]
        model = AdaptedLstm(
            trunk_net=trunk_net,
            trunk_cut=state["trunk_cut"],
            head=head,
            config=DaConfig(
                lam=cfg["lam"],
                layers=tuple(cfg["layers"]),
                gamma=cfg["gamma"],
                epochs=cfg["epochs"],
                learning_rate=cfg["learning_rate"],
                batch_size=cfg["batch_size"],
                adapt_mode=cfg["adapt_mode"],
            ),
            gamma=None if state["gamma"] is None else {
                int(layer): float(g) for layer, g in state["gamma"].items()
            },
            training_log=None,
        )
        return model, feature_meta

    params = {
        k: (tuple(v) if isinstance(v, list) else v)
        for k, v in doc.get("params", {}).items()
    }
    model = make_model(kind, params)
    if kind == "kr":
        model.X_fit_ = _np(state["X_fit"])
        model.dual_coef_ = _np(state["dual_coef"])
        model.n_features_in_ = int(state["n_features_in"])
    elif kind == "svr":
        model.support_ = np.asarray(state["support"], dtype=np.int64)
        sv = _np(state["support_vectors"])
        n_features = int(state["n_features_in"])
        model.support_vectors_ = sv.reshape(-1, n_features)
        model.dual_coef_ = _np(state["dual_coef"])
        model.intercept_ = float(state["intercept"])
        model.n_iter_ = int(state["n_iter"])
        model.kkt_violation_ = float(state["kkt_violation"])
        model.n_features_in_ = n_features
    elif kind == "dt":
        model.tree_ = _Tree.from_dict(state["tree"])
        model.n_features_in_ = int(state["n_features_in"])
    elif kind == "rf":
        model.trees_ = [_Tree.from_dict(t) for t in state["trees"]]
        model.n_features_in_ = int(state["n_features_in"])
    elif kind == "lstm":
        net = LstmNetwork(
            n_features=int(state["n_features_in"]),
            hidden_size=int(state["hidden_size"]),
            dropout=float(state["dropout"]),
            cell_activation=state["cell_activation"],
            params={layer: {k: _np(v) for k, v in sub.items()}
                    for layer, sub in state["params"].items()},
        )
        model.net_ = net
        model.training_log_ = None
        model.n_features_in_ = int(state["n_features_in"])
        model.window_in_ = int(state["window_in"])
    else:
        raise DataError(f"unknown model kind {kind!r} in {path}")
    return model, feature_meta
