"""Two-layer GCN with pluggable aggregation, trained full-batch with Adam.

Layer ``k`` aggregates first and transforms second::

    a_v = f({h_u : u in N_v}),   h_v = sigma(a_v W)

with ReLU after layer 1 and raw logits after layer 2. The input features
are fixed, so the layer-1 aggregate ``f(X)`` is computed once per graph and
cached in a :class:`Propagation` plan.

With ``transform_first`` an order-statistic layer 1 aggregates the
projected rows instead, ``h_v = sigma(f({x_u W : u in N_v}))``. For the
weighted mean both orders coincide, so the flag only affects median and
trimmed mean.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .aggregators import AggregationKind, SegmentAggregator
from .graph import FeatureMatrix, Graph, LabelVector, Split

__all__ = [
    "DivergenceError",
    "GcnConfig",
    "GcnModel",
    "TrainHistory",
    "AdamState",
    "Propagation",
    "init_model",
    "forward",
    "loss_and_grads",
    "adam_step",
    "train",
    "predict",
    "accuracy",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]


class DivergenceError(FloatingPointError):
    """A loss, gradient or activation became non-finite."""


@dataclass(frozen=True)
class GcnConfig:
    hidden_units: int = 64
    num_layers: int = 2
    learning_rate: float = 0.01
    max_epochs: int = 200
    patience: int = 30
    aggregation: AggregationKind = AggregationKind("mean")
    seed: int = 0
    weight_decay: float = 5e-4
    dropout: float = 0.5
    # order-statistic layer-1 only: aggregate X @ W1 instead of X (mean is unaffected)
    transform_first: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aggregation", AggregationKind.parse(self.aggregation))
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.num_layers != 2:
            raise ValueError("only two-layer models are supported")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregation"] = self.aggregation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GcnConfig":
        d = dict(d)
        d["aggregation"] = AggregationKind.parse(d["aggregation"])
        return cls(**d)


@dataclass
class GcnModel:
    W1: np.ndarray
    W2: np.ndarray
    aggregation: AggregationKind
    config: GcnConfig
    meta: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        return {"W1": self.W1, "W2": self.W2}

    def with_params(self, params: dict) -> "GcnModel":
        return GcnModel(params["W1"], params["W2"], self.aggregation, self.config, dict(self.meta))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"train_loss": list(self.train_loss), "val_accuracy": list(self.val_accuracy),
                "best_epoch": self.best_epoch}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(cfg: GcnConfig, meta: dict) -> GcnModel:
    """Glorot-uniform weights drawn from ``numpy.random.default_rng(cfg.seed)``."""
    try:
        n_feat, n_cls = int(meta["num_features"]), int(meta["num_classes"])
    except (KeyError, TypeError, ValueError):
        raise ValueError("meta must provide num_features and num_classes") from None
    if n_feat < 1 or n_cls < 2:
        raise ValueError("need at least one feature and two classes")
    rng = np.random.default_rng(cfg.seed)
    w1 = _glorot(rng, n_feat, cfg.hidden_units)
    w2 = _glorot(rng, cfg.hidden_units, n_cls)
    return GcnModel(w1, w2, cfg.aggregation, cfg, dict(meta))


class Propagation:
    """Aggregation plan for one graph plus the cached layer-1 aggregate."""

    def __init__(self, kind: AggregationKind, g: Graph, x: FeatureMatrix,
                 transform_first: bool = False):
        if not g.self_loops_included:
            raise ValueError("graph must include self-loops")
        if x.num_nodes != g.num_nodes:
            raise ValueError(f"feature rows ({x.num_nodes}) != graph nodes ({g.num_nodes})")
        self.kind = kind
        self.graph = g
        self.segments = SegmentAggregator.from_graph(g, kind)
        self.transform_first = bool(transform_first) and kind.is_order_statistic
        if self.transform_first:
            self.a1 = x.matrix
        elif kind.name == "mean":
            self.a1 = sp.csr_matrix(self.segments.matrix @ x.matrix)
        else:
            out, _ = self.segments.forward(x.dense())
            self.a1 = sp.csr_matrix(out)
        self.a1_t = self.a1.T.tocsr()

    @classmethod
    def ensure(cls, plan, model: GcnModel, g: Graph, x: FeatureMatrix) -> "Propagation":
        tf = model.config.transform_first and model.aggregation.is_order_statistic
        if (plan is not None and plan.kind == model.aggregation and plan.graph is g
                and plan.transform_first == tf):
            return plan
        return cls(model.aggregation, g, x, tf)


def _check_shapes(model, x):
    if model.W1.shape[0] != x.num_features:
        raise ValueError(f"model expects {model.W1.shape[0]} features, got {x.num_features}")


def _forward_cache(params, plan, dropout_mask=None, need_grad=False):
    cache1 = None
    if plan.transform_first:
        z1, cache1 = plan.segments.forward(np.asarray(plan.a1 @ params["W1"]), need_grad=need_grad)
    else:
        z1 = plan.a1 @ params["W1"]
    h1 = np.maximum(z1, 0.0)
    if dropout_mask is not None:
        h1 = h1 * dropout_mask
    a2, agg_cache = plan.segments.forward(h1, need_grad=need_grad)
    logits = a2 @ params["W2"]
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits")
    return logits, (z1, h1, a2, agg_cache, cache1)


def forward(m: GcnModel, g: Graph, x: FeatureMatrix, plan: Propagation | None = None) -> np.ndarray:
    """Logits for every node (``num_nodes x num_classes``), evaluation mode."""
    _check_shapes(m, x)
    plan = Propagation.ensure(plan, m, g, x)
    logits, _ = _forward_cache(m.params, plan)
    return logits


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_grads(params, plan, labels, mask, weight_decay, dropout_mask=None):
    logits, (z1, h1, a2, agg_cache, cache1) = _forward_cache(params, plan, dropout_mask, need_grad=True)
    probs = _softmax(logits[mask])
    y = labels[mask]
    k = len(mask)
    nll = -np.log(np.maximum(probs[np.arange(k), y], 1e-300))
    w1 = params["W1"]
    loss = float(nll.mean() + 0.5 * weight_decay * np.sum(w1 * w1))
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    dlogits = np.zeros_like(logits)
    resid = probs
    resid[np.arange(k), y] -= 1.0
    dlogits[mask] = resid / k
    d_w2 = a2.T @ dlogits
    d_h1 = plan.segments.backward(agg_cache, dlogits @ params["W2"].T)
    if dropout_mask is not None:
        d_h1 = d_h1 * dropout_mask
    d_z1 = d_h1 * (z1 > 0)
    if plan.transform_first:
        d_z1 = plan.segments.backward(cache1, d_z1)
    d_w1 = plan.a1_t @ d_z1 + weight_decay * w1
    return loss, {"W1": np.asarray(d_w1), "W2": d_w2}, logits


def loss_and_grads(m: GcnModel, g: Graph, x: FeatureMatrix, y: LabelVector, mask,
                   dropout_mask=None, plan: Propagation | None = None):
    """Masked mean cross-entropy plus ``weight_decay/2 * ||W1||^2`` and its gradients.

    ``dropout_mask`` multiplies the layer-1 activations (already scaled by
    ``1/(1-p)``); pass ``None`` to evaluate without dropout.
    """
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("loss mask is empty")
    _check_shapes(m, x)
    plan = Propagation.ensure(plan, m, g, x)
    loss, grads, _ = _loss_grads(m.params, plan, y.labels, mask, m.config.weight_decay, dropout_mask)
    return loss, grads


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def accuracy(logits, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty evaluation mask")
    return float(np.mean(np.argmax(logits[idx], axis=1) == np.asarray(labels)[idx]))


def train(cfg: GcnConfig, g: Graph, x: FeatureMatrix, y: LabelVector, split: Split,
          meta: dict | None = None):
    """Full-batch training with early stopping on validation accuracy.

    Parameters from the best validation epoch (earliest on ties) are
    restored. Training stops after ``cfg.patience`` epochs without a strict
    improvement or at ``cfg.max_epochs``.
    """
    split.check(g.num_nodes)
    if split.train.size == 0 or split.val.size == 0:
        raise ValueError("split needs non-empty train and validation sets")
    meta = dict(meta or {})
    meta.setdefault("num_features", x.num_features)
    meta.setdefault("num_classes", y.num_classes)
    model = init_model(cfg, meta)
    _check_shapes(model, x)
    plan = Propagation(cfg.aggregation, g, x, cfg.transform_first)
    rng = np.random.default_rng([cfg.seed, 1])
    keep = 1.0 - cfg.dropout
    params, state = model.params, AdamState()
    best, best_acc, stale = dict(params), -1.0, 0
    history = TrainHistory()
    for epoch in range(cfg.max_epochs):
        mask = None
        if cfg.dropout > 0:
            mask = (rng.random((g.num_nodes, cfg.hidden_units)) < keep) / keep
        loss, grads, _ = _loss_grads(params, plan, y.labels, split.train, cfg.weight_decay, mask)
        params, state = adam_step(params, grads, state, cfg.learning_rate)
        logits, _ = _forward_cache(params, plan)
        val_acc = accuracy(logits, y.labels, split.val)
        history.train_loss.append(loss)
        history.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best, best_acc, stale = dict(params), val_acc, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return model.with_params(best), history


def predict(m: GcnModel, g: Graph, x: FeatureMatrix, v: int, reference: int | None = None,
            plan: Propagation | None = None):
    """Predicted class of node ``v`` and its logit margin.

    The margin is ``logit[c] - max_{c' != c} logit[c']`` where ``c`` is
    ``reference`` if given, else the prediction. Ties go to the lowest class.
    """
    row = forward(m, g, x, plan)[v]
    cls = int(np.argmax(row))
    return cls, logit_margin(row, cls if reference is None else reference)


def logit_margin(row, reference: int) -> float:
    row = np.asarray(row, dtype=np.float64)
    others = np.delete(row, reference)
    return float(row[reference] - others.max())


# ------------------------------------------------------------ serialisation


def model_to_dict(m: GcnModel) -> dict:
    return {
        "meta": m.meta,
        "config": m.config.to_dict(),
        "aggregation": m.aggregation.to_dict(),
        "W1": m.W1.tolist(),
        "W2": m.W2.tolist(),
    }


def model_from_dict(d: dict) -> GcnModel:
    cfg = GcnConfig.from_dict(d["config"])
    w1 = np.asarray(d["W1"], dtype=np.float64)
    w2 = np.asarray(d["W2"], dtype=np.float64)
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != w2.shape[0]:
        raise ValueError("inconsistent weight shapes in model document")
    if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
        raise ValueError("non-finite weights in model document")
    return GcnModel(w1, w2, AggregationKind.parse(d["aggregation"]), cfg, dict(d.get("meta", {})))


def save_model(m: GcnModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(m)) + "\n", encoding="utf-8")
    return path


def load_model(path) -> GcnModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
