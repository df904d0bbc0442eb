"""Shallow softmax encoder trained on the current cluster labels.

Stands in for fine-tuning a CNN: labels go in, a refined representation and
class scores come out.  With ``hidden_dim == 0`` the model is a plain
multilogit; otherwise it is one ReLU layer followed by the softmax head, and
the hidden activations are the refined features.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from ldpo.core import FeatureMatrix, LabelVector, ValidationError, read_model, write_model
from ldpo.metrics import topk_accuracy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 0
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    head_lr_mult: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class EncoderModel:
    w1: np.ndarray | None   # (D, H) or None when H == 0
    b1: np.ndarray | None
    w2: np.ndarray          # (H or D, K)
    b2: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: tuple[float, ...] = ()
    best_epoch: int = -1

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            a = getattr(self, name)
            if a is not None and not np.all(np.isfinite(a)):
                raise ValidationError(f"encoder parameter {name} is not finite")

    @property
    def hidden_dim(self) -> int:
        return 0 if self.w1 is None else self.w1.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w2.shape[0] if self.w1 is None else self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {"w2": self.w2, "b2": self.b2}
        if self.w1 is not None:
            p.update(w1=self.w1, b1=self.b1)
        return p

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "loss_history": list(self.loss_history),
                "best_epoch": self.best_epoch}
        write_model(path, "encoder", self.params(), meta)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        _, a, meta = read_model(path, "encoder")
        return cls(a.get("w1"), a.get("b1"), a["w2"], a["b2"], TrainConfig(**meta["config"]),
                   tuple(meta["loss_history"]), meta["best_epoch"])


@dataclass(frozen=True)
class EvalReport:
    top1: float
    top5: float
    per_class: np.ndarray
    n_test: int
    top5_defined: bool = True

    def to_dict(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "n_test": self.n_test,
                "top5_defined": self.top5_defined,
                "per_class": [None if np.isnan(v) else float(v) for v in self.per_class]}


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def _check_input(m: EncoderModel, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ValidationError(f"input dim {x.shape[-1]} != encoder input dim {m.input_dim}")


def forward(params: dict[str, np.ndarray], x: np.ndarray):
    """Returns ``(hidden or None, pre-activation or None, logits)``."""
    if "w1" in params:
        pre = x @ params["w1"] + params["b1"]
        h = np.maximum(pre, 0.0)
        return h, pre, h @ params["w2"] + params["b2"]
    return None, None, x @ params["w2"] + params["b2"]


def loss_and_grad(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray,
                  weight_decay: float = 0.0):
    """Mean softmax cross-entropy plus ``weight_decay/2 * |W|^2`` (weights only)."""
    n = x.shape[0]
    h, pre, logits = forward(params, x)
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(n), y])
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {}
    feats = x if h is None else h
    grads["w2"] = feats.T @ dlogits + weight_decay * params["w2"]
    grads["b2"] = dlogits.sum(axis=0)
    loss += 0.5 * weight_decay * np.sum(params["w2"] ** 2)
    if h is not None:
        dh = (dlogits @ params["w2"].T) * (pre > 0)
        grads["w1"] = x.T @ dh + weight_decay * params["w1"]
        grads["b1"] = dh.sum(axis=0)
        loss += 0.5 * weight_decay * np.sum(params["w1"] ** 2)
    return float(loss), grads


def init_params(d: int, k: int, hidden_dim: int, rng: np.random.Generator,
                body: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    p = {}
    fan_in = d
    if hidden_dim > 0:
        if body is not None and body["w1"].shape == (d, hidden_dim):
            p["w1"], p["b1"] = body["w1"].copy(), body["b1"].copy()
        else:
            p["w1"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, hidden_dim))
            p["b1"] = np.zeros(hidden_dim)
        fan_in = hidden_dim
    p["w2"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, k))
    p["b2"] = np.zeros(k)
    return p


def _model(params, cfg, history=(), best_epoch=-1) -> EncoderModel:
    return EncoderModel(params.get("w1"), params.get("b1"), params["w2"], params["b2"],
                        cfg, tuple(history), best_epoch)


def train_encoder(x_train, y_train: LabelVector, x_val=None, y_val: LabelVector | None = None,
                  config: TrainConfig | None = None,
                  warm_start: EncoderModel | None = None) -> EncoderModel:
    """Seeded mini-batch SGD with momentum on softmax cross-entropy.

    The head learns ``head_lr_mult`` times faster than the hidden layer.
    Returns the epoch snapshot with the best validation top-1, ties going to
    the lower validation cross-entropy (training data when no validation set
    is given); ``loss_history`` holds the
    full-training-set loss after every epoch.  ``warm_start`` reuses the
    hidden layer of an earlier model; the head is always re-initialised.
    """
    cfg = config or TrainConfig()
    xt = _data(x_train)
    yt = y_train.labels
    k = y_train.k
    if k < 2:
        raise ValidationError("need at least two classes to train")
    present = np.bincount(yt, minlength=k)
    if np.any(present == 0):
        raise ValidationError(f"class {int(np.flatnonzero(present == 0)[0])} is absent "
                              "from the training set")
    if isinstance(x_train, FeatureMatrix) and isinstance(x_val, FeatureMatrix):
        if set(x_train.item_ids) & set(x_val.item_ids):
            raise ValidationError("training and validation sets overlap")
    xv = _data(x_val) if x_val is not None and y_val is not None and len(y_val) else None
    yv = y_val.labels if xv is not None else None

    rng = np.random.default_rng(cfg.seed)
    body = warm_start.params() if warm_start is not None and warm_start.hidden_dim else None
    params = init_params(xt.shape[1], k, cfg.hidden_dim, rng, body)
    velocity = {name: np.zeros_like(v) for name, v in params.items()}
    lr = {name: cfg.learning_rate * (cfg.head_lr_mult if cfg.hidden_dim and name in ("w2", "b2")
                                     else 1.0) for name in params}

    def score(p):
        xs, ys = (xv, yv) if xv is not None else (xt, yt)
        logits = forward(p, xs)[2]
        ce = np.mean(logsumexp(logits, axis=1) - logits[np.arange(ys.size), ys])
        return topk_accuracy(logits, ys, 1), -ce

    best = ({n: v.copy() for n, v in params.items()}, score(params), -1)
    history = []
    n = xt.shape[0]
    bs = max(1, min(cfg.batch_size, n))
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            _, grads = loss_and_grad(params, xt[idx], yt[idx], cfg.weight_decay)
            for name in params:
                velocity[name] = cfg.momentum * velocity[name] - lr[name] * grads[name]
                params[name] = params[name] + velocity[name]
        loss, _ = loss_and_grad(params, xt, yt, cfg.weight_decay)
        if not np.isfinite(loss):
            raise ValidationError(f"training diverged at epoch {epoch}")
        history.append(loss)
        acc = score(params)
        if acc > best[1]:
            best = ({n_: v.copy() for n_, v in params.items()}, acc, epoch)
    log.debug("train_encoder: best top-1 %.3f at epoch %d", best[1][0], best[2])
    return _model(best[0], cfg, history, best[2])


def encode_refined(m: EncoderModel, x) -> FeatureMatrix | np.ndarray:
    """Hidden activations (``H > 0``) or pre-softmax scores (``H == 0``)."""
    data = _data(x)
    _check_input(m, data)
    h, _, logits = forward(m.params(), data)
    out = logits if h is None else h
    return x.with_data(out) if isinstance(x, FeatureMatrix) else out


def predict_proba(m: EncoderModel, x) -> np.ndarray:
    data = _data(x)
    _check_input(m, data)
    return softmax(forward(m.params(), data)[2], axis=1)


def evaluate(m: EncoderModel, x_test, y_test: LabelVector) -> EvalReport:
    """Top-1 / top-5 on a held-out set; top-5 is reported as 1.0 (flagged) when K < 5."""
    if len(y_test) == 0:
        raise ValidationError("empty test set")
    proba = predict_proba(m, x_test)
    k = proba.shape[1]
    top1 = topk_accuracy(proba, y_test, 1)
    defined = k >= 5
    top5 = topk_accuracy(proba, y_test, 5) if defined else 1.0
    pred = np.argsort(-proba, axis=1, kind="stable")[:, 0]
    per_class = np.full(k, np.nan)
    for c in range(k):
        sel = y_test.labels == c
        if sel.any():
            per_class[c] = float(np.mean(pred[sel] == c))
    return EvalReport(top1, top5, per_class, len(y_test), defined)


def with_config(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
