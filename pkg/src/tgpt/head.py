"""Fusion head, classification loss, and the two baselines.

The two text features are additively averaged, concatenated with the
visual feature, and classified by a single linear projector.  The zero-shot
baseline scores cosine similarities against per-class text features at a
fixed temperature; the linear probe fits a logistic regression on frozen
visual features with the same optimizer used everywhere else.
"""

import numpy as np

from tgpt.layers import Linear
from tgpt.numerics import ops
from tgpt.numerics.adamw import AdamW
from tgpt.numerics.tensor import Tensor, no_grad

DEFAULT_TAU = 0.01


class Projector:
    """Single linear layer on [v ; fused], (2d -> N)."""

    def __init__(self, d: int, n_classes: int, init_rng):
        self.d = d
        self.n_classes = n_classes
        self.linear = Linear(2 * d, n_classes, init_rng)

    def __call__(self, z) -> Tensor:
        return self.linear(z)

    def params(self) -> dict:
        return {"projector.w": self.linear.w, "projector.b": self.linear.b}


def fuse_logits(v, t_con, t_ctg, projector: Projector) -> Tensor:
    """fused = (t_con + t_ctg) / 2; logits = [v ; fused] @ W + b."""
    if not (v.shape[-1] == t_con.shape[-1] == t_ctg.shape[-1] == projector.d):
        raise ops.ShapeError(
            f"feature widths differ: v {v.shape}, t_con {t_con.shape}, "
            f"t_ctg {t_ctg.shape}, projector d={projector.d}"
        )
    fused = ops.scale(ops.add(t_con, t_ctg), 0.5)
    return projector(ops.concat([v, fused], axis=-1))


def fuse_and_classify(v, t_con, t_ctg, projector: Projector) -> Tensor:
    return ops.softmax(fuse_logits(v, t_con, t_ctg, projector))


def classification_loss(logits, labels) -> Tensor:
    labels = np.asarray(labels)
    n = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range for {n} classes")
    return ops.cross_entropy_logits(logits, labels)


def zero_shot_predict(v: np.ndarray, class_features: np.ndarray,
                      tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax over cosine similarities / tau; inputs must be normalized."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    class_features = np.asarray(class_features, dtype=np.float64)
    if np.any(np.linalg.norm(v, axis=1) < 1e-8) or np.any(
        np.linalg.norm(class_features, axis=1) < 1e-8
    ):
        raise ValueError("zero-norm feature passed to zero-shot prediction")
    logits = v @ class_features.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def class_text_features(text_encoder, table, registry, vocab, max_len: int) -> np.ndarray:
    """Per-class text feature: encode every template for the class,
    average, re-normalize.  Deterministic."""
    feats = []
    with no_grad():
        for class_id in range(len(registry.class_names)):
            sentences = [
                t.replace("{class}", registry.class_names[class_id])
                for t in registry.templates_for(class_id)
            ]
            ids, mask = vocab.tokenize_batch(sentences, max_len)
            enc = text_encoder.encode_ids(table, ids, mask).data
            mean = enc.mean(axis=0)
            feats.append(mean / np.linalg.norm(mean))
    return np.stack(feats)


def linear_probe_fit(features: np.ndarray, labels: np.ndarray, n_classes: int,
                     l2_reg: float = 1e-4, lr: float = 0.05, iterations: int = 500,
                     init_rng=None):
    """Multinomial logistic regression on frozen features via AdamW.

    Full-batch, deterministic given the init generator.  Returns a
    function features -> predicted labels.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) < n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ValueError(f"no training samples for classes {missing}")
    d = features.shape[1]
    if init_rng is None:
        init_rng = np.random.default_rng(0)
    w = Tensor(init_rng.normal(0.0, 0.02, (n_classes, d)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, lr=lr, weight_decay=l2_reg)
    x = Tensor(features)
    for _ in range(iterations):
        logits = ops.add(ops.matmul(x, ops.transpose_last2(w)), b)
        loss = ops.cross_entropy_logits(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()

    def predict(feats: np.ndarray) -> np.ndarray:
        scores = np.asarray(feats) @ w.data.T + b.data
        return scores.argmax(axis=1)

    return predict
