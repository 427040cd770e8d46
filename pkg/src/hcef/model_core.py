"""Models, losses and the plain SGD step shared by every device.

Model parameters are flat float64 numpy vectors. Two loss families are
supported: multinomial logistic regression and a tanh two-layer MLP, both
trained with softmax cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a (b, feature_dim) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per feature row")

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class LossModel:
    """Shape description of a model plus its smoothness proxy."""

    kind: str
    n_features: int
    n_classes: int
    hidden: int = 0
    L_estimate: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")
        if self.L_estimate < 0:
            raise ValueError("L_estimate must be >= 0")

    @property
    def dim(self) -> int:
        D, C, H = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return C * D + C
        return H * D + H + C * H + C


def logistic_smoothness(features: np.ndarray) -> float:
    """Upper bound on the smoothness constant of softmax regression.

    The Hessian of cross-entropy w.r.t. the logits is bounded by I/2, so
    L <= 0.5 * lambda_max(X~^T X~ / n) with X~ the bias-augmented features.
    """
    n = features.shape[0]
    aug = np.hstack([features, np.ones((n, 1))])
    return 0.5 * float(np.linalg.eigvalsh(aug.T @ aug / n)[-1])


def init_model(lm: LossModel, rng: np.random.Generator | None = None, scale: float = 0.1) -> np.ndarray:
    """Zeros for logistic regression; small Gaussian weights for the MLP."""
    if lm.kind == "logistic":
        return np.zeros(lm.dim)
    if rng is None:
        raise ValueError("mlp initialisation needs an rng")
    return scale * rng.standard_normal(lm.dim)


def _check(model: np.ndarray, batch: Batch, lm: LossModel):
    if model.ndim != 1 or model.shape[0] != lm.dim:
        raise ValueError(f"model has length {model.shape}, expected ({lm.dim},)")
    if batch.features.shape[1] != lm.n_features:
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, model expects {lm.n_features}"
        )
    if len(batch) == 0:
        raise ValueError("empty batch")


def _unpack(model: np.ndarray, lm: LossModel):
    D, C, H = lm.n_features, lm.n_classes, lm.hidden
    if lm.kind == "logistic":
        return model[: C * D].reshape(C, D), model[C * D :]
    o = 0
    W1 = model[o : o + H * D].reshape(H, D)
    o += H * D
    b1 = model[o : o + H]
    o += H
    W2 = model[o : o + C * H].reshape(C, H)
    o += C * H
    return W1, b1, W2, model[o : o + C]


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(labels)), labels]
    probs = np.exp(shifted - lse[:, None])
    return losses, probs


def logits(model: np.ndarray, features: np.ndarray, lm: LossModel) -> np.ndarray:
    if lm.kind == "logistic":
        W, b = _unpack(model, lm)
        return features @ W.T + b
    W1, b1, W2, b2 = _unpack(model, lm)
    return np.tanh(features @ W1.T + b1) @ W2.T + b2


def loss(model: np.ndarray, batch: Batch, lm: LossModel) -> float:
    """Mean cross-entropy of ``model`` over ``batch``."""
    _check(model, batch, lm)
    losses, _ = _softmax_xent(logits(model, batch.features, lm), batch.labels)
    return float(losses.mean())


def accuracy(model: np.ndarray, batch: Batch, lm: LossModel) -> float:
    _check(model, batch, lm)
    pred = logits(model, batch.features, lm).argmax(axis=1)
    return float((pred == batch.labels).mean())


def stochastic_gradient(model: np.ndarray, batch: Batch, lm: LossModel) -> np.ndarray:
    """Gradient of the mean batch loss; unbiased for uniformly drawn batches."""
    _check(model, batch, lm)
    X, y = batch.features, batch.labels
    b = len(batch)
    if lm.kind == "logistic":
        _, probs = _softmax_xent(logits(model, X, lm), y)
        err = probs
        err[np.arange(b), y] -= 1.0
        err /= b
        return np.concatenate([(err.T @ X).ravel(), err.sum(axis=0)])

    W1, b1, W2, b2 = _unpack(model, lm)
    h = np.tanh(X @ W1.T + b1)
    _, probs = _softmax_xent(h @ W2.T + b2, y)
    err = probs
    err[np.arange(b), y] -= 1.0
    err /= b
    gW2 = err.T @ h
    gb2 = err.sum(axis=0)
    dh = (err @ W2) * (1.0 - h * h)
    gW1 = dh.T @ X
    gb1 = dh.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def sgd_step(model: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    if model.shape != grad.shape:
        raise ValueError(f"shape mismatch {model.shape} vs {grad.shape}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return model - eta * grad
