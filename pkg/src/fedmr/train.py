"""Local training: ReLU MLP, mini-batch SGD with momentum, FedProx term, evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import (
    EmptyEvaluationError,
    EmptyShardError,
    MissingReferenceError,
    NumericInputError,
    ShapeMismatchError,
)
from .model import ArchitectureSpec, LayeredModel, check_same_arch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.prox_mu >= 0:
            raise ValueError("prox_mu must be >= 0")


class ForwardResult(NamedTuple):
    logits: np.ndarray
    loss: float


class EvalResult(NamedTuple):
    loss: float
    accuracy: float


def model_dims(model: LayeredModel) -> np.ndarray:
    """Layer widths of an MLP model laid out as (weight, bias) block pairs."""
    shapes = model.shapes
    if len(shapes) == 0 or len(shapes) % 2:
        raise ShapeMismatchError("MLP models need (weight, bias) block pairs")
    sizes = [shapes[0][0]]
    for w, b in zip(shapes[0::2], shapes[1::2]):
        if len(w) != 2 or b != (w[1],) or w[0] != sizes[-1]:
            raise ShapeMismatchError(f"inconsistent MLP blocks {w} / {b}")
        sizes.append(w[1])
    return np.asarray(sizes, dtype=np.int64)


def architecture_of(model: LayeredModel) -> ArchitectureSpec:
    return ArchitectureSpec.from_sizes(model_dims(model).tolist())


def _check_batch(dims: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != dims[0]:
        raise ShapeMismatchError(f"features have shape {X.shape}, model expects width {dims[0]}")
    if y.shape != (X.shape[0],):
        raise ShapeMismatchError("labels and features disagree in length")
    if not np.isfinite(X).all():
        raise NumericInputError("non-finite input features")
    if y.size and (y.min() < 0 or y.max() >= dims[-1]):
        raise ShapeMismatchError(f"labels must lie in [0, {dims[-1]})")
    return X, y


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float((logz - logits[np.arange(len(y)), y]).mean())


def forward(model: LayeredModel, batch) -> ForwardResult:
    """Logits and mean cross-entropy loss; ``batch`` has ``.X`` and ``.y``."""
    dims = model_dims(model)
    X, y = _check_batch(dims, batch.X, batch.y)
    logits = _kernels.mlp_logits(model.flatten(), dims, X)
    return ForwardResult(logits, softmax_xent(logits, y))


def loss_and_grad(model: LayeredModel, batch) -> tuple[float, LayeredModel]:
    dims = model_dims(model)
    X, y = _check_batch(dims, batch.X, batch.y)
    if len(y) == 0:
        raise EmptyShardError("empty batch")
    loss, grad = _kernels.mlp_loss_grad(model.flatten(), dims, X, y)
    return float(loss), model.unflatten(grad)


def backward(model: LayeredModel, batch) -> LayeredModel:
    """Gradient of the mean loss, with the model's own layout."""
    return loss_and_grad(model, batch)[1]


def local_iterations(n_samples: int, cfg: LocalTrainConfig) -> int:
    """SGD steps one client runs per round: ``epochs * ceil(n / batch)``."""
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def batch_schedule(n_samples: int, cfg: LocalTrainConfig) -> np.ndarray:
    """Row ``t`` holds the sample indices of step ``t``, padded with -1.

    Each epoch is a fresh permutation from ``default_rng(cfg.seed)`` cut into
    consecutive batches; the final batch of an epoch may be short. Indices are
    sorted within a batch so the step depends only on batch membership.
    """
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(n_samples / cfg.batch_size)
    out = np.full((cfg.epochs * n_batches, cfg.batch_size), -1, dtype=np.int64)
    t = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_samples)
        for s in range(0, n_samples, cfg.batch_size):
            chunk = np.sort(perm[s:s + cfg.batch_size])
            out[t, : len(chunk)] = chunk
            t += 1
    return out


def client_update(
    model: LayeredModel,
    shard,
    cfg: LocalTrainConfig,
    global_ref: LayeredModel | None = None,
) -> LayeredModel:
    """Train a copy of ``model`` on ``shard`` and return the new weights.

    Momentum buffers start at zero. With ``cfg.prox_mu > 0`` each step adds
    ``prox_mu * (w - global_ref)`` to the gradient.
    """
    dims = model_dims(model)
    if len(shard.y) == 0:
        raise EmptyShardError(f"client {getattr(shard, 'client_id', '?')} has no samples")
    X, y = _check_batch(dims, shard.X, shard.y)
    if cfg.prox_mu > 0:
        if global_ref is None:
            raise MissingReferenceError("prox_mu > 0 requires a global reference model")
        check_same_arch([model, global_ref])
        ref = global_ref.flatten()
    else:
        ref = np.zeros(0)
    batches = batch_schedule(len(y), cfg)
    log.debug(
        "client %s: %d samples, E=%d local iterations",
        getattr(shard, "client_id", "?"), len(y), batches.shape[0],
    )
    if cfg.lr == 0.0 or batches.shape[0] == 0:
        return model
    w = _kernels.sgd_train(
        model.flatten(), dims, X, y, batches,
        float(cfg.lr), float(cfg.momentum), float(cfg.prox_mu), ref,
    )
    return model.unflatten(w)


def evaluate(model: LayeredModel, dataset) -> EvalResult:
    """Mean loss and accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset.y) == 0:
        raise EmptyEvaluationError("cannot evaluate on an empty dataset")
    logits, loss = forward(model, dataset)
    pred = np.argmax(logits, axis=1)
    return EvalResult(loss, float(np.mean(pred == dataset.y)))


__all__ = [
    "ArchitectureSpec",
    "LocalTrainConfig",
    "ForwardResult",
    "EvalResult",
    "model_dims",
    "architecture_of",
    "softmax_xent",
    "forward",
    "backward",
    "loss_and_grad",
    "local_iterations",
    "batch_schedule",
    "client_update",
    "evaluate",
]
