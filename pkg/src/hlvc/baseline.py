"""One-vs-all logistic regression over fixed video features.

Each class gets an independent affine score; there is no coupling between
classes, which makes this the flat reference point for the hierarchical
model. Weights live in a single (C, D+1) array with the bias in the last
column.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from .binn import NumericError


@dataclasses.dataclass
class LogRegParams:
    """Per-class affine weights; ``weights[c, -1]`` is the bias of class c."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ValueError(f"weights must be (C, D+1), got {self.weights.shape}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    def tensors(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights}

    @classmethod
    def from_tensors(cls, tensors) -> "LogRegParams":
        return cls(np.asarray(tensors["weights"], dtype=np.float64))


def init_params(n_classes: int, dim: int) -> LogRegParams:
    """All-zero weights, so every initial probability is exactly 0.5."""
    if n_classes < 1 or dim < 1:
        raise ValueError(f"need positive sizes, got {n_classes} classes, dim {dim}")
    return LogRegParams(np.zeros((n_classes, dim + 1)))


def _with_bias(params: LogRegParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"expected input of dim {params.dim}, got shape {x.shape}")
    ones = np.ones((x.shape[0], 1))
    return np.concatenate([x, ones], axis=1), squeeze


def predict(params: LogRegParams, x) -> np.ndarray:
    """Class probabilities for one vector (C,) or a batch (B, C)."""
    xb, squeeze = _with_bias(params, x)
    z = xb @ params.weights.T
    if not np.isfinite(z).all():
        raise NumericError("non-finite logistic scores")
    probs = expit(z)
    return probs[0] if squeeze else probs


def _as_multi_hot(positives, shape) -> np.ndarray:
    if isinstance(positives, np.ndarray) and positives.shape == tuple(shape):
        return positives.astype(np.float64, copy=False)
    if len(shape) != 1:
        raise ValueError("batched labels must be a multi-hot (B, C) array")
    z = np.zeros(shape, dtype=np.float64)
    idx = np.asarray(list(positives), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= shape[0]:
            raise IndexError(f"label index out of range for {shape[0]} classes")
        z[idx] = 1.0
    return z


def loss_grad(
    params: LogRegParams, x, positives, l2_penalty: float = 0.0
) -> tuple[float, np.ndarray]:
    """Summed cross entropy and its exact gradient in one pass.

    ``positives`` is an index collection for a single vector or a multi-hot
    (B, C) array for a batch; batch loss and gradient are sums over samples.
    The optional L2 penalty (l2_penalty / 2 * sum of squared weights) leaves
    the bias column unpenalized.
    """
    xb, squeeze = _with_bias(params, x)
    if squeeze:
        y = _as_multi_hot(positives, (params.num_classes,))[None, :]
    else:
        y = _as_multi_hot(positives, (xb.shape[0], params.num_classes))
    z = xb @ params.weights.T
    if not np.isfinite(z).all():
        raise NumericError("non-finite logistic scores")
    value = float((np.logaddexp(0.0, z) - y * z).sum())
    grad = (expit(z) - y).T @ xb
    if l2_penalty:
        value += 0.5 * l2_penalty * float((params.weights[:, :-1] ** 2).sum())
        grad[:, :-1] += l2_penalty * params.weights[:, :-1]
    return value, grad
