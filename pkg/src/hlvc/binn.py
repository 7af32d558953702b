"""Bidirectional label-space inference with exact analytic gradients.

Each concept layer t (coarse to fine, sizes n_0..n_{m-1}) gets its own
affine projection of the shared input feature vector into label space:

    x_t = proj_w[t] @ x + proj_b[t]                      (n_t,)

Two directional chains pass messages between adjacent layers:

    fwd[0] = fwd_h[0] @ x_0 + fwd_b[0]
    fwd[t] = fwd_v[t] @ fwd[t-1] + fwd_h[t] @ x_t + fwd_b[t]
    bwd[m-1] = bwd_h[m-1] @ x_{m-1} + bwd_b[m-1]
    bwd[t] = bwd_v[t] @ bwd[t+1] + bwd_h[t] @ x_t + bwd_b[t]

and are merged per label with elementwise gate vectors:

    a[t] = agg_fwd_u[t] * fwd[t] + agg_bwd_u[t] * bwd[t] + agg_b[t]
    p[t] = sigmoid(a[t])

The loss is the multi-label cross entropy summed over layers, labels, and
samples. Gradients are derived by hand and computed with batched matrix
products; ``backward`` never falls back to numeric differentiation.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy.special import expit


class NumericError(FloatingPointError):
    """A non-finite value appeared where the math requires finite numbers."""


def _layer_sizes(layers) -> tuple[int, ...]:
    sizes = tuple(int(n) for n in getattr(layers, "sizes", layers))
    if not sizes or any(n < 1 for n in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    return sizes


# (field, per-layer predicate) pairs defining the flat tensor naming scheme.
_TENSOR_FIELDS = (
    ("proj_w", lambda t, m: True),
    ("proj_b", lambda t, m: True),
    ("fwd_v", lambda t, m: t > 0),
    ("fwd_h", lambda t, m: True),
    ("fwd_b", lambda t, m: True),
    ("bwd_v", lambda t, m: t < m - 1),
    ("bwd_h", lambda t, m: True),
    ("bwd_b", lambda t, m: True),
    ("agg_fwd_u", lambda t, m: True),
    ("agg_bwd_u", lambda t, m: True),
    ("agg_b", lambda t, m: True),
)


def _tensor_items(obj, m: int):
    for field, present in _TENSOR_FIELDS:
        values = getattr(obj, field)
        for t in range(m):
            if present(t, m):
                yield f"{field}.{t}", values[t]


@dataclasses.dataclass
class BinnParams:
    """Model parameters as per-layer arrays; boundary chain matrices are None."""

    dim: int
    sizes: tuple[int, ...]
    proj_w: list
    proj_b: list
    fwd_v: list
    fwd_h: list
    fwd_b: list
    bwd_v: list
    bwd_h: list
    bwd_b: list
    agg_fwd_u: list
    agg_bwd_u: list
    agg_b: list

    @property
    def num_layers(self) -> int:
        return len(self.sizes)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name-to-array view sharing storage with the parameters."""
        return dict(_tensor_items(self, self.num_layers))

    @classmethod
    def from_tensors(cls, layers, dim: int, tensors) -> "BinnParams":
        """Rebuild parameters from a flat tensor dict, validating shapes."""
        sizes = _layer_sizes(layers)
        params = init_params(sizes, dim, seed=0)
        expected = params.tensors()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"tensor names mismatch: missing {missing}, extra {extra}")
        for name, arr in expected.items():
            got = np.asarray(tensors[name], dtype=np.float64)
            if got.shape != arr.shape:
                raise ValueError(
                    f"tensor {name}: shape {got.shape}, expected {arr.shape}"
                )
            arr[...] = got
        return params


@dataclasses.dataclass
class BinnActivations:
    """Everything ``forward`` computes, kept for the backward pass."""

    x_t: list
    fwd: list
    bwd: list
    a: list
    p: list


@dataclasses.dataclass
class BinnGradients:
    """Loss gradients, mirroring BinnParams plus the input-feature gradient."""

    dim: int
    sizes: tuple[int, ...]
    proj_w: list
    proj_b: list
    fwd_v: list
    fwd_h: list
    fwd_b: list
    bwd_v: list
    bwd_h: list
    bwd_b: list
    agg_fwd_u: list
    agg_bwd_u: list
    agg_b: list
    x: np.ndarray = None

    def tensors(self) -> dict[str, np.ndarray]:
        """Parameter gradients under the same names as BinnParams.tensors()."""
        return dict(_tensor_items(self, len(self.sizes)))


def init_params(layers, dim: int, seed: int, gate_init: float = 0.5) -> BinnParams:
    """Deterministic initialization for a given seed.

    Weight matrices draw from the uniform Glorot range
    +-sqrt(6 / (fan_in + fan_out)) in a fixed order (projections, then the
    forward chain, then the backward chain, layer by layer). Biases start at
    zero and both gate vectors at ``gate_init`` so the two directions begin
    evenly mixed.
    """
    sizes = _layer_sizes(layers)
    if dim < 1:
        raise ValueError(f"feature dim must be positive, got {dim}")
    m = len(sizes)
    rng = np.random.default_rng(seed)

    def glorot(rows: int, cols: int) -> np.ndarray:
        lim = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, size=(rows, cols))

    proj_w = [glorot(n, dim) for n in sizes]
    fwd_v: list = [None]
    fwd_h: list = []
    for t in range(m):
        if t > 0:
            fwd_v.append(glorot(sizes[t], sizes[t - 1]))
        fwd_h.append(glorot(sizes[t], sizes[t]))
    bwd_v: list = []
    bwd_h: list = []
    for t in range(m):
        if t < m - 1:
            bwd_v.append(glorot(sizes[t], sizes[t + 1]))
        else:
            bwd_v.append(None)
        bwd_h.append(glorot(sizes[t], sizes[t]))
    return BinnParams(
        dim=dim,
        sizes=sizes,
        proj_w=proj_w,
        proj_b=[np.zeros(n) for n in sizes],
        fwd_v=fwd_v,
        fwd_h=fwd_h,
        fwd_b=[np.zeros(n) for n in sizes],
        bwd_v=bwd_v,
        bwd_h=bwd_h,
        bwd_b=[np.zeros(n) for n in sizes],
        agg_fwd_u=[np.full(n, gate_init) for n in sizes],
        agg_bwd_u=[np.full(n, gate_init) for n in sizes],
        agg_b=[np.zeros(n) for n in sizes],
    )


def _as_batch(params: BinnParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"expected input of dim {params.dim}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input features")
    return x, squeeze


def project(params: BinnParams, x, t: int) -> np.ndarray:
    """Projection of the input into layer t's label space."""
    xb, squeeze = _as_batch(params, x)
    if not (0 <= t < params.num_layers):
        raise IndexError(f"layer index {t} out of range")
    out = xb @ params.proj_w[t].T + params.proj_b[t]
    return out[0] if squeeze else out


def forward(params: BinnParams, x) -> BinnActivations:
    """Run both chains; accepts one vector (D,) or a batch (B, D).

    Activations keep the same leading shape as the input. Raises
    NumericError as soon as any layer produces a non-finite value.
    """
    xb, squeeze = _as_batch(params, x)
    m = params.num_layers
    x_t = [xb @ params.proj_w[t].T + params.proj_b[t] for t in range(m)]
    fwd: list = [None] * m
    for t in range(m):
        pre = x_t[t] @ params.fwd_h[t].T + params.fwd_b[t]
        if t > 0:
            pre = pre + fwd[t - 1] @ params.fwd_v[t].T
        fwd[t] = pre
    bwd: list = [None] * m
    for t in range(m - 1, -1, -1):
        pre = x_t[t] @ params.bwd_h[t].T + params.bwd_b[t]
        if t < m - 1:
            pre = pre + bwd[t + 1] @ params.bwd_v[t].T
        bwd[t] = pre
    a = [
        params.agg_fwd_u[t] * fwd[t] + params.agg_bwd_u[t] * bwd[t] + params.agg_b[t]
        for t in range(m)
    ]
    for t in range(m):
        if not np.isfinite(a[t]).all() or not np.isfinite(fwd[t]).all() or not np.isfinite(bwd[t]).all():
            raise NumericError(f"non-finite activation in layer {t}")
    p = [expit(a[t]) for t in range(m)]
    if squeeze:
        return BinnActivations(
            x_t=[v[0] for v in x_t],
            fwd=[v[0] for v in fwd],
            bwd=[v[0] for v in bwd],
            a=[v[0] for v in a],
            p=[v[0] for v in p],
        )
    return BinnActivations(x_t=x_t, fwd=fwd, bwd=bwd, a=a, p=p)


def _as_multi_hot(positives_t, shape) -> np.ndarray:
    """Positive label indices (or an already multi-hot array) -> 0/1 array."""
    if isinstance(positives_t, np.ndarray) and positives_t.shape == tuple(shape):
        return positives_t.astype(np.float64, copy=False)
    if len(shape) != 1:
        raise ValueError("batched labels must be multi-hot arrays of the activation shape")
    z = np.zeros(shape, dtype=np.float64)
    idx = np.asarray(list(positives_t), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= shape[0]:
            raise IndexError(f"label index out of range for layer of size {shape[0]}")
        z[idx] = 1.0
    return z


def loss(acts: BinnActivations, positives) -> float:
    """Summed multi-label cross entropy over layers (and samples, if batched).

    ``positives`` is a per-layer sequence: index collections for single
    vectors, multi-hot arrays matching the activation shapes for batches.
    Computed from pre-activations in softplus form, so saturated sigmoids
    do not produce infinities.
    """
    if len(positives) != len(acts.a):
        raise ValueError(f"expected labels for {len(acts.a)} layers, got {len(positives)}")
    total = 0.0
    for a_t, pos_t in zip(acts.a, positives):
        z = _as_multi_hot(pos_t, a_t.shape)
        total += float((np.logaddexp(0.0, a_t) - z * a_t).sum())
    return total


def backward(params: BinnParams, x, positives) -> tuple[float, BinnGradients]:
    """Loss and its exact gradients for one sample (D,) or a batch (B, D).

    Batch gradients are sums over the batch, matching the summed loss.
    """
    xb, squeeze = _as_batch(params, x)
    m = params.num_layers
    if len(positives) != m:
        raise ValueError(f"expected labels for {m} layers, got {len(positives)}")
    acts = forward(params, xb)
    z = []
    for t in range(m):
        if squeeze:
            z.append(_as_multi_hot(positives[t], (params.sizes[t],))[None, :])
        else:
            z.append(_as_multi_hot(positives[t], acts.a[t].shape))
    loss_value = 0.0
    g_a = []
    for t in range(m):
        loss_value += float((np.logaddexp(0.0, acts.a[t]) - z[t] * acts.a[t]).sum())
        g_a.append(acts.p[t] - z[t])

    # Chain gradients: forward chain feeds later layers, so walk it backward;
    # the backward chain feeds earlier layers, so walk it forward.
    g_fwd: list = [None] * m
    for t in range(m - 1, -1, -1):
        g = g_a[t] * params.agg_fwd_u[t]
        if t < m - 1:
            g = g + g_fwd[t + 1] @ params.fwd_v[t + 1]
        g_fwd[t] = g
    g_bwd: list = [None] * m
    for t in range(m):
        g = g_a[t] * params.agg_bwd_u[t]
        if t > 0:
            g = g + g_bwd[t - 1] @ params.bwd_v[t - 1]
        g_bwd[t] = g

    grads = BinnGradients(
        dim=params.dim,
        sizes=params.sizes,
        proj_w=[None] * m,
        proj_b=[None] * m,
        fwd_v=[None] * m,
        fwd_h=[None] * m,
        fwd_b=[None] * m,
        bwd_v=[None] * m,
        bwd_h=[None] * m,
        bwd_b=[None] * m,
        agg_fwd_u=[None] * m,
        agg_bwd_u=[None] * m,
        agg_b=[None] * m,
    )
    g_x = np.zeros_like(xb)
    for t in range(m):
        grads.agg_fwd_u[t] = (g_a[t] * acts.fwd[t]).sum(axis=0)
        grads.agg_bwd_u[t] = (g_a[t] * acts.bwd[t]).sum(axis=0)
        grads.agg_b[t] = g_a[t].sum(axis=0)
        if t > 0:
            grads.fwd_v[t] = g_fwd[t].T @ acts.fwd[t - 1]
        grads.fwd_h[t] = g_fwd[t].T @ acts.x_t[t]
        grads.fwd_b[t] = g_fwd[t].sum(axis=0)
        if t < m - 1:
            grads.bwd_v[t] = g_bwd[t].T @ acts.bwd[t + 1]
        grads.bwd_h[t] = g_bwd[t].T @ acts.x_t[t]
        grads.bwd_b[t] = g_bwd[t].sum(axis=0)
        g_x_t = g_fwd[t] @ params.fwd_h[t] + g_bwd[t] @ params.bwd_h[t]
        grads.proj_w[t] = g_x_t.T @ xb
        grads.proj_b[t] = g_x_t.sum(axis=0)
        g_x += g_x_t @ params.proj_w[t]
    grads.x = g_x[0] if squeeze else g_x
    return loss_value, grads


def predict(params: BinnParams, x) -> list:
    """Per-layer label probabilities for one vector or a batch."""
    return forward(params, x).p
