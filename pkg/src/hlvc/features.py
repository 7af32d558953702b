"""Video-level feature construction and normalization.

Frame features are mean-pooled over time (at most MAX_FRAMES frames, one per
second), optionally concatenated with an audio vector, then normalized with
either per-dimension standardization ("znorm") or PCA whitening ("pca"),
optionally followed by L2 normalization. Fitting is single-pass so shards
never need to be fully materialized twice.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

MAX_FRAMES = 360
DEFAULT_EPSILON = 1e-6

# Norm floor below which a vector is considered degenerate and left unscaled.
L2_FLOOR = 1e-12

NORMALIZER_KINDS = ("znorm", "pca")


class ConvergenceError(RuntimeError):
    """An iterative numeric routine exhausted its budget before converging."""


def mean_pool(frames) -> np.ndarray:
    """Mean of frame features over time: (T, D) -> (D,) in float64.

    Frames beyond MAX_FRAMES are dropped before pooling.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"expected a non-empty (T, D) array, got shape {frames.shape}")
    return frames[:MAX_FRAMES].mean(axis=0, dtype=np.float64)


def concat_audio(rgb, audio) -> np.ndarray:
    """Concatenate a video-level visual vector with an audio vector."""
    rgb = np.asarray(rgb, dtype=np.float64)
    audio = np.asarray(audio, dtype=np.float64)
    if rgb.ndim != 1 or audio.ndim != 1:
        raise ValueError("concat_audio expects two 1-D vectors")
    return np.concatenate([rgb, audio])


def l2_normalize(x) -> tuple[np.ndarray, np.ndarray]:
    """Scale rows to unit Euclidean norm.

    Returns (normalized, degenerate) where degenerate marks rows with norm
    at or below L2_FLOOR; those rows are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    degenerate = norms[..., 0] <= L2_FLOOR
    safe = np.where(norms <= L2_FLOOR, 1.0, norms)
    return x / safe, degenerate


@dataclasses.dataclass
class NormalizerStats:
    """Fitted normalization parameters.

    For kind "znorm", ``scale`` is the (D,) per-dimension standard deviation
    clamped from below by epsilon, and the transform is (x - mean) / scale.
    For kind "pca", ``scale`` is the (D, D) whitening matrix whose rows are
    eigenvectors of the fitted covariance divided by sqrt(eigenvalue +
    epsilon), and the transform is scale @ (x - mean).
    """

    kind: str
    mean: np.ndarray
    scale: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    l2_after: bool = True

    def __post_init__(self) -> None:
        if self.kind not in NORMALIZER_KINDS:
            raise ValueError(f"unknown normalizer kind {self.kind!r}")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.mean.ndim != 1:
            raise ValueError("mean must be 1-D")
        d = self.mean.shape[0]
        want = (d,) if self.kind == "znorm" else (d, d)
        if self.scale.shape != want:
            raise ValueError(f"scale shape {self.scale.shape}, expected {want}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.scale).all()):
            raise ValueError("non-finite normalizer statistics")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _iter_rows(data):
    if isinstance(data, np.ndarray):
        if data.ndim != 2:
            raise ValueError(f"expected (N, D) data, got shape {data.shape}")
        yield from data
    else:
        for row in data:
            row = np.asarray(row)
            if row.ndim != 1:
                raise ValueError("expected an iterable of 1-D feature vectors")
            yield row


def fit_znorm(data, *, epsilon: float = DEFAULT_EPSILON, l2_after: bool = True) -> NormalizerStats:
    """Fit per-dimension standardization in one streaming pass (Welford).

    Variance is the population variance (divide by N). Needs at least two
    samples; dimensions with standard deviation below epsilon are clamped to
    epsilon so constant dimensions map to zero.
    """
    count = 0
    mean = None
    m2 = None
    for row in _iter_rows(data):
        row = row.astype(np.float64, copy=False)
        if mean is None:
            mean = np.zeros_like(row)
            m2 = np.zeros_like(row)
        count += 1
        delta = row - mean
        mean = mean + delta / count
        m2 = m2 + delta * (row - mean)
    if count < 2:
        raise ValueError(f"need at least 2 samples to fit a normalizer, got {count}")
    std = np.sqrt(m2 / count)
    scale = np.maximum(std, epsilon)
    return NormalizerStats("znorm", mean, scale, epsilon=epsilon, l2_after=l2_after)


def fit_pca_whitening(
    data,
    *,
    epsilon: float = DEFAULT_EPSILON,
    l2_after: bool = True,
    rel_tol: float = 1e-10,
    max_sweeps: int = 50,
) -> NormalizerStats:
    """Fit a PCA whitening transform in one streaming pass.

    The covariance is accumulated shifted by the first sample for stability,
    then diagonalized with jacobi_eigh. Whitening rows are eigenvectors
    scaled by 1/sqrt(eigenvalue + epsilon), eigenvalues clamped at zero and
    sorted in decreasing order.
    """
    count = 0
    shift = None
    s1 = None
    s2 = None
    buf: list[np.ndarray] = []

    def drain() -> None:
        nonlocal s1, s2
        if buf:
            block = np.stack(buf)
            s1 += block.sum(axis=0)
            s2 += block.T @ block
            buf.clear()

    for row in _iter_rows(data):
        row = row.astype(np.float64, copy=False)
        if shift is None:
            shift = row.copy()
            d = row.shape[0]
            s1 = np.zeros(d)
            s2 = np.zeros((d, d))
        count += 1
        buf.append(row - shift)
        if len(buf) >= 512:
            drain()
    drain()
    if count < 2:
        raise ValueError(f"need at least 2 samples to fit a normalizer, got {count}")
    mean_shifted = s1 / count
    cov = s2 / count - np.outer(mean_shifted, mean_shifted)
    cov = (cov + cov.T) / 2.0
    eigvals, eigvecs = jacobi_eigh(cov, rel_tol=rel_tol, max_sweeps=max_sweeps)
    inv_std = 1.0 / np.sqrt(np.maximum(eigvals, 0.0) + epsilon)
    transform = eigvecs.T * inv_std[:, None]
    return NormalizerStats(
        "pca", shift + mean_shifted, transform, epsilon=epsilon, l2_after=l2_after
    )


def apply_normalizer(stats: NormalizerStats, x) -> np.ndarray:
    """Apply fitted normalization to one vector (D,) or a batch (N, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match fitted dim {stats.dim}")
    centered = x - stats.mean
    if stats.kind == "znorm":
        out = centered / stats.scale
    else:
        out = centered @ stats.scale.T
    if stats.l2_after:
        out, _ = l2_normalize(out)
    return out


def jacobi_eigh(matrix, *, rel_tol: float = 1e-10, max_sweeps: int = 50):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate away each off-diagonal pair in turn until the off-diagonal
    Frobenius norm drops below rel_tol times the diagonal norm. Returns
    (eigenvalues, eigenvectors) in decreasing eigenvalue order, eigenvectors
    as columns with a deterministic sign (largest-magnitude entry positive).

    Raises ConvergenceError when the sweep budget runs out.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-8 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    v = np.eye(n)

    def converged() -> bool:
        # Norms taken on the elements themselves: differencing full and
        # diagonal sums would cancel catastrophically near convergence.
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        on = np.linalg.norm(np.diag(a))
        return off == 0.0 or off <= rel_tol * on

    for _ in range(max_sweeps):
        if converged():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                diff = a[q, q] - a[p, p]
                if abs(apq) < 5e-309 * abs(diff):
                    # Rotation angle would underflow; the element is already
                    # negligible at any realistic tolerance.
                    a[p, q] = a[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                theta = diff / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.hypot(t, 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                v[:, p] = c * vec_p - s * v[:, q]
                v[:, q] = s * vec_p + c * v[:, q]
    else:
        if not converged():
            raise ConvergenceError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps"
            )

    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = v[:, order]
    # Fix signs so results do not depend on rotation history.
    flips = np.sign(eigvecs[np.abs(eigvecs).argmax(axis=0), np.arange(n)])
    flips[flips == 0] = 1.0
    return eigvals, eigvecs * flips
