"""Hypersphere primitives: normalization, cosine logits, angles.

All arithmetic is float64. Cosines handed to downstream code are clamped
to [-1 + COS_CLAMP, 1 - COS_CLAMP] so arccos never sees +-1, where its
derivative is unbounded.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroNorm

ZERO_NORM_EPS = 1e-12
COS_CLAMP = 1e-7
UNIT_TOL = 1e-6


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass(frozen=True)
class EmbeddingBatch:
    """N x D matrix of row-wise unit-norm feature vectors."""

    data: np.ndarray

    def __post_init__(self):
        data = _as_f64(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 2:
            raise DimensionMismatch(f"embedding batch must be N>=1 x D>=2, got {data.shape}")
        norms = np.linalg.norm(data, axis=1)
        if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
            raise ZeroNorm("embedding rows must be unit norm within 1e-6")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassCenters:
    """D x n matrix of column-wise unit-norm class centers.

    ``frozen`` marks centers transferred from a teacher; optimizer steps
    must leave frozen centers bit-identical.
    """

    data: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        data = _as_f64(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 1:
            raise DimensionMismatch(f"class centers must be D>=2 x n>=1, got {data.shape}")
        norms = np.linalg.norm(data, axis=0)
        if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
            raise ZeroNorm("center columns must be unit norm within 1e-6")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_classes(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CosineLogits:
    """N x n matrix of clamped cos(theta_j) values."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f64(self.data))

    @property
    def shape(self):
        return self.data.shape


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises ZeroNorm for norms below 1e-12: a degenerate embedding that
    callers must not silence.
    """
    v = _as_f64(v)
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def normalize_rows(m) -> np.ndarray:
    m = _as_f64(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm("row with norm below 1e-12")
    return m / norms


def normalize_cols(m) -> np.ndarray:
    m = _as_f64(m)
    norms = np.linalg.norm(m, axis=0, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm("column with norm below 1e-12")
    return m / norms


def normalize_rows_backward(raw, grad_normalized) -> np.ndarray:
    """Backward of row-wise L2 normalization.

    For y = v/|v| the Jacobian is (I - y y^T)/|v|; the returned gradient
    is therefore orthogonal to each normalized row.
    """
    raw = _as_f64(raw)
    g = _as_f64(grad_normalized)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    y = raw / norms
    return (g - (g * y).sum(axis=1, keepdims=True) * y) / norms


def normalize_cols_backward(raw, grad_normalized) -> np.ndarray:
    raw = _as_f64(raw)
    g = _as_f64(grad_normalized)
    norms = np.linalg.norm(raw, axis=0, keepdims=True)
    y = raw / norms
    return (g - (g * y).sum(axis=0, keepdims=True) * y) / norms


def clamp_cosines(c) -> np.ndarray:
    return np.clip(_as_f64(c), -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)


def cosine_logits(x: EmbeddingBatch, w: ClassCenters) -> CosineLogits:
    """Pairwise cosines between embedding rows and center columns.

    Entry (i, j) is the dot product of row i with column j, clamped away
    from +-1.
    """
    if x.dim != w.dim:
        raise DimensionMismatch(f"embedding dim {x.dim} != center dim {w.dim}")
    return CosineLogits(clamp_cosines(x.data @ w.data))


def safe_arccos(c) -> np.ndarray:
    """arccos on cosines already clamped to [-1, 1]; result in [0, pi]."""
    return np.arccos(np.clip(_as_f64(c), -1.0, 1.0))
