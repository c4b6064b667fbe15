"""Support-side guidance signals: attention, prototype and prior mask."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .correspondence import MASK_THRESHOLD, ZERO_NORM, unit_columns
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GuidanceBundle:
    F_s23: Optional[Tensor]
    V_a: Optional[Tensor]
    A_s: Optional[Tensor]
    V_s: Optional[Tensor]
    M_pr: Optional[np.ndarray]


class AttentionNet(Module):
    """Two 1x1 convs with a 4x channel bottleneck and a ReLU in between."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.squeeze = Conv2d(channels, hidden, 1, rng, padding=0)
        self.expand = Conv2d(hidden, channels, 1, rng, padding=0)

    def __call__(self, v) -> Tensor:
        return self.expand(ops.relu(self.squeeze(v)))


def resized_support_mask(M_s, features) -> np.ndarray:
    """Bilinear-resize an image-resolution mask to the feature map grid.

    ``M_s`` is ``(H, W)`` for single maps or ``(N, H, W)`` for batched features;
    the result is ``(1, h, w)`` / ``(N, 1, h, w)`` in float64.
    """
    shape = features.shape
    m = np.asarray(M_s, dtype=np.float64)
    if len(shape) == 3 and m.ndim == 2:
        m = m[None]
    elif len(shape) == 4 and m.ndim == 3:
        m = m[:, None]
    elif m.ndim != len(shape):
        raise ShapeError(f"support mask {m.shape} does not fit features {tuple(shape)}")
    with no_grad():
        return ops.bilinear_resize(m, shape[-2], shape[-1]).data


def _safe_pool_mask(m: np.ndarray, what: str) -> np.ndarray:
    """Replace empty masks (per episode) with all-ones, i.e. global average pooling."""
    sums = m.sum(axis=(-2, -1), keepdims=True)
    empty = sums <= 0
    if np.any(empty):
        logger.warning("%s: empty support foreground, falling back to global average pooling", what)
        m = np.where(empty, 1.0, m)
    return m


def merge_support_features(F_2, F_3, reduce: Conv2d) -> Tensor:
    """``1x1 conv(concat(F_2, F_3))`` -- used for both support and query features."""
    F_2, F_3 = as_tensor(F_2), as_tensor(F_3)
    if F_2.shape[-2:] != F_3.shape[-2:]:
        raise ShapeError(f"merge_support_features: spatial sizes differ, {F_2.shape} vs {F_3.shape}")
    x = ops.concat_channels([F_2, F_3])
    if x.shape[-3] != reduce.in_channels:
        raise ShapeError(
            f"merge_support_features: {x.shape[-3]} concatenated channels, reduce conv expects {reduce.in_channels}"
        )
    return reduce(x)


def attention_vector(F_s23, M_s, attn: AttentionNet) -> Tensor:
    """``sigmoid(C_N(MAP(F_s23, mask)))``, shape ``(..., C_m, 1, 1)``."""
    F_s23 = as_tensor(F_s23)
    m = _safe_pool_mask(resized_support_mask(M_s, F_s23), "attention_vector")
    pooled = ops.masked_avg_pool(F_s23, m)
    return ops.sigmoid(attn(pooled))


def attention_map(F_s23, V_a) -> Tensor:
    F_s23, V_a = as_tensor(F_s23), as_tensor(V_a)
    if V_a.shape[-3] != F_s23.shape[-3] or V_a.shape[-2:] != (1, 1):
        raise ShapeError(f"attention_map: V_a {V_a.shape} does not match features {F_s23.shape}")
    return ops.hadamard(F_s23, V_a)


def prototype(F_s23, M_s) -> Tensor:
    """Masked average pooling of the merged support features, ``(..., C_m, 1, 1)``."""
    F_s23 = as_tensor(F_s23)
    m = _safe_pool_mask(resized_support_mask(M_s, F_s23), "prototype")
    return ops.masked_avg_pool(F_s23, m)


def prior_mask(F_q4: np.ndarray, F_s4: np.ndarray, M_s) -> np.ndarray:
    """Training-free prior: max cosine to any support foreground vector, min-max normalised.

    Single maps ``(C, H, W)`` give ``(1, H, W)``; batches ``(N, C, H, W)`` give
    ``(N, 1, H, W)``. Empty foreground or a constant score map gives zeros.
    """
    F_q4, F_s4 = np.asarray(F_q4), np.asarray(F_s4)
    if F_q4.shape != F_s4.shape:
        raise ShapeError(f"prior_mask: query {F_q4.shape} and support {F_s4.shape} differ")
    if F_q4.ndim == 4:
        masks = np.asarray(M_s)
        return np.stack([prior_mask(F_q4[i], F_s4[i], masks[i]) for i in range(F_q4.shape[0])])
    c, h, w = F_q4.shape
    m = resized_support_mask(M_s, F_s4).reshape(-1)
    fg = np.flatnonzero(m > MASK_THRESHOLD)
    if fg.size == 0:
        logger.warning("prior_mask: empty support foreground, prior is all zeros")
        return np.zeros((1, h, w), dtype=F_q4.dtype)
    q = unit_columns(F_q4.reshape(c, -1).astype(np.float64))
    s = unit_columns(F_s4.reshape(c, -1)[:, fg].astype(np.float64))
    score = (q.T @ s).max(axis=1)
    lo, hi = score.min(), score.max()
    if hi - lo < ZERO_NORM:
        out = np.zeros_like(score)
    else:
        out = (score - lo) / (hi - lo)
    return out.reshape(1, h, w).astype(F_q4.dtype)
