"""Multi-layer cosine-similarity correspondence between query and support.

Per backbone layer: mask the support map with the resized support mask, keep
only support positions whose channel-mean activation beats the map mean, then
score every query position by the mean ReLU'd cosine similarity to the kept
support vectors. The L resulting maps are concatenated and fused to ``alpha``
channels by a trainable 1x1 conv.

The similarity maps are computed in float64 and handed to the trainable part
as constants (the backbone is frozen, so nothing upstream needs gradient).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .backbone import FeaturePyramid
from .nn import Conv2d
from .tensor import ShapeError, Tensor, no_grad

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
MASK_THRESHOLD = 0.5


@dataclass
class SqueezedSupport:
    columns: np.ndarray  # (C, N)
    kept_indices: np.ndarray  # flat row-major spatial positions
    threshold: float
    fallback: bool = False

    @property
    def n(self) -> int:
        return self.columns.shape[1]


@dataclass
class CorrelationStack:
    layers: np.ndarray  # (L, H, W) or batched (N, L, H, W)
    fused: Optional[Tensor]
    alpha: int
    block_of_layer: tuple[int, ...] = ()

    @property
    def layer_count(self) -> int:
        return self.layers.shape[-3]


def resize_mask(mask, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a binary ``H x W`` (or ``[N,]1,H,W``) mask to ``size``; float64."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    with no_grad():
        return ops.bilinear_resize(m, int(size[0]), int(size[1])).data


def mask_support_features(F_s: np.ndarray, M_s) -> np.ndarray:
    """Zero out the support background: ``F_s * resize(M_s)`` broadcast over channels."""
    F_s = np.asarray(F_s)
    m = resize_mask(M_s, F_s.shape[-2:])
    return (F_s * m).astype(F_s.dtype, copy=False)


def squeeze_features(F_ms: np.ndarray, resized_mask: Optional[np.ndarray] = None) -> SqueezedSupport:
    """Keep positions whose channel-mean activation strictly exceeds the global mean.

    If nothing survives (e.g. a constant map), all foreground positions of
    ``resized_mask`` (> 0.5) are kept instead, or every position when no mask is
    given. An empty foreground yields ``N = 0``; the similarity map is then 0.
    """
    F = np.asarray(F_ms, dtype=np.float64)
    if F.ndim != 3:
        raise ShapeError(f"squeeze_features: expected (C,H,W), got {F.shape}")
    c, h, w = F.shape
    flat = F.reshape(c, h * w)
    threshold = float(flat.mean())
    stat = flat.mean(axis=0)
    kept = np.flatnonzero(stat > threshold)
    fallback = False
    if kept.size == 0:
        fallback = True
        if resized_mask is None:
            kept = np.arange(h * w)
        else:
            kept = np.flatnonzero(np.asarray(resized_mask).reshape(-1) > MASK_THRESHOLD)
    return SqueezedSupport(flat[:, kept], kept, threshold, fallback)


def unit_columns(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=0))
    inv = np.zeros_like(norms)
    ok = norms >= ZERO_NORM
    inv[ok] = 1.0 / norms[ok]
    return x * inv


def cosine_similarity_map(F_q: np.ndarray, sq: SqueezedSupport) -> np.ndarray:
    """``CS(q) = mean_s relu(cos(x_q, x_s))`` over the kept support columns; shape (1,H,W)."""
    F_q = np.asarray(F_q)
    if F_q.ndim != 3:
        raise ShapeError(f"cosine_similarity_map: expected query (C,H,W), got {F_q.shape}")
    c, h, w = F_q.shape
    if sq.columns.shape[0] != c:
        raise ShapeError(
            f"cosine_similarity_map: query has {c} channels, support columns have {sq.columns.shape[0]}"
        )
    if sq.n == 0:
        return np.zeros((1, h, w), dtype=F_q.dtype)
    q = unit_columns(F_q.reshape(c, h * w).astype(np.float64))
    s = unit_columns(sq.columns.astype(np.float64))
    cos = q.T @ s
    cs = np.maximum(cos, 0.0).mean(axis=1)
    # rounding can push a perfect match a hair above 1
    return np.clip(cs, 0.0, 1.0).reshape(1, h, w).astype(F_q.dtype)


def layer_similarity(F_q: np.ndarray, F_s: np.ndarray, resized_mask: np.ndarray) -> np.ndarray:
    F_ms = (np.asarray(F_s, dtype=np.float64) * resized_mask).astype(F_s.dtype, copy=False)
    sq = squeeze_features(F_ms, resized_mask)
    return cosine_similarity_map(F_q, sq)


def multilayer_correlation(pyr_q: FeaturePyramid, pyr_s: FeaturePyramid, M_s) -> list[np.ndarray]:
    """One ``(1, H_eps, W_eps)`` similarity map per pyramid layer, in pyramid order."""
    lq, ls = pyr_q.layers, pyr_s.layers
    if len(lq) != len(ls):
        raise ShapeError(f"multilayer_correlation: query has {len(lq)} layers, support has {len(ls)}")
    for i, (a, b) in enumerate(zip(lq, ls)):
        if a.shape != b.shape or a.ndim != 3:
            raise ShapeError(f"multilayer_correlation: layer {i} query {a.shape} vs support {b.shape}")
    m = resize_mask(M_s, lq[0].shape[-2:])
    if not np.any(m > 0):
        logger.info("multilayer_correlation: empty support foreground, similarity maps are zero")
    return [layer_similarity(a, b, m) for a, b in zip(lq, ls)]


def correlation_tensor(pyr_q: FeaturePyramid, pyr_s: FeaturePyramid, masks: np.ndarray) -> np.ndarray:
    """Batched form: ``(N, L, H_eps, W_eps)`` for pyramids of N images and masks ``(N, H, W)``."""
    masks = np.asarray(masks)
    n = masks.shape[0]
    out = []
    for i in range(n):
        maps = multilayer_correlation(pyr_q.select(i), pyr_s.select(i), masks[i])
        out.append(np.concatenate(maps, axis=0))
    return np.stack(out)


def fuse_correlation(maps, fusion: Conv2d) -> Tensor:
    """Concatenate the L maps on the channel axis and apply the 1x1 fusion conv."""
    if isinstance(maps, (list, tuple)):
        x = np.concatenate([np.asarray(m) for m in maps], axis=-3)
    else:
        x = np.asarray(maps)
    if x.shape[-3] != fusion.in_channels:
        raise ShapeError(f"fuse_correlation: got {x.shape[-3]} maps, fusion conv expects {fusion.in_channels}")
    return fusion(x.astype(fusion.weight.dtype, copy=False))


def block_energy(layers: np.ndarray, block_of_layer: Sequence[int]) -> list[np.ndarray]:
    """Mean similarity map per backbone block."""
    layers = np.asarray(layers)
    if layers.ndim == 4:  # list of (1, H, W) maps
        layers = layers[:, 0]
    blocks = sorted(set(block_of_layer))
    idx = np.asarray(block_of_layer)
    return [layers[idx == b].mean(axis=0) for b in blocks]
