"""Small frozen convolutional feature extractor.

A stride-``stem_stride`` stem followed by the correlation blocks (analogs of
ResNet blocks 2-4). Every block keeps the stem's output resolution, and every
intermediate conv+ReLU output ("bottleneck") of every block is recorded in the
pyramid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, no_grad

# per-channel image normalisation applied before the stem
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


class BackboneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (64, 64)
    stem_stride: int = 4
    stem_channels: int = 16
    blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple((int(c), int(n)) for c, n in self.blocks))
        h, w = self.input_size
        if h < 1 or w < 1:
            raise BackboneConfigError(f"input_size must be positive, got {self.input_size}")
        s = self.stem_stride
        if s < 1 or (s & (s - 1)) != 0:
            raise BackboneConfigError(f"stem_stride must be a power of two, got {s}")
        if h % s or w % s:
            raise BackboneConfigError(f"input_size {self.input_size} not divisible by stem_stride {s}")
        if self.stem_channels < 1:
            raise BackboneConfigError("stem_channels must be >= 1")
        if not self.blocks:
            raise BackboneConfigError("at least one block is required")
        for i, (c, n) in enumerate(self.blocks):
            if c < 1:
                raise BackboneConfigError(f"block {i}: zero channels")
            if n < 1:
                raise BackboneConfigError(f"block {i}: zero bottlenecks")
        if not 0 <= self.seed < 2**64:
            raise BackboneConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.stem_stride, self.input_size[1] // self.stem_stride

    @property
    def layer_count(self) -> int:
        return sum(n for _, n in self.blocks)

    @property
    def block_channels(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.blocks)


@dataclass
class FeaturePyramid:
    """Per-block lists of bottleneck maps, all at the same spatial size.

    Maps are ``(C_b, H, W)`` for a single image or ``(N, C_b, H, W)`` for a batch.
    """

    blocks: list[list[np.ndarray]]

    @property
    def layers(self) -> list[np.ndarray]:
        return [m for blk in self.blocks for m in blk]

    @property
    def layer_count(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def block_of_layer(self) -> list[int]:
        return [b for b, blk in enumerate(self.blocks) for _ in blk]

    @property
    def spatial_size(self) -> tuple[int, int]:
        return self.blocks[0][0].shape[-2:]

    def block_output(self, b: int) -> np.ndarray:
        """Last bottleneck of block ``b`` (0-based among correlation blocks)."""
        return self.blocks[b][-1]

    def select(self, index: int) -> "FeaturePyramid":
        """Single-image pyramid out of a batched one."""
        return FeaturePyramid([[m[index] for m in blk] for blk in self.blocks])


class _Block(Module):
    def __init__(self, layers: list[Conv2d]):
        self.layers = layers


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        n_stem = max(1, int(np.log2(cfg.stem_stride)))
        stride = 2 if cfg.stem_stride > 1 else 1
        stem = []
        cin = 3
        for _ in range(n_stem):
            stem.append(
                Conv2d(cin, cfg.stem_channels, 3, rng, stride=stride, padding=1, init="he", trainable=False)
            )
            cin = cfg.stem_channels
        self.stem = stem
        blocks = []
        for c, n in cfg.blocks:
            layers = []
            for _ in range(n):
                layers.append(Conv2d(cin, c, 3, rng, padding=1, init="he", trainable=False))
                cin = c
            blocks.append(_Block(layers))
        self.blocks = blocks

    def forward(self, x) -> list[list[Tensor]]:
        """Tensor-level pass (records on an active tape when parameters are unfrozen)."""
        h = x
        for conv in self.stem:
            h = ops.relu(conv(h))
        out = []
        for blk in self.blocks:
            maps = []
            for conv in blk.layers:
                h = ops.relu(conv(h))
                maps.append(h)
            out.append(maps)
        return out

    def extract_features(self, image) -> FeaturePyramid:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        if arr.ndim not in (3, 4) or arr.shape[-3] != 3:
            raise ShapeError(f"extract_features: expected (3,H,W) or (N,3,H,W) image, got {arr.shape}")
        if tuple(arr.shape[-2:]) != self.cfg.input_size:
            raise ShapeError(
                f"extract_features: image is {arr.shape[-2]}x{arr.shape[-1]}, "
                f"backbone expects {self.cfg.input_size[0]}x{self.cfg.input_size[1]}"
            )
        x = normalize_image(arr, self.dtype)
        with no_grad():
            maps = self.forward(x)
        return FeaturePyramid([[m.data for m in blk] for blk in maps])


def normalize_image(arr: np.ndarray, dtype) -> np.ndarray:
    return ((arr.astype(dtype) - IMAGE_MEAN) / IMAGE_STD).astype(dtype, copy=False)


def build_backbone(cfg: Optional[BackboneConfig] = None) -> Backbone:
    """Deterministic He-initialised frozen backbone."""
    bb = Backbone(cfg or BackboneConfig())
    bb.freeze()
    return bb


def mimic_config(kind: str, channels: int = 8, input_size: Sequence[int] = (32, 32)) -> BackboneConfig:
    """Tap-count mimics of the real backbones (layer counts only, no real weights)."""
    taps = {"vgg16": (3, 3, 1), "resnet50": (4, 6, 3), "resnet101": (4, 23, 3)}[kind]
    return BackboneConfig(
        input_size=tuple(input_size), stem_stride=4, stem_channels=channels,
        blocks=tuple((channels, n) for n in taps),
    )

