"""Episodic BCE training with SGD + momentum."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .backbone import Backbone, normalize_image
from .dataset import DatasetManifest
from .episodes import FoldSpec, sample_episode, stack_episodes
from .model import MetaLearner
from .nn import Conv2d
from .tensor import Parameter, Tape, Tensor, backward

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, lr: float, detail: str):
        super().__init__(f"training diverged at step {step} (lr={lr}): {detail}")
        self.step = step
        self.lr = lr


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-2
    batch_size: int = 8
    episodes: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    fold_index: int = 0
    fold_count: int = 4
    K: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.episodes < 0:
            raise ValueError(f"episodes must be >= 0, got {self.episodes}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")

    @property
    def steps(self) -> int:
        return math.ceil(self.episodes / self.batch_size)


class SGD:
    """``buf = momentum * buf + grad (+ wd * w)``; ``w -= lr * buf``."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        for p, buf in zip(self.params, self._buf):
            g = p.grad
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            buf *= p.dtype.type(self.momentum)
            buf += g
            p.data -= p.dtype.type(self.lr) * buf


def bce_loss(p_m: Tensor, m_q) -> Tensor:
    """Mean BCE of the foreground channel against binary query masks.

    ``p_m`` is ``(2,H,W)`` or ``(ep,2,H,W)``; with a batch every episode has the
    same pixel count, so the global mean equals the mean of per-episode losses.
    """
    m = np.asarray(m_q)
    fg = ops.select_channel(p_m, 1)
    return ops.binary_cross_entropy(fg, m.reshape(fg.shape))


@dataclass
class TrainResult:
    model: MetaLearner
    losses: list[float] = field(default_factory=list)
    episodes_seen: int = 0


def smoothed(losses: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def write_loss_log(path: Union[str, os.PathLike], losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    model: MetaLearner,
    log_path: Optional[Union[str, os.PathLike]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train the trainable head in place; the frozen backbone is never touched."""
    foldspec = FoldSpec(manifest.classes, cfg.fold_index, cfg.fold_count)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = SGD(model.trainable_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    result = TrainResult(model)
    remaining = cfg.episodes
    step = 0
    while remaining > 0:
        n = min(cfg.batch_size, remaining)
        batch = stack_episodes([sample_episode(manifest, foldspec, "train", cfg.K, rng) for _ in range(n)])
        opt.zero_grad()
        try:
            with Tape() as tape:
                out = model.forward(batch["query_images"], batch["support_images"], batch["support_masks"])
                loss = bce_loss(out.probs, batch["query_masks"])
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"loss is {value}")
            backward(loss, tape)
            for p in opt.params:
                if not np.all(np.isfinite(p.grad)):
                    raise FloatingPointError(f"non-finite gradient in {p.name}")
        except FloatingPointError as exc:
            raise TrainingDivergedError(step, cfg.lr, str(exc)) from exc
        opt.step()
        result.losses.append(value)
        result.episodes_seen += n
        if on_step is not None:
            on_step(step, value)
        if step % 25 == 0:
            logger.info("step %d loss %.5f", step, value)
        remaining -= n
        step += 1
    if log_path is not None:
        write_loss_log(log_path, result.losses)
    return result


def pretrain_backbone(
    backbone: Backbone,
    manifest: DatasetManifest,
    foldspec: FoldSpec,
    steps: int,
    lr: float = 1e-2,
    momentum: float = 0.9,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Optional base-class pretraining: class-agnostic foreground segmentation on train-fold
    samples through a throwaway 1x1 head, after which the backbone is frozen again."""
    if steps <= 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    head = Conv2d(backbone.cfg.blocks[-1][0], 2, 1, rng, padding=0)
    pool = [i for c in foldspec.train_classes for i in manifest.indices_of_class(c)]
    for p in backbone.parameters():
        p.unfreeze()
    opt = SGD(backbone.parameters() + head.parameters(), lr, momentum)
    losses = []
    h, w = backbone.cfg.input_size
    try:
        for step in range(steps):
            idx = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
            imgs = np.stack([manifest.image(pool[i]) for i in idx])
            masks = np.stack([manifest.mask(pool[i]) for i in idx])
            opt.zero_grad()
            with Tape() as tape:
                feats = backbone.forward(normalize_image(imgs, backbone.dtype))
                logits = head(feats[-1][-1])
                probs = ops.softmax_channel(ops.bilinear_resize(logits, h, w))
                loss = bce_loss(probs, masks)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(step, lr, "backbone pretraining loss is not finite")
            backward(loss, tape)
            opt.step()
            losses.append(loss.item())
    finally:
        backbone.freeze()
    return losses
