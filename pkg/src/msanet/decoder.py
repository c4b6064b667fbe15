"""Decoder: guidance assembly, dilated ASPP, conv block and 2-way classifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, as_tensor

# fixed channel order of the decoder input; checkpoints depend on it
INPUT_ORDER = ("correlation", "attention", "prior", "prototype", "query")


@dataclass
class DecoderInput:
    tensor: Tensor
    slices: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]

    def part(self, name: str) -> np.ndarray:
        a, b = self.slices[name]
        return self.tensor.data[..., a:b, :, :]


def assemble_decoder_input(
    fused: Optional[Tensor],
    A_s: Optional[Tensor],
    M_pr,
    V_s: Optional[Tensor],
    F_q23: Tensor,
) -> DecoderInput:
    """Concatenate ``[fused CS, A_s, M_pr, tiled V_s, F_q23]``; ``None`` parts are skipped."""
    F_q23 = as_tensor(F_q23)
    h, w = F_q23.shape[-2:]
    parts: list[tuple[str, Tensor]] = []
    if fused is not None:
        parts.append(("correlation", as_tensor(fused)))
    if A_s is not None:
        parts.append(("attention", as_tensor(A_s)))
    if M_pr is not None:
        m = as_tensor(M_pr)
        parts.append(("prior", Tensor(m.data.astype(F_q23.dtype, copy=False))))
    if V_s is not None:
        parts.append(("prototype", ops.broadcast_spatial(V_s, h, w)))
    parts.append(("query", F_q23))
    for name, t in parts:
        if t.shape[-2:] != (h, w) or t.ndim != F_q23.ndim:
            raise ShapeError(f"assemble_decoder_input: {name} has shape {t.shape}, query features {F_q23.shape}")
    slices = {}
    start = 0
    for name, t in parts:
        slices[name] = (start, start + t.shape[-3])
        start += t.shape[-3]
    return DecoderInput(ops.concat_channels([t for _, t in parts]), slices)


class ASPP(Module):
    """A 1x1 branch plus one 3x3 branch per dilation rate, ReLU, concatenated."""

    def __init__(self, cin: int, cout: int, rates: Sequence[int], rng: np.random.Generator):
        n_branch = len(rates) + 1
        if cout % n_branch:
            raise ValueError(f"ASPP width {cout} not divisible by {n_branch} branches")
        width = cout // n_branch
        self.rates = tuple(int(r) for r in rates)
        self.pointwise = Conv2d(cin, width, 1, rng, padding=0)
        self.dilated = [Conv2d(cin, width, 3, rng, dilation=r) for r in self.rates]

    @property
    def branches(self) -> list[Conv2d]:
        return [self.pointwise, *self.dilated]


def aspp(x, params: ASPP) -> Tensor:
    x = x.tensor if isinstance(x, DecoderInput) else x
    return ops.concat_channels([ops.relu(branch(x)) for branch in params.branches])


class ConvBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)


def conv_block(x, params: ConvBlock) -> Tensor:
    return ops.relu(params.conv2(ops.relu(params.conv1(x))))


class Classifier(Module):
    def __init__(self, channels: int, rng: np.random.Generator, classes: int = 2):
        self.conv3 = Conv2d(channels, channels, 3, rng)
        self.conv1 = Conv2d(channels, classes, 1, rng, padding=0)


def classifier_logits(x, params: Classifier) -> Tensor:
    return params.conv1(ops.relu(params.conv3(x)))


def classify(x, params: Classifier, out_size: tuple[int, int]) -> Tensor:
    """Logits at feature resolution, bilinear upsample to ``out_size``, channel softmax.

    Channel 1 of the result is the foreground probability.
    """
    logits = classifier_logits(x, params)
    up = ops.bilinear_resize(logits, int(out_size[0]), int(out_size[1]))
    return ops.softmax_channel(up)
