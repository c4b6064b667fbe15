"""Minimal module/parameter containers on top of :mod:`msanet.ops`."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Parameter container; attributes are walked in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(default_dtype())


class Conv2d(Module):
    """Convolution layer with weights ``(cout, cin, k, k)``.

    ``init`` picks the weight distribution: ``'lecun'`` (default) is N(0, 1/fan_in),
    ``'he'`` is N(0, 2/fan_in), ``'torch'`` is U(+-1/sqrt(fan_in)).
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        init: str = "lecun",
        trainable: bool = True,
    ):
        if cin < 1 or cout < 1:
            raise ValueError(f"Conv2d needs positive channel counts, got cin={cin}, cout={cout}")
        fan_in = cin * kernel * kernel
        dtype = default_dtype()
        if init == "torch":
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel))
            b = rng.uniform(-bound, bound, size=(cout,))
        elif init in ("he", "lecun"):
            gain = 2.0 if init == "he" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(cout, cin, kernel, kernel))
            b = rng.uniform(-0.05, 0.05, size=(cout,))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w.astype(dtype), name="weight", trainable=trainable)
        self.bias = Parameter(b.astype(dtype), name="bias", trainable=trainable)
        self.stride = stride
        self.dilation = dilation
        # "same" padding for odd kernels at stride 1
        self.padding = dilation * (kernel // 2) if padding is None else padding

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation
        )
