"""Differentiable kernels used by the trainable subgraph.

Every op accepts a single map ``(C, H, W)`` or a batch ``(N, C, H, W)``; the
channel axis is always ``-3``. Inputs may be :class:`Tensor` or raw arrays
(raw arrays are constants). Outputs are always tensors.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_output


class EmptyForegroundError(ValueError):
    """Masked pooling was asked to average over an all-zero mask."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _to4d(arr: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ShapeError(f"{what}: expected (C,H,W) or (N,C,H,W), got shape {arr.shape}")


# --------------------------------------------------------------------------- conv


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    h_end = stride * (ho - 1) + 1
    w_end = stride * (wo - 1) + 1
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            cols[:, :, i, j] = xp[:, :, hs : hs + h_end : stride, ws : ws + w_end : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols, xp_shape, kh, kw, stride, dilation, ho, wo):
    n, c = xp_shape[:2]
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    h_end = stride * (ho - 1) + 1
    w_end = stride * (wo - 1) + 1
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            dxp[:, :, hs : hs + h_end : stride, ws : ws + w_end : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x,
    w,
    b=None,
    stride: int = 1,
    padding: Union[int, tuple] = 0,
    dilation: int = 1,
) -> Tensor:
    """Dilated 2-D cross-correlation (no kernel flip) with zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    xd, squeeze = _to4d(x.data, "conv2d input x")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight w must be (Cout,Cin,kh,kw), got {w.shape}")
    cout, cin, kh, kw = w.shape
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input x has {xd.shape[1]} channels but weight w expects Cin={cin} "
            f"(x {x.shape}, w {w.shape})"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias b has shape {b.shape}, expected ({cout},) to match w {w.shape}")
    if dilation < 1 or stride < 1:
        raise ValueError(f"conv2d: dilation and stride must be >= 1 (got {dilation}, {stride})")
    ph, pw = _pair(padding)
    n, _, h, wd = xd.shape
    ho = conv_output_size(h, kh, stride, ph, dilation)
    wo = conv_output_size(wd, kw, stride, pw, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: dilated kernel {kh}x{kw} (dilation {dilation}) does not fit padded input "
            f"{h + 2 * ph}x{wd + 2 * pw}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    if squeeze:
        out = out[0]

    def _backward(g):
        g4 = g[None] if squeeze else g
        gp = g4.reshape(n, cout, ho * wo)
        dx = dw = db = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gp)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, dilation, ho, wo)
            dx = dxp[:, :, ph : ph + h, pw : pw + wd]
            dx = dx[0] if squeeze else dx
        if w.requires_grad:
            g2 = gp.transpose(1, 0, 2).reshape(cout, -1)
            c2 = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
            dw = (g2 @ c2.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            db = g4.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv2d", out, inputs, _backward)


# ------------------------------------------------------------------------ resize


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres (align_corners=False); negative source coords clamp to 0
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(int(n_in), int(n_out)).astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target size must be >= 1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize: need at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_output("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    my = interp_matrix(h, out_h, x.dtype)
    mx = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def _backward(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return make_output("bilinear_resize", out, (x,), _backward)


# ------------------------------------------------------------------- activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return make_output("relu", out, (x,), lambda g: (g * (x.data > 0),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def softmax_channel(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] < 2:
        raise ShapeError(f"softmax_channel: need >= 2 channels on axis -3, got shape {x.shape}")
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-3, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return make_output("softmax_channel", p, (x,), _backward)


# ------------------------------------------------------------- elementwise/shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def hadamard(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a 1-channel map or a ``C x 1 x 1`` vector."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    out = a.data * b.data

    def _backward(g):
        da = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        db = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return da, db

    return make_output("hadamard", out, (a, b), _backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", out, (a, b), _backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    f = x.dtype.type(factor)
    return make_output("scale", x.data * f, (x,), lambda g: (g * f,))


def mean_of(parts: Sequence) -> Tensor:
    """Elementwise mean of equally shaped tensors; a single part is returned as is."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("mean_of: need at least one tensor")
    if len(parts) == 1:
        return parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if p.shape != parts[0].shape:
            raise ShapeError(f"mean_of: part {i} has shape {p.shape}, part 0 has {parts[0].shape}")
    k = len(parts)
    total = parts[0].data.copy()
    for p in parts[1:]:
        total += p.data
    out = total / total.dtype.type(k)

    def _backward(g):
        gi = g / g.dtype.type(k)
        return tuple(gi for _ in parts)

    return make_output("mean_of", out, parts, _backward)


def broadcast_spatial(v, height: int, width: int) -> Tensor:
    """Tile a ``(..., C, 1, 1)`` vector to ``(..., C, H, W)``."""
    v = as_tensor(v)
    if v.ndim < 3 or v.shape[-2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial: expected (...,C,1,1), got {v.shape}")
    out = np.broadcast_to(v.data, v.shape[:-2] + (height, width)).copy()
    return make_output(
        "broadcast_spatial", out, (v,), lambda g: (g.sum(axis=(-2, -1), keepdims=True),)
    )


def concat_channels(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels: need at least one part")
    ref = parts[0]
    if ref.ndim not in (3, 4):
        raise ShapeError(f"concat_channels: part 0 must be 3-D or 4-D, got {ref.shape}")
    for i, p in enumerate(parts):
        if p.ndim != ref.ndim or p.shape[:-3] != ref.shape[:-3] or p.shape[-2:] != ref.shape[-2:]:
            raise ShapeError(
                f"concat_channels: part {i} has shape {p.shape}, incompatible with part 0 {ref.shape}"
            )
    if len(parts) == 1:
        return make_output("concat_channels", ref.data.copy(), (ref,), lambda g: (g,))
    out = np.concatenate([p.data for p in parts], axis=-3)
    bounds = np.cumsum([0] + [p.shape[-3] for p in parts])

    def _backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(parts)))

    return make_output("concat_channels", out, parts, _backward)


def select_channel(x, k: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[..., k : k + 1, :, :].copy()

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[..., k : k + 1, :, :] = g
        return (gx,)

    return make_output("select_channel", out, (x,), _backward)


# ------------------------------------------------------------------------ pooling


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1), keepdims=True)
    inv = x.dtype.type(1.0 / (h * w))
    return make_output(
        "global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),)
    )


def masked_avg_pool(x, mask) -> Tensor:
    """Per-channel ``sum(x * mask) / sum(mask)``; the mask is treated as a constant."""
    x = as_tensor(x)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(x.dtype, copy=False)
    if m.ndim != x.ndim or m.shape[-3] != 1 or m.shape[-2:] != x.shape[-2:] or m.shape[:-3] != x.shape[:-3]:
        raise ShapeError(f"masked_avg_pool: mask shape {m.shape} does not match features {x.shape}")
    denom = m.sum(axis=(-2, -1), keepdims=True)
    if np.any(denom <= 0):
        raise EmptyForegroundError("masked_avg_pool: mask has zero foreground")
    out = (x.data * m).sum(axis=(-2, -1), keepdims=True) / denom
    weights = m / denom

    def _backward(g):
        return (g * weights,)

    return make_output("masked_avg_pool", out, (x,), _backward)


def pool(x, kind: str, mask=None) -> Tensor:
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "masked_avg":
        if mask is None:
            raise ValueError("pool(kind='masked_avg') requires a mask")
        return masked_avg_pool(x, mask)
    raise ValueError(f"unknown pool kind {kind!r}")


# -------------------------------------------------------------------- reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_output("sum_all", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_output(
        "mean_all", out, (x,), lambda g: (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)
    )


def binary_cross_entropy(p, target, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``p`` against a {0,1} target of the same shape.

    Probabilities are clamped to ``[eps, 1 - eps]``; the clamp has zero gradient
    outside its range.
    """
    p = as_tensor(p)
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    y = y.astype(p.dtype, copy=False)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: target {y.shape} does not match prediction {p.shape}")
    lo, hi = p.dtype.type(eps), p.dtype.type(1.0 - eps)
    pc = np.clip(p.data, lo, hi)
    n = p.data.size
    per = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    out = np.asarray(per.mean(), dtype=p.dtype)
    inside = (p.data >= lo) & (p.data <= hi)

    def _backward(g):
        d = (-(y / pc) + (1 - y) / (1 - pc)) / p.dtype.type(n)
        return (g * d * inside,)

    return make_output("binary_cross_entropy", out, (p,), _backward)


def check_same_spatial(parts: Sequence[Tensor], what: str) -> None:
    ref: Optional[tuple] = None
    for i, p in enumerate(parts):
        if ref is None:
            ref = p.shape[-2:]
        elif p.shape[-2:] != ref:
            raise ShapeError(f"{what}: part {i} spatial size {p.shape[-2:]} != {ref}")
