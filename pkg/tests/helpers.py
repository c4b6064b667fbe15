"""Independent oracles and a finite-difference gradient checker shared by the tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from msanet.tensor import Parameter, Tape, Tensor, backward

FD_STEP = 1e-6  # small enough that ReLU kinks are rarely straddled in float64
FD_RTOL = 1e-4
FD_ATOL = 1e-7  # used when the analytic gradient is below 1e-6 in magnitude


@dataclass
class GradReport:
    checked: int
    worst_rel: float
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    rng: np.random.Generator,
    coords: int = 20,
    h: float = FD_STEP,
) -> GradReport:
    """Compare tape gradients with central differences on random coordinates of every parameter."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {id(p): p.grad.copy() for p in params}
    failures, checked, worst = [], 0, 0.0
    for p in params:
        assert p.data.flags.c_contiguous
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            a = float(analytic[id(p)].reshape(-1)[i])
            checked += 1
            if abs(a) < 1e-6:
                if abs(a - num) > FD_ATOL:
                    failures.append((p.name, int(i), a, num))
            else:
                rel = abs(a - num) / max(abs(a), abs(num))
                worst = max(worst, rel)
                if rel > FD_RTOL:
                    failures.append((p.name, int(i), a, num))
    return GradReport(checked, worst, failures)


# ----------------------------------------------------------------- conv oracle


def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1) -> np.ndarray:
    """Direct nested-loop cross-correlation of a single ``(Cin, H, W)`` input."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            y = i * stride + u * dilation - padding
                            xx = j * stride + v * dilation - padding
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += float(w[o, c, u, v]) * float(x[c, y, xx])
                out[o, i, j] = acc
    return out


# ------------------------------------------------------------- resize oracle


def bilinear_point(img: np.ndarray, sy: float, sx: float) -> float:
    h, w = img.shape
    sy = min(max(sy, 0.0), h - 1)
    sx = min(max(sx, 0.0), w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy)


def resize_loops(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of a 2-D map, one target pixel at a time."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = bilinear_point(img, (i + 0.5) * h / oh - 0.5, (j + 0.5) * w / ow - 0.5)
    return out


# -------------------------------------------------------- similarity oracles


def _cos(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return dot / (na * nb)


def layer_similarity_loops(F_q: np.ndarray, F_s: np.ndarray, mask_hw: np.ndarray) -> np.ndarray:
    """Mask, squeeze and score one layer with explicit loops over q, s and channels."""
    c, h, w = F_q.shape
    m = resize_loops(mask_hw.astype(np.float64), h, w)
    F_ms = [[[float(F_s[k, i, j]) * m[i, j] for j in range(w)] for i in range(h)] for k in range(c)]
    total = sum(F_ms[k][i][j] for k in range(c) for i in range(h) for j in range(w))
    thr = total / (c * h * w)
    kept = []
    for i in range(h):
        for j in range(w):
            if sum(F_ms[k][i][j] for k in range(c)) / c > thr:
                kept.append((i, j))
    if not kept:
        kept = [(i, j) for i in range(h) for j in range(w) if m[i, j] > 0.5]
    out = np.zeros((1, h, w))
    if not kept:
        return out
    cols = [[F_ms[k][i][j] for k in range(c)] for i, j in kept]
    for i in range(h):
        for j in range(w):
            q = [float(F_q[k, i, j]) for k in range(c)]
            out[0, i, j] = sum(max(_cos(q, s), 0.0) for s in cols) / len(cols)
    return out


def prior_loops(F_q: np.ndarray, F_s: np.ndarray, mask_hw: np.ndarray) -> np.ndarray:
    c, h, w = F_q.shape
    m = resize_loops(mask_hw.astype(np.float64), h, w)
    fg = [(i, j) for i in range(h) for j in range(w) if m[i, j] > 0.5]
    out = np.zeros((1, h, w))
    if not fg:
        return out
    for i in range(h):
        for j in range(w):
            q = [float(F_q[k, i, j]) for k in range(c)]
            out[0, i, j] = max(_cos(q, [float(F_s[k, a, b]) for k in range(c)]) for a, b in fg)
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        return np.zeros_like(out)
    return (out - lo) / (hi - lo)


def weighted_mean_loops(F: np.ndarray, mask: np.ndarray) -> np.ndarray:
    c, h, w = F.shape
    den = float(mask.sum())
    return np.array([[[sum(F[k, i, j] * mask[i, j] for i in range(h) for j in range(w)) / den]] for k in range(c)])


# ---------------------------------------------------------------- fixtures


def blob_mask(rng: np.random.Generator, size: int, lo: int = 3, hi: int = None) -> np.ndarray:
    """Random axis-aligned rectangle mask, never empty and never full."""
    hi = hi or size // 2
    hh, ww = rng.integers(lo, hi + 1, size=2)
    y, x = rng.integers(0, size - hh + 1), rng.integers(0, size - ww + 1)
    m = np.zeros((size, size), dtype=np.uint8)
    m[y : y + hh, x : x + ww] = 1
    return m
