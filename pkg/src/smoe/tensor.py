"""Dense rank-4 numeric kernels.

Tensors are plain ``numpy.ndarray`` objects laid out as ``[N, C, H, W]``.
Convolutions are cross-correlations with zero "same" padding, computed as an
explicit loop over kernel taps so that every output element is accumulated in
a fixed order (input channel outer, tap inner). The sparse expert dispatch in
:mod:`smoe.layer` relies on that order to be bit-identical with the dense path.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

DTYPE = np.float32


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_rank4(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ValueError(f"{name} must be rank 4 [N, C, H, W], got shape {a.shape}")


def _check_kernel(w: np.ndarray, channels: int) -> int:
    if w.ndim != 4:
        raise ValueError(f"kernel bank must be rank 4 [K, C, k, k], got shape {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 != 1:
        raise ValueError(f"kernel must be odd and square, got {w.shape[2:]}")
    if w.shape[1] != channels:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {channels}")
    return k


def tap_offsets(k: int = 3) -> list[tuple[int, int]]:
    """(di, dj) offsets of a k x k kernel in row-major tap order."""
    r = k // 2
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]


def shifted_views(x: np.ndarray, k: int = 3) -> list[np.ndarray]:
    """For every tap (di, dj), the array ``x[..., i+di, j+dj]`` with zeros outside.

    Works on any array whose last two axes are spatial.
    """
    r = k // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad)
    return [xp[..., r + di : r + di + h, r + dj : r + dj + w] for di, dj in tap_offsets(k)]


def scatter_taps(parts: Sequence[np.ndarray], k: int = 3) -> np.ndarray:
    """Adjoint of :func:`shifted_views`: sums each tap's array back onto the grid."""
    r = k // 2
    h, w = parts[0].shape[-2:]
    lead = parts[0].shape[:-2]
    out = np.zeros(lead + (h + 2 * r, w + 2 * r), dtype=parts[0].dtype)
    for (di, dj), p in zip(tap_offsets(k), parts):
        out[..., r + di : r + di + h, r + dj : r + dj + w] += p
    return out[..., r : r + h, r : r + w]


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None
) -> np.ndarray:
    """Same-size 2-D cross-correlation of ``x`` [N,C,H,W] with ``w`` [K,C,k,k]."""
    _check_rank4("x", x)
    k = _check_kernel(w, x.shape[1])
    n, c, h, wd = x.shape
    dtype = np.result_type(x, w)
    out = np.zeros((n, w.shape[0], h, wd), dtype=dtype)
    taps = w.reshape(w.shape[0], c, k * k)
    for ci in range(c):
        views = shifted_views(x[:, ci], k)
        for t, xs in enumerate(views):
            out += taps[:, ci, t][None, :, None, None] * xs[:, None]
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ValueError(f"bias must have shape ({w.shape[0]},), got {bias.shape}")
        out += bias[None, :, None, None]
    return out


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    _check_rank4("dy", dy)
    _check_rank4("x", x)
    k = _check_kernel(w, x.shape[1])
    if dy.shape != (x.shape[0], w.shape[0]) + x.shape[2:]:
        raise ValueError(f"dy shape {dy.shape} inconsistent with x {x.shape} and w {w.shape}")
    c = x.shape[1]
    taps = w.reshape(w.shape[0], c, k * k)
    dt = np.result_type(dy, x, w)
    dw = np.zeros(taps.shape, dtype=dt)
    dx = np.zeros(x.shape, dtype=dt)
    for ci in range(c):
        views = shifted_views(x[:, ci], k)
        for t, xs in enumerate(views):
            dw[:, ci, t] = np.einsum("nkhw,nhw->k", dy, xs)
        parts = [np.einsum("k,nkhw->nhw", taps[:, ci, t], dy) for t in range(k * k)]
        dx[:, ci] = scatter_taps(parts, k)
    dbias = dy.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), dbias


def quantile(values, q: float) -> float:
    """Nearest-rank quantile: ascending sort, element ``ceil(q*n) - 1`` (0 for q=0)."""
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    k = nearest_rank_index(v.size, q)
    return float(np.partition(v, k)[k])


def nearest_rank_index(n: int, q: float) -> int:
    # rounding guards products like 0.3 * 10 = 3.0000000000000004
    return max(math.ceil(round(q * n, 9)) - 1, 0)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a - b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def mul_scalar(a: np.ndarray, s: float) -> np.ndarray:
    return a * np.asarray(s, dtype=a.dtype)


def total(a: np.ndarray) -> float:
    return float(np.sum(a, dtype=np.float64))


def mean(a: np.ndarray) -> float:
    return float(np.mean(a, dtype=np.float64))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
