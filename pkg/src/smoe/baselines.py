"""Comparison models for the heat task: a small conv net and a locally connected layer."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import DTYPE, conv2d_backward, conv2d_forward, scatter_taps, shifted_views


class ConvNet:
    """Up to three 3x3 conv layers with ReLU in between; the last has one output channel."""

    kind = "conv"

    def __init__(
        self,
        in_channels: int = 1,
        layers: int = 1,
        width: int = 12,
        rng: Optional[np.random.Generator] = None,
    ):
        if not 1 <= layers <= 3:
            raise ValueError("ConvNet supports 1 to 3 layers")
        if not 1 <= width <= 12:
            raise ValueError("hidden width must be between 1 and 12")
        rng = rng if rng is not None else np.random.default_rng(0)
        chans = [in_channels] + [width] * (layers - 1) + [1]
        self.params: dict[str, np.ndarray] = {}
        for li, (ci, co) in enumerate(zip(chans[:-1], chans[1:])):
            b = 1.0 / math.sqrt(9 * ci)
            self.params[f"w{li}"] = rng.uniform(-b, b, size=(co, ci, 3, 3)).astype(DTYPE)
            self.params[f"b{li}"] = np.zeros(co, dtype=DTYPE)
        self.n_layers = layers

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for li in range(self.n_layers):
            h = conv2d_forward(h, self.params[f"w{li}"], self.params[f"b{li}"])
            if li < self.n_layers - 1:
                h = np.maximum(h, 0)
            acts.append(h)
        return h, acts

    def backward(self, dy: np.ndarray, acts) -> dict[str, np.ndarray]:
        grads = {}
        g = dy
        for li in reversed(range(self.n_layers)):
            if li < self.n_layers - 1:
                g = g * (acts[li + 1] > 0)
            g, grads[f"w{li}"], grads[f"b{li}"] = conv2d_backward(g, acts[li], self.params[f"w{li}"])
        return grads


class LCN:
    """Single locally connected 3x3 layer: an independent kernel and bias at every point."""

    kind = "lcn"

    def __init__(
        self,
        in_channels: int,
        height: int,
        width: int,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        b = 1.0 / math.sqrt(9 * in_channels)
        self.params = {
            "k": rng.uniform(-b, b, size=(height, width, in_channels, 3, 3)).astype(DTYPE),
            "b": np.zeros((height, width), dtype=DTYPE),
        }

    @property
    def spatial(self) -> tuple[int, int]:
        return self.params["b"].shape

    def parameter_count(self) -> int:
        h, w = self.spatial
        c = self.params["k"].shape[2]
        return h * w * (9 * c + 1)

    def _check(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[2:] != self.spatial or x.shape[1] != self.params["k"].shape[2]:
            raise ValueError(f"input {x.shape} does not fit LCN of {self.params['k'].shape}")

    def forward(self, x: np.ndarray):
        self._check(x)
        k = self.params["k"]
        h, w, c = k.shape[:3]
        taps = k.reshape(h, w, c, 9)
        out = np.zeros((x.shape[0], 1, h, w), dtype=np.result_type(x, k))
        for ci in range(c):
            for t, xs in enumerate(shifted_views(x[:, ci], 3)):
                out[:, 0] += taps[:, :, ci, t] * xs
        out += self.params["b"]
        return out, x

    def backward(self, dy: np.ndarray, x) -> dict[str, np.ndarray]:
        """Gradients for the parameters; the input gradient is under key ``"x"``."""
        k = self.params["k"]
        h, w, c = k.shape[:3]
        taps = k.reshape(h, w, c, 9)
        g = dy[:, 0]
        dk = np.empty_like(taps)
        dx = np.zeros(x.shape, dtype=np.result_type(dy, k))
        for ci in range(c):
            views = shifted_views(x[:, ci], 3)
            for t, xs in enumerate(views):
                dk[:, :, ci, t] = (g * xs).sum(axis=0)
            dx[:, ci] = scatter_taps([taps[:, :, ci, t] * g for t in range(9)], 3)
        return {"k": dk.reshape(k.shape), "b": g.sum(axis=0), "x": dx}

    def set_stencils(self, region_map) -> None:
        """Put each location's true diffusion stencil into its kernel."""
        for t in range(region_map.num_types):
            self.params["k"][region_map.grid == t, 0] = region_map.stencil(t)
        self.params["b"][...] = 0
