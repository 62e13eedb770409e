"""Spatial mixture-of-experts layer with a tensor-routing gate.

Every grid point picks ``E`` of ``num_experts`` 3x3 convolution experts from a
learned, input-independent logit tensor ``D`` of shape [num_experts, H, W].
Selected experts' outputs are concatenated along channels in descending score
order, so the layer maps [N, C, H, W] to [N, E*F, H, W].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DTYPE, conv2d_forward, scatter_taps, shifted_views

NORMALIZATIONS = ("none", "softmax", "abs", "softmax_abs")


class Gate:
    """Routing logits plus a gradient accumulator; shareable between layers."""

    def __init__(self, logits: np.ndarray):
        self.logits = np.ascontiguousarray(logits, dtype=DTYPE)
        self.grad = np.zeros_like(self.logits)

    @property
    def shape(self):
        return self.logits.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.logits.shape:
            raise ValueError(f"gate gradient shape {g.shape} != {self.logits.shape}")
        self.grad += g


def uniform_bound(num_experts: int, select: int, expert_out: int) -> float:
    """Kaiming-uniform bound for fan-in E*F/|experts|: 3 * |experts| / (E * F)."""
    return 3.0 * num_experts / (select * expert_out)


def init_gate(
    num_experts: int,
    select: int,
    expert_out: int,
    height: int,
    width: int,
    mode: str = "uniform",
    rng: Optional[np.random.Generator] = None,
    region_map=None,
) -> np.ndarray:
    """Initial routing logits [num_experts, H, W].

    ``uniform`` and ``fixed_random`` draw from +-:func:`uniform_bound` (the
    latter is meant to be frozen by the caller). ``from_map`` puts +bound on
    the experts assigned to each cell's region type and -bound elsewhere;
    experts are dealt to types round-robin, so expert ``e`` serves type
    ``e % num_types``.
    """
    if min(num_experts, select, expert_out, height, width) < 1:
        raise ValueError("gate dimensions must be positive")
    if select > num_experts:
        raise ValueError(f"cannot select {select} of {num_experts} experts")
    b = uniform_bound(num_experts, select, expert_out)
    if mode in ("uniform", "fixed_random"):
        if rng is None:
            raise ValueError(f"{mode} gate init needs an rng")
        return rng.uniform(-b, b, size=(num_experts, height, width)).astype(DTYPE)
    if mode == "from_map":
        if region_map is None:
            raise ValueError("from_map gate init needs a region map")
        if region_map.shape != (height, width):
            raise ValueError("region map shape does not match the gate")
        nt = region_map.num_types
        if nt > num_experts:
            raise ValueError(f"{nt} region types need at least as many experts, have {num_experts}")
        owner = np.arange(num_experts) % nt
        hit = owner[:, None, None] == region_map.grid[None].astype(np.int64)
        return np.where(hit, b, -b).astype(DTYPE)
    raise ValueError(f"unknown gate init mode {mode!r}")


@dataclass
class RoutingRecord:
    selected: np.ndarray  # int64 [E, H, W], descending score, ties -> lower index
    scores: np.ndarray  # [E, H, W]
    logits: np.ndarray  # [num_experts, H, W] values the selection was made from

    @property
    def num_experts(self) -> int:
        return self.logits.shape[0]

    @property
    def select(self) -> int:
        return self.selected.shape[0]

    def dense_mask(self) -> np.ndarray:
        """Boolean [num_experts, H, W], true where an expert is selected."""
        m = np.zeros(self.logits.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=0)
        return m

    def dense_scores(self) -> np.ndarray:
        """Top-E sparsified gate: scores at selected experts, zero elsewhere."""
        g = np.zeros(self.logits.shape, dtype=self.scores.dtype)
        np.put_along_axis(g, self.selected, self.scores, axis=0)
        return g


def top_e_select(logits: np.ndarray, select: int) -> RoutingRecord:
    """The ``select`` largest logits per point, highest first, ties to lower index."""
    if logits.ndim != 3:
        raise ValueError(f"logits must be [experts, H, W], got {logits.shape}")
    if not 1 <= select <= logits.shape[0]:
        raise ValueError(f"cannot select {select} of {logits.shape[0]} experts")
    # stable sort of the negated logits keeps equal entries in index order
    order = np.argsort(-logits, axis=0, kind="stable")[:select]
    scores = np.take_along_axis(logits, order, axis=0)
    return RoutingRecord(order, scores, logits)


def normalize_scores(logits: np.ndarray, how: str) -> np.ndarray:
    if how == "none":
        return logits
    if how == "abs":
        return np.abs(logits)
    if how in ("softmax", "softmax_abs"):
        z = logits - logits.max(axis=0, keepdims=True)
        ez = np.exp(z)
        s = ez / ez.sum(axis=0, keepdims=True)
        return np.abs(s) if how == "softmax_abs" else s
    raise ValueError(f"unknown normalization {how!r}")


def normalize_backward(logits: np.ndarray, g: np.ndarray, how: str) -> np.ndarray:
    """Pull a gradient on normalized scores back to the raw logits."""
    if how == "none":
        return g
    if how == "abs":
        return g * np.sign(logits)
    s = normalize_scores(logits, "softmax")
    # softmax outputs are positive, so the extra abs is the identity here
    return s * (g - (s * g).sum(axis=0, keepdims=True))


@dataclass
class ForwardCache:
    x: np.ndarray
    routing: RoutingRecord
    kernels_sel: np.ndarray  # [E, F, C, taps, H, W]
    expert_out: np.ndarray  # unscaled selected outputs [N, E, F, H, W]
    macs: int


class SMoELayer:
    """Tensor-routed spatial mixture of 3x3 convolution experts."""

    def __init__(
        self,
        num_experts: int,
        select: int,
        expert_out: int,
        in_channels: int,
        height: int,
        width: int,
        *,
        weighted: bool = False,
        use_bias: bool = False,
        kernel_size: int = 3,
        rng: Optional[np.random.Generator] = None,
        gate_init: str = "uniform",
        region_map=None,
        normalization: str = "none",
    ):
        if not 1 <= select <= num_experts:
            raise ValueError(f"cannot select {select} of {num_experts} experts")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        if kernel_size % 2 != 1:
            raise ValueError("expert kernels must have odd size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_experts = num_experts
        self.select = select
        self.expert_out = expert_out
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.weighted = weighted
        self.normalization = normalization
        fan_in = in_channels * kernel_size * kernel_size
        kb = 1.0 / math.sqrt(fan_in)
        self.kernels = rng.uniform(
            -kb, kb, size=(num_experts, expert_out, in_channels, kernel_size, kernel_size)
        ).astype(DTYPE)
        self.bias = np.zeros((num_experts, expert_out), dtype=DTYPE) if use_bias else None
        self.gate = Gate(
            init_gate(num_experts, select, expert_out, height, width, gate_init, rng, region_map)
        )
        self.gate_frozen = gate_init == "fixed_random"
        self.experts_frozen = False

    @property
    def D(self) -> np.ndarray:
        return self.gate.logits

    @property
    def spatial(self) -> tuple[int, int]:
        return self.gate.shape[1:]

    def parameter_count(self) -> dict[str, int]:
        n = self.kernels.size + (self.bias.size if self.bias is not None else 0)
        return {"experts": n, "gate": self.D.size}

    def route(self, noise: Optional[np.ndarray] = None) -> RoutingRecord:
        logits = self.D if noise is None else self.D + noise
        scores = normalize_scores(logits, self.normalization)
        rec = top_e_select(scores, self.select)
        if self.normalization != "none":
            rec.logits = logits
        return rec

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ValueError(f"input must be [N, C, H, W], got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"layer expects {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[2:] != self.spatial:
            raise ValueError(f"input spatial dims {x.shape[2:]} != gate dims {self.spatial}")

    def forward(self, x: np.ndarray, routing: Optional[RoutingRecord] = None):
        """Sparse dispatch: each point evaluates only its selected experts.

        Returns ``(y, cache)``; ``cache.routing`` is shared by the whole batch.
        """
        self._check_input(x)
        routing = routing if routing is not None else self.route()
        n, c, h, w = x.shape
        e, f, k = self.select, self.expert_out, self.kernel_size
        flat = self.kernels.reshape(self.num_experts, f, c, k * k)
        # per-point gathered kernels [E, F, C, taps, H, W]
        ksel = np.ascontiguousarray(flat[routing.selected].transpose(0, 3, 4, 5, 1, 2))
        out = np.zeros((n, e, f, h, w), dtype=np.result_type(x, self.kernels))
        for ci in range(c):
            for t, xs in enumerate(shifted_views(x[:, ci], k)):
                out += ksel[None, :, :, ci, t] * xs[:, None, None]
        if self.bias is not None:
            out += self.bias[routing.selected].transpose(0, 3, 1, 2)[None]
        y = out * routing.scores[None, :, None] if self.weighted else out
        macs = n * e * f * c * k * k * h * w
        cache = ForwardCache(x, routing, ksel, out, macs)
        return y.reshape(n, e * f, h, w), cache

    def forward_dense(self, x: np.ndarray, routing: Optional[RoutingRecord] = None):
        """Reference path: run every expert everywhere, then gather. Returns ``(y, macs)``."""
        self._check_input(x)
        routing = routing if routing is not None else self.route()
        n, c, h, w = x.shape
        f, k = self.expert_out, self.kernel_size
        bank = self.kernels.reshape(self.num_experts * f, c, k, k)
        bias = self.bias.reshape(-1) if self.bias is not None else None
        full = conv2d_forward(x, bank, bias).reshape(n, self.num_experts, f, h, w)
        idx = np.broadcast_to(routing.selected[None, :, None], (n, self.select, f, h, w))
        out = np.take_along_axis(full, idx, axis=1)
        y = out * routing.scores[None, :, None] if self.weighted else out
        macs = n * self.num_experts * f * c * k * k * h * w
        return y.reshape(n, self.select * f, h, w), macs

    def backward(
        self,
        dy: np.ndarray,
        cache: ForwardCache,
        damping_factor: float = 1.0,
        incorrect_mask: Optional[np.ndarray] = None,
    ):
        """Sparse adjoint of :meth:`forward`.

        Where ``incorrect_mask`` ([E, H, W], or [N, E, H, W] per sample) is set, the error signal is scaled by
        ``damping_factor`` before it reaches the experts; both kernel gradients
        and ``dx`` see the damped signal. The end-to-end gate gradient (weighted
        layers only, zero otherwise) uses the undamped signal.

        Returns ``(dx, dkernels, dbias, dgate)``.
        """
        routing = cache.routing
        x = cache.x
        n, c, h, w = x.shape
        e, f, k = self.select, self.expert_out, self.kernel_size
        if dy.shape != (n, e * f, h, w):
            raise ValueError(f"dy shape {dy.shape} != {(n, e * f, h, w)}")
        dy = dy.reshape(n, e, f, h, w)
        dt = np.result_type(dy, x, self.kernels)

        dgate = np.zeros(self.D.shape, dtype=np.result_type(dy, self.D))
        if self.weighted:
            per_slot = np.einsum("nefhw,nefhw->ehw", cache.expert_out, dy)
            dscore = np.zeros_like(dgate)
            np.put_along_axis(dscore, routing.selected, per_slot, axis=0)
            dgate = normalize_backward(routing.logits, dscore, self.normalization)

        if incorrect_mask is not None:
            if incorrect_mask.shape not in ((e, h, w), (n, e, h, w)):
                raise ValueError(f"mask shape {incorrect_mask.shape} != {(e, h, w)} or {(n, e, h, w)}")
            scale = np.where(incorrect_mask, dt.type(damping_factor), dt.type(1.0))
            dy = dy * np.broadcast_to(scale, (n, e, h, w))[:, :, None]
        if self.weighted:
            dy = dy * routing.scores[None, :, None]

        # dksel[e, f, c, t, h, w] = sum_n dy[n, e, f] * x_shift[n, c, t]
        dksel = np.empty(cache.kernels_sel.shape, dtype=dt)
        dx = np.zeros(x.shape, dtype=dt)
        for ci in range(c):
            views = shifted_views(x[:, ci], k)
            parts = []
            for t, xs in enumerate(views):
                dksel[:, :, ci, t] = np.einsum("nefhw,nhw->efhw", dy, xs)
                parts.append(np.einsum("efhw,nefhw->nhw", cache.kernels_sel[:, :, ci, t], dy))
            dx[:, ci] = scatter_taps(parts, k)

        # scatter per-point kernel gradients back onto their experts
        sums = dksel.reshape(e, f * c * k * k, h * w)
        dkernels = np.zeros((self.num_experts, f * c * k * k), dtype=dt)
        sel = routing.selected.reshape(e, h * w)
        for s in range(e):
            onehot = np.zeros((self.num_experts, h * w), dtype=dt)
            onehot[sel[s], np.arange(h * w)] = 1.0
            dkernels += onehot @ sums[s].T
        dkernels = dkernels.reshape(self.kernels.shape)

        dbias = None
        if self.bias is not None:
            dbias = np.zeros(self.bias.shape, dtype=dt)
            per = dy.sum(axis=0)  # [E, F, H, W]
            for s in range(e):
                for fi in range(f):
                    dbias[:, fi] += np.bincount(
                        sel[s], weights=per[s, fi].ravel(), minlength=self.num_experts
                    )
        return dx, dkernels, dbias, dgate


def gate_share_handle(layers: list[SMoELayer]) -> Gate:
    """Bind ``layers`` to one gate tensor (the first layer's)."""
    if not layers:
        raise ValueError("need at least one layer to share a gate")
    ref = layers[0]
    for layer in layers[1:]:
        if (layer.num_experts,) + layer.spatial != (ref.num_experts,) + ref.spatial:
            raise ValueError("shared gates need equal expert count and spatial dims")
    for layer in layers:
        layer.gate = ref.gate
    return ref.gate


def perfect_experts(layer: SMoELayer, region_map) -> None:
    """Set expert ``e`` to the true diffusion stencil of region type ``e % num_types``."""
    if layer.expert_out != 1 or layer.in_channels != 1 or layer.kernel_size != 3:
        raise ValueError("perfect experts need F=1, C=1 and 3x3 kernels")
    nt = region_map.num_types
    if nt > layer.num_experts:
        raise ValueError(f"{nt} region types need at least as many experts")
    for ei in range(layer.num_experts):
        layer.kernels[ei, 0, 0] = region_map.stencil(ei % nt)
    if layer.bias is not None:
        layer.bias[...] = 0


def perfect_gate(layer: SMoELayer, region_map) -> None:
    h, w = layer.spatial
    layer.gate.logits[...] = init_gate(
        layer.num_experts, layer.select, layer.expert_out, h, w, "from_map", region_map=region_map
    )


def routing_map(layer: SMoELayer) -> np.ndarray:
    """Winning expert per point [H, W] (first slot when E > 1)."""
    return layer.route().selected[0]
