"""Task loss, routing-classification loss and the auxiliary routing losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .layer import RoutingRecord
from .tensor import DTYPE, quantile

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient ``2/N (pred - target)``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n * diff).astype(pred.dtype)


@dataclass
class RcLabels:
    labels: np.ndarray  # [num_experts, H, W] in [0, 1]
    incorrect_mask: np.ndarray  # bool [E, H, W] per selected slot, or [N, E, H, W]
    threshold: float = 0.0

    @property
    def n_incorrect(self) -> int:
        return int(self.incorrect_mask.sum())


def slot_error(
    error_signal: np.ndarray, select: int, signed: bool = False, per_sample: bool = False
) -> np.ndarray:
    """Error per (slot, point), averaged over the slot's F channels.

    Also averaged over the batch -> [E, H, W], unless ``per_sample`` -> [N, E, H, W].
    """
    n, ef, h, w = error_signal.shape
    if ef % select:
        raise ValueError(f"{ef} output channels do not split into {select} slots")
    e = error_signal.reshape(n, select, ef // select, h, w)
    e = e if signed else np.abs(e)
    if per_sample:
        return e.mean(axis=2, dtype=np.float64)
    return e.mean(axis=(0, 2), dtype=np.float64)


def build_rc_labels(
    error_signal: np.ndarray,
    routing: RoutingRecord,
    q: float,
    num_experts: Optional[int] = None,
    select: Optional[int] = None,
    signed: bool = False,
    per_sample: bool = False,
) -> RcLabels:
    """Label each (expert, point) for the routing-classification loss.

    A selected slot is incorrect when its error exceeds the nearest-rank
    ``q``-quantile of all slot errors (strictly). Correct selections get label
    1, incorrect ones 0, and every incorrect selection at a point adds
    ``1/(num_experts - E)`` to each unselected expert there, capped at 1.

    With ``per_sample`` the threshold is taken over every (sample, slot, point)
    error; labels are then the batch average of the per-sample labels and
    ``incorrect_mask`` is [N, E, H, W].
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in (0, 1), got {q}")
    num_experts = routing.num_experts if num_experts is None else num_experts
    select = routing.select if select is None else select
    if routing.num_experts != num_experts or routing.select != select:
        raise ValueError("routing record does not match the expert counts")
    mag = slot_error(error_signal, select, signed, per_sample)
    if mag.shape[-3:] != routing.selected.shape:
        raise ValueError(f"error signal slots {mag.shape} != routing {routing.selected.shape}")
    thr = quantile(mag, q)
    incorrect = mag > thr

    selected = routing.dense_mask()
    # fraction of the batch in which each selected slot was judged correct
    frac_incorrect = incorrect.mean(axis=0) if per_sample else incorrect.astype(np.float64)
    labels = np.zeros(selected.shape, dtype=np.float64)
    np.put_along_axis(labels, routing.selected, 1.0 - frac_incorrect, axis=0)
    unselected = num_experts - select
    if unselected:
        # k/(num_experts - E) exceeds 1 once k > num_experts - E; capped to stay a label
        share = np.minimum(frac_incorrect.sum(axis=0) / unselected, 1.0)
        labels += np.where(selected, 0.0, share[None])
    return RcLabels(labels.astype(DTYPE), incorrect, thr)


def rc_loss(gate_logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Binary cross-entropy of sigmoid(gate_logits) against soft labels.

    Returns the mean loss and its gradient ``(p - label) / count``.
    """
    lab = labels.labels if isinstance(labels, RcLabels) else np.asarray(labels)
    if lab.shape != gate_logits.shape:
        raise ValueError(f"labels {lab.shape} do not match logits {gate_logits.shape}")
    if np.any(lab < 0) or np.any(lab > 1):
        raise ValueError("labels must lie in [0, 1]")
    z = gate_logits.astype(np.float64)
    p = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(lab * np.log(p) + (1.0 - lab) * np.log1p(-p))
    grad = (p - lab) / z.size
    return float(loss.mean()), grad.astype(gate_logits.dtype)


@dataclass
class AuxConfig:
    use_importance: bool = False
    use_load: bool = False
    use_spatial_agreement: bool = False
    noise_std: float = 0.0
    aux_scale: float = 0.01

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.any_enabled and self.aux_scale <= 0:
            raise ValueError("aux_scale must be positive when an auxiliary loss is on")
        if self.use_load and self.noise_std == 0:
            raise ValueError("the load loss needs routing noise (noise_std > 0)")

    @property
    def any_enabled(self) -> bool:
        return self.use_importance or self.use_load or self.use_spatial_agreement


def _cv_squared(v: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Squared coefficient of variation (population std) and its gradient."""
    k = v.size
    mu = v.mean()
    if mu == 0:
        return 0.0, np.zeros_like(v), True
    var = np.mean((v - mu) ** 2)
    grad = 2.0 * (v - mu) / (k * mu**2) - 2.0 * var / (k * mu**3)
    return float(var / mu**2), grad, False


def importance_loss(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """CV^2 of per-expert importance, the summed gate values over batch and points.

    ``scores`` is the sparsified gate, [batch, num_experts, H, W] or
    [num_experts, H, W]. Returns the loss and its gradient w.r.t. ``scores``.
    A zero mean importance is degenerate: the loss is 0 and a warning is logged.
    """
    s = scores if scores.ndim == 4 else scores[None]
    if s.shape[1] < 2:
        raise ValueError("importance loss needs at least two experts")
    imp = s.sum(axis=(0, 2, 3), dtype=np.float64)
    loss, g, degenerate = _cv_squared(imp)
    if degenerate:
        log.warning("importance loss degenerate: mean importance is zero")
    grad = np.broadcast_to(g[None, :, None, None], s.shape).astype(scores.dtype)
    return loss, grad.reshape(scores.shape)


def load_probabilities(
    logits: np.ndarray, routing: RoutingRecord, noise_std: float
) -> np.ndarray:
    """P(logit_e + fresh noise >= threshold), threshold = E-th largest routed score."""
    if noise_std <= 0:
        raise ValueError("the load loss is only defined with routing noise (noise_std > 0)")
    thr = routing.scores[-1].astype(np.float64)
    return ndtr((logits.astype(np.float64) - thr[None]) / noise_std)


def load_loss(
    logits: np.ndarray, routing: RoutingRecord, noise_std: float, batch: int = 1
) -> tuple[float, np.ndarray]:
    """CV^2 of expected per-expert load; gradient w.r.t. ``logits`` (threshold held fixed)."""
    if logits.shape[0] < 2:
        raise ValueError("load loss needs at least two experts")
    thr = routing.scores[-1].astype(np.float64)
    z = (logits.astype(np.float64) - thr[None]) / noise_std
    p = load_probabilities(logits, routing, noise_std)
    load = batch * p.sum(axis=(1, 2))
    loss, g, degenerate = _cv_squared(load)
    if degenerate:
        log.warning("load loss degenerate: mean load is zero")
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    grad = batch * g[:, None, None] * pdf / noise_std
    return loss, grad.astype(logits.dtype)


def spatial_agreement_loss(per_sample_scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch std of each (expert, point) gate value, averaged over points, summed over experts."""
    s = per_sample_scores.astype(np.float64)
    if s.ndim != 4 or s.shape[0] < 2:
        raise ValueError("spatial agreement needs [batch >= 2, experts, H, W] scores")
    b, _, h, w = s.shape
    centered = s - s.mean(axis=0, keepdims=True)
    std = np.sqrt(np.mean(centered**2, axis=0))
    std[np.all(s == s[:1], axis=0)] = 0.0  # the mean of equal values can round off
    loss = std.sum() / (h * w)
    safe = np.where(std > 0, std, 1.0)
    grad = np.where(std > 0, centered / (b * safe * h * w), 0.0)
    return float(loss), grad.astype(per_sample_scores.dtype)


def combine_aux(losses: list[float], cfg: AuxConfig) -> float:
    """``aux_scale`` times the mean of the enabled auxiliary losses (0 if none)."""
    if not losses:
        return 0.0
    return cfg.aux_scale * float(np.mean(losses))


def routing_noise(
    logits: np.ndarray, noise_std: float, rng: np.random.Generator
) -> np.ndarray:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if noise_std == 0:
        return logits
    return (logits + rng.normal(0.0, noise_std, size=logits.shape)).astype(logits.dtype)
