"""Adam, the %-within-1% metric, the SMoE training step and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .baselines import LCN, ConvNet
from .layer import SMoELayer, perfect_experts, perfect_gate
from .losses import (
    AuxConfig,
    build_rc_labels,
    combine_aux,
    importance_loss,
    load_loss,
    mse_loss,
    rc_loss,
    spatial_agreement_loss,
)
from .tensor import DTYPE, make_rng

log = logging.getLogger(__name__)

MAX_LR_DECAYS = 3
IMPROVEMENT_TOL = 1e-6


class NumericalError(RuntimeError):
    """A NaN or Inf showed up in parameters, predictions or losses."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    plateau_patience: int = 15
    lr_decay: float = 10.0
    early_stop_patience: int = 30
    max_epochs: int = 50
    q: float = 0.7
    damping_factor: float = 0.1
    rc_enabled: bool = True
    damping_enabled: bool = True
    rc_signed: bool = False
    rc_per_sample: bool = False
    weighted: Optional[bool] = None  # None: weighted exactly when the RC loss is off
    normalization: str = "none"
    num_experts: int = 3
    select: int = 1
    expert_out: int = 1
    freeze_gate: bool = False
    freeze_experts: bool = False
    init_gate: str = "uniform"  # uniform | perfect | fixed_random
    init_experts: str = "random"  # random | perfect
    conv_layers: int = 1
    conv_width: int = 12
    seed: int = 0
    aux: AuxConfig = field(default_factory=AuxConfig)

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        e = []
        if self.batch_size < 1:
            e.append("batch_size: must be positive")
        if self.lr <= 0:
            e.append("lr: must be positive")
        if self.plateau_patience < 1:
            e.append("plateau_patience: must be positive")
        if self.early_stop_patience < 1:
            e.append("early_stop_patience: must be positive")
        if self.max_epochs < 1:
            e.append("max_epochs: must be positive")
        if self.lr_decay <= 1:
            e.append("lr_decay: must exceed 1")
        if not 0 < self.q < 1:
            e.append("q: must lie in (0, 1)")
        if not 0 <= self.damping_factor <= 1:
            e.append("damping_factor: must lie in [0, 1]")
        if not 1 <= self.select <= self.num_experts:
            e.append("select: must be between 1 and num_experts")
        if self.expert_out < 1:
            e.append("expert_out: must be positive")
        if self.init_gate not in ("uniform", "perfect", "fixed_random"):
            e.append("init_gate: must be uniform, perfect or fixed_random")
        if self.init_experts not in ("random", "perfect"):
            e.append("init_experts: must be random or perfect")
        if self.normalization not in ("none", "softmax", "abs", "softmax_abs"):
            e.append("normalization: must be none, softmax, abs or softmax_abs")
        if not 1 <= self.conv_layers <= 3:
            e.append("conv_layers: must be 1 to 3")
        if not 1 <= self.conv_width <= 12:
            e.append("conv_width: must be 1 to 12")
        return e

    @property
    def is_weighted(self) -> bool:
        return (not self.rc_enabled) if self.weighted is None else self.weighted


class Adam:
    """Bias-corrected Adam over named parameters; state is created lazily per name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, frozen=()) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if name in frozen or name not in grads:
                continue
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict, grads: dict, state: Adam, lr: float, frozen=()) -> None:
    state.step(params, grads, lr, frozen)


def pct_within_1pct(pred: np.ndarray, truth: np.ndarray) -> float:
    """Percentage of locations within 1% relative error (absolute 1e-6 where truth ~ 0)."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred.astype(np.float64)
    t = truth.astype(np.float64)
    err = np.abs(p - t)
    at = np.abs(t)
    ok = np.where(at >= 1e-12, err <= 0.01 * at, err <= 1e-6)
    return 100.0 * float(ok.mean())


class SMoEModel:
    """A single SMoE layer; when it has several output channels they are summed."""

    kind = "smoe"

    def __init__(self, layer: SMoELayer):
        self.layer = layer

    @property
    def params(self) -> dict[str, np.ndarray]:
        p = {"kernels": self.layer.kernels, "D": self.layer.D}
        if self.layer.bias is not None:
            p["bias"] = self.layer.bias
        return p

    def frozen(self) -> set:
        out = set()
        if self.layer.experts_frozen:
            out |= {"kernels", "bias"}
        if self.layer.gate_frozen:
            out.add("D")
        return out

    def parameter_count(self) -> int:
        return sum(self.layer.parameter_count().values())

    def forward(self, x: np.ndarray, routing=None):
        y, cache = self.layer.forward(x, routing)
        pred = y.sum(axis=1, keepdims=True) if y.shape[1] > 1 else y
        return pred, cache


class PlainModel:
    """Adapter giving baselines the frozen()/params interface the trainer uses."""

    def __init__(self, net):
        self.net = net
        self.kind = net.kind

    @property
    def params(self):
        return self.net.params

    def frozen(self) -> set:
        return set()

    def parameter_count(self) -> int:
        return self.net.parameter_count()

    def forward(self, x, routing=None):
        return self.net.forward(x)


def build_model(kind: str, cfg: TrainConfig, region_map, in_channels: int = 1):
    """Fresh model for ``kind`` in {smoe, conv, lcn}, initialised from ``cfg.seed``.

    ``region_map`` may be a bare ``(H, W)`` shape unless a perfect init is asked for.
    """
    rng = make_rng(cfg.seed)
    h, w = region_map if isinstance(region_map, tuple) else region_map.shape
    if kind == "smoe":
        layer = SMoELayer(
            cfg.num_experts,
            cfg.select,
            cfg.expert_out,
            in_channels,
            h,
            w,
            weighted=cfg.is_weighted,
            rng=rng,
            gate_init="fixed_random" if cfg.init_gate == "fixed_random" else "uniform",
            normalization=cfg.normalization,
        )
        model = SMoEModel(layer)
        if cfg.init_gate == "perfect" or cfg.init_experts == "perfect":
            if isinstance(region_map, tuple):
                raise ValueError("a perfect init needs the region map, not just its shape")
            perfect_init(model, region_map, gate=cfg.init_gate == "perfect",
                         experts=cfg.init_experts == "perfect")
        layer.gate_frozen = cfg.freeze_gate or cfg.init_gate == "fixed_random"
        layer.experts_frozen = cfg.freeze_experts
        return model
    if kind == "conv":
        return PlainModel(ConvNet(in_channels, cfg.conv_layers, cfg.conv_width, rng))
    if kind == "lcn":
        return PlainModel(LCN(in_channels, h, w, rng))
    raise ValueError(f"unknown model kind {kind!r}")


def perfect_init(model: SMoEModel, region_map, gate: bool = True, experts: bool = True):
    """Set experts to the true stencils and/or the gate to the true region map."""
    layer = model.layer
    if region_map.num_types > layer.num_experts:
        raise ValueError(
            f"{region_map.num_types} region types need at least as many experts, "
            f"have {layer.num_experts}"
        )
    if experts:
        perfect_experts(layer, region_map)
    if gate:
        perfect_gate(layer, region_map)
    return model


@dataclass
class StepStats:
    mse: float
    rc_loss: float = 0.0
    aux_loss: float = 0.0
    n_incorrect: int = 0


def _smoe_step(x, y, model: SMoEModel, cfg: TrainConfig, opt: Adam, lr: float, rng):
    layer = model.layer
    noise = None
    if cfg.aux.noise_std > 0:
        noise = rng.normal(0.0, cfg.aux.noise_std, size=layer.D.shape).astype(DTYPE)
    routing = layer.route(noise)
    pred, cache = model.forward(x, routing)
    loss, err = mse_loss(pred, y)
    ef = layer.select * layer.expert_out
    dy = np.broadcast_to(err, (err.shape[0], ef) + err.shape[2:]) if ef > 1 else err

    labels = None
    if cfg.rc_enabled or cfg.damping_enabled:
        labels = build_rc_labels(
            dy, routing, cfg.q, signed=cfg.rc_signed, per_sample=cfg.rc_per_sample
        )
    mask = labels.incorrect_mask if cfg.damping_enabled else None
    _, dk, db, dgate = layer.backward(dy, cache, cfg.damping_factor, mask)

    stats = StepStats(loss, n_incorrect=labels.n_incorrect if labels is not None else 0)
    layer.gate.zero_grad()
    if cfg.rc_enabled:
        stats.rc_loss, g = rc_loss(layer.D, labels)
        layer.gate.accumulate(g)
    elif layer.weighted:
        layer.gate.accumulate(dgate)

    aux_vals, aux_grads = [], []
    batch = x.shape[0]
    sel_mask = routing.dense_mask()
    if cfg.aux.use_importance:
        g_dense = np.broadcast_to(routing.dense_scores()[None], (batch,) + layer.D.shape)
        v, g = importance_loss(g_dense)
        aux_vals.append(v)
        aux_grads.append(g.sum(axis=0) * sel_mask)
    if cfg.aux.use_load:
        v, g = load_loss(layer.D, routing, cfg.aux.noise_std, batch)
        aux_vals.append(v)
        aux_grads.append(g)
    if cfg.aux.use_spatial_agreement:
        per_sample = np.broadcast_to(routing.dense_scores()[None], (batch,) + layer.D.shape)
        v, g = spatial_agreement_loss(np.ascontiguousarray(per_sample))
        aux_vals.append(v)
        aux_grads.append(g.sum(axis=0) * sel_mask)
    if aux_vals:
        stats.aux_loss = combine_aux(aux_vals, cfg.aux)
        layer.gate.accumulate((cfg.aux.aux_scale / len(aux_vals) * sum(aux_grads)).astype(DTYPE))

    grads = {"kernels": dk, "D": layer.gate.grad}
    if db is not None:
        grads["bias"] = db
    opt.step(model.params, grads, lr, model.frozen())
    return stats


def train_step(batch, model, cfg: TrainConfig, opt: Adam, lr: Optional[float] = None, rng=None):
    """One optimisation step on ``batch = (x, y)``; returns :class:`StepStats`.

    For SMoE models: forward, MSE error signal, RC labels (when the RC loss or
    damping is on), damped sparse backward, RC-loss gradient into the gate
    (or the end-to-end gate gradient for a weighted layer without RC loss),
    auxiliary gate losses, then Adam on every unfrozen group.
    """
    x, y = batch
    lr = cfg.lr if lr is None else lr
    rng = rng if rng is not None else make_rng(cfg.seed)
    if isinstance(model, SMoEModel):
        return _smoe_step(x, y, model, cfg, opt, lr, rng)
    pred, cache = model.forward(x)
    loss, err = mse_loss(pred, y)
    grads = model.net.backward(err, cache)
    grads.pop("x", None)
    opt.step(model.params, grads, lr, model.frozen())
    return StepStats(loss)


@dataclass
class MetricReport:
    pct_within_1: float
    mse: float
    utilization: list = field(default_factory=list)
    routing_changes: int = 0

    @property
    def utilization_entropy(self) -> float:
        u = np.asarray(self.utilization, dtype=np.float64)
        if u.size == 0 or u.sum() == 0:
            return 0.0
        p = u / u.sum()
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    routing = model.layer.route() if isinstance(model, SMoEModel) else None
    outs = [model.forward(x[i : i + batch_size], routing)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.empty_like(x)


def utilization(model) -> list:
    """Share of grid points whose first routing slot goes to each expert."""
    if not isinstance(model, SMoEModel):
        return []
    sel = model.layer.route().selected
    counts = np.bincount(sel.ravel(), minlength=model.layer.num_experts)
    return (counts / sel.size).tolist()


def evaluate(model, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 256) -> MetricReport:
    pred = predict(model, inputs, batch_size)
    if not np.all(np.isfinite(pred)):
        raise NumericalError("non-finite prediction during evaluation")
    mse = float(np.mean((pred.astype(np.float64) - targets) ** 2))
    return MetricReport(pct_within_1pct(pred, targets), mse, utilization(model))


HISTORY_FIELDS = (
    "epoch", "train_mse", "val_pct", "lr", "rc_loss", "aux_loss",
    "utilization_entropy", "routing_changes",
)


@dataclass
class FitResult:
    model: object
    history: list[dict]
    best_val: float
    best_epoch: int
    epochs_run: int


def _snapshot(model) -> dict:
    return {k: v.copy() for k, v in model.params.items()}


def _restore(model, snap: dict) -> None:
    for k, v in model.params.items():
        v[...] = snap[k]


def _check_finite(model, stats: StepStats) -> None:
    if not math.isfinite(stats.mse) or not math.isfinite(stats.rc_loss):
        raise NumericalError(f"non-finite loss (mse={stats.mse}, rc={stats.rc_loss})")
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite values in parameter {k}")


def fit(dataset, model, cfg: TrainConfig, callback=None) -> FitResult:
    """Train with plateau LR decay and early stopping on validation %-within-1%.

    The best-validation parameters are restored into ``model`` before returning.
    """
    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("fit needs non-empty train and validation splits")
    rng = make_rng(cfg.seed + 0x5EED)
    opt = Adam()
    lr = cfg.lr
    decays = 0
    best, best_epoch = -math.inf, 0
    best_snap = _snapshot(model)
    since_best = since_decay = 0
    prev_sel = model.layer.route().selected.copy() if isinstance(model, SMoEModel) else None
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(x_tr))
        mse_sum = rc_sum = aux_sum = 0.0
        steps = 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[i : i + cfg.batch_size])
            stats = train_step((x_tr[idx], y_tr[idx]), model, cfg, opt, lr, rng)
            _check_finite(model, stats)
            mse_sum += stats.mse
            rc_sum += stats.rc_loss
            aux_sum += stats.aux_loss
            steps += 1
        report = evaluate(model, x_va, y_va)
        changes = 0
        if prev_sel is not None:
            sel = model.layer.route().selected
            changes = int(np.any(np.sort(sel, axis=0) != np.sort(prev_sel, axis=0), axis=0).sum())
            prev_sel = sel.copy()
        report.routing_changes = changes
        row = {
            "epoch": epoch,
            "train_mse": mse_sum / steps,
            "val_pct": report.pct_within_1,
            "lr": lr,
            "rc_loss": rc_sum / steps,
            "aux_loss": aux_sum / steps,
            "utilization_entropy": report.utilization_entropy,
            "routing_changes": changes,
            "utilization": report.utilization,
        }
        history.append(row)
        log.info(
            "epoch %d mse %.3e val %.3f%% lr %.1e changes %d",
            epoch, row["train_mse"], row["val_pct"], lr, changes,
        )
        if callback is not None:
            callback(row)
        if report.pct_within_1 > best + IMPROVEMENT_TOL:
            best, best_epoch = report.pct_within_1, epoch
            best_snap = _snapshot(model)
            since_best = since_decay = 0
        else:
            since_best += 1
            since_decay += 1
        if since_best >= cfg.early_stop_patience:
            break
        if since_decay >= cfg.plateau_patience and decays < MAX_LR_DECAYS:
            lr /= cfg.lr_decay
            decays += 1
            since_decay = 0
    _restore(model, best_snap)
    return FitResult(model, history, best, best_epoch, epoch)
