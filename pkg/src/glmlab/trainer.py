"""Optimisation loop: AdamW, warmup + cosine schedule, batch ramp, clipping,
embedding gradient shrink, dynamic loss scaling and gradient-norm monitoring."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import corruption as cr
from . import tensorcore as tc
from .model import ModelParams, egs_apply, forward, is_bias_like, loss_blank_infilling
from .tensorcore import HALF, WIDE


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite in wide-precision training."""


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 8e-5
    start_lr: float = 1e-7
    min_lr: float = 8e-6
    lr_warmup_fraction: float = 0.005
    lr_decay_fraction: float = 1.0  # cosine reaches min_lr at this fraction of the run
    batch_start: int = 192
    batch_end: int = 4224
    batch_increment: int = 24
    batch_ramp_fraction: float = 0.025
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    egs_alpha: float = 0.1
    initial_loss_scale: float = 65536.0
    loss_scale_window: int = 2000
    hysteresis: int = 2
    min_loss_scale: float = 1.0
    half_precision: bool = False
    spike_factor: float = 3.0
    spike_window: int = 50
    checkpoint_interval: int = 0
    seed: int = 1234

    def __post_init__(self):
        if not math.isclose(self.min_lr, self.peak_lr / 10, rel_tol=1e-9):
            raise ValueError("min_lr must be peak_lr / 10")
        if not self.start_lr < self.min_lr < self.peak_lr:
            raise ValueError("need start_lr < min_lr < peak_lr")
        if not 0.0 < self.egs_alpha <= 1.0:
            raise ValueError("egs_alpha must be in (0, 1]")
        if self.batch_start % self.batch_increment or self.batch_end % self.batch_increment:
            raise ValueError("batch endpoints must be multiples of batch_increment")
        if not 0 < self.batch_start <= self.batch_end:
            raise ValueError("need 0 < batch_start <= batch_end")


# -- schedules --------------------------------------------------------------


def lr_at(step: float, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from ``start_lr`` to ``peak_lr``, then cosine down to ``min_lr``."""
    warmup = cfg.lr_warmup_fraction * total_steps
    if step < warmup:
        return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * step / warmup
    decay_end = cfg.lr_decay_fraction * total_steps
    if decay_end <= warmup:
        return cfg.min_lr
    progress = min(1.0, (step - warmup) / (decay_end - warmup))
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_size_at(samples_seen: int, cfg: TrainConfig, total_samples: int) -> int:
    """Global batch size ramped linearly in ``batch_increment`` steps."""
    increments = (cfg.batch_end - cfg.batch_start) // cfg.batch_increment
    horizon = cfg.batch_ramp_fraction * total_samples
    if increments == 0 or samples_seen >= horizon:
        return cfg.batch_end
    per_increment = horizon / increments
    k = int(samples_seen // per_increment)
    return min(cfg.batch_end, cfg.batch_start + k * cfg.batch_increment)


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _param_arrays(params) -> dict[str, np.ndarray]:
    if isinstance(params, ModelParams):
        return {k: t.data for k, t in params}
    return {k: (t.data if isinstance(t, tc.Tensor) else t) for k, t in params.items()}


def adamw_step(params, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
               cfg: TrainConfig, no_decay: Callable[[str], bool] = is_bias_like) -> bool:
    """One AdamW update in place. Returns False (nothing touched) on a non-finite gradient."""
    arrays = _param_arrays(params)
    if any(not np.all(np.isfinite(grads[k])) for k in arrays):
        return False
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in arrays.items():
        g = grads[name]
        if theta.shape != g.shape:
            raise tc.ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and not no_decay(name):
            update = update + cfg.weight_decay * theta
        theta -= lr * update
    return True


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds ``max_norm``.

    Returns ``(grads, pre_clip_norm)``.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


# -- loss scaling -----------------------------------------------------------


@dataclass(frozen=True)
class LossScaleState:
    scale: float = 65536.0
    growth_tracker: int = 0
    hysteresis_left: int = 2
    window: int = 2000
    hysteresis: int = 2
    min_scale: float = 1.0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LossScaleState":
        return cls(cfg.initial_loss_scale, 0, cfg.hysteresis, cfg.loss_scale_window,
                   cfg.hysteresis, cfg.min_loss_scale)


def loss_scaler_update(state: LossScaleState, overflow: bool) -> LossScaleState:
    """Dynamic loss scale with delayed back-off.

    An overflow resets the growth window and consumes one unit of hysteresis;
    once hysteresis is used up every overflow halves the scale (floored at
    ``min_scale``). ``window`` consecutive clean steps double the scale and
    restore the hysteresis.
    """
    if overflow:
        left = state.hysteresis_left - 1
        scale = state.scale
        if left <= 0:
            scale = max(state.scale / 2.0, state.min_scale)
        return replace(state, scale=scale, growth_tracker=0, hysteresis_left=left)
    growth = state.growth_tracker + 1
    if growth == state.window:
        return replace(state, scale=state.scale * 2.0, growth_tracker=0,
                       hysteresis_left=state.hysteresis)
    return replace(state, growth_tracker=growth)


# -- monitoring -------------------------------------------------------------


@dataclass
class GradReport:
    group_norms: dict[str, float]
    global_norm: float
    spike: bool
    spiking_groups: list[str]


def group_of(name: str) -> str:
    if name.startswith("layers."):
        return ".".join(name.split(".")[:2])
    return name


def grad_norm_report(grads: Mapping[str, np.ndarray], history: Mapping[str, Sequence[float]],
                     k: float = 3.0, window: int = 50) -> GradReport:
    """Per-group L2 norms; a group spikes when its norm exceeds ``k`` times the
    median of its last ``window`` norms in ``history``."""
    sq: dict[str, float] = {}
    for name, g in grads.items():
        key = group_of(name)
        sq[key] = sq.get(key, 0.0) + float(np.sum(g * g))
    norms = {key: math.sqrt(v) for key, v in sq.items()}
    spiking = []
    for key, n in norms.items():
        past = list(history.get(key, ()))[-window:]
        if past and n > k * float(np.median(past)):
            spiking.append(key)
    return GradReport(norms, math.sqrt(sum(sq.values())), bool(spiking), spiking)


# -- training loop ----------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    batch: int
    grad_norms: dict[str, float]
    global_norm: float
    spike: bool
    loss_scale: float
    skipped: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def batch_gradients(model: ModelParams, batch: Sequence, egs_alpha: float | None, *,
                    policy=WIDE, rng=None, loss_scale: float = 1.0):
    """Mean blank-infilling loss over ``batch`` and the gradients of ``loss * loss_scale``.

    One embedding-gradient-shrink node is shared by every sequence in the
    batch, so the embedding gradient is scaled once, after accumulation.
    ``egs_alpha=None`` builds no shrink node at all.
    """
    model.zero_grad()
    emb = model["embedding"] if egs_alpha is None else egs_apply(model["embedding"], egs_alpha)
    losses = [loss_blank_infilling(forward(model, seq, policy=policy, rng=rng, embedding=emb), seq)
              for seq in batch]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(batch))
    loss_value = total.item()
    tc.backward(total * loss_scale if loss_scale != 1.0 else total)
    return loss_value, model.grads()


def train(corpus: Sequence[Sequence[int]], model: ModelParams, train_cfg: TrainConfig,
          corruption_cfg: cr.CorruptionConfig, steps: int, *,
          checkpoint_dir=None, log=None,
          callback: Callable[[int, ModelParams, list], None] | None = None,
          inject_overflow: Callable[[int], bool] | None = None) -> list[StepRecord]:
    """Train ``model`` in place for ``steps`` optimiser steps.

    ``callback(step, params, batch)`` runs after gradients are computed and
    before the update. ``inject_overflow(step)`` forces an overflow at the
    given steps (half precision only) to exercise the scaler path.
    """
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    data_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1]) if model.cfg.dropout > 0 else None
    source = cr.TokenSource(corpus)
    policy = HALF if train_cfg.half_precision else WIDE
    total_samples = steps * train_cfg.batch_end
    adam = AdamState()
    scaler = LossScaleState.from_config(train_cfg)
    history: dict[str, list[float]] = {}
    samples_seen = 0
    records: list[StepRecord] = []

    for step in range(steps):
        bs = batch_size_at(samples_seen, train_cfg, total_samples)
        batch = [cr.next_sequence(source, corruption_cfg, data_rng) for _ in range(bs)]
        samples_seen += bs

        scale = scaler.scale if train_cfg.half_precision else 1.0
        loss_value, grads = batch_gradients(model, batch, train_cfg.egs_alpha, policy=policy,
                                            rng=drop_rng, loss_scale=scale)
        if not math.isfinite(loss_value) and not train_cfg.half_precision:
            raise TrainingDiverged(f"non-finite loss {loss_value} at step {step}")
        overflow = False
        if train_cfg.half_precision:
            stored = {k: tc.half_emulate(g).data for k, g in grads.items()}
            overflow = any(not np.all(np.isfinite(g)) for g in stored.values())
            if inject_overflow is not None and inject_overflow(step):
                overflow = True
            grads = {k: g / scale for k, g in stored.items()}

        lr = lr_at(step, train_cfg, steps)
        if overflow:
            report = GradReport({}, float("nan"), False, [])
            scaler = loss_scaler_update(scaler, True)
            skipped = True
        else:
            report = grad_norm_report(grads, history, train_cfg.spike_factor,
                                      train_cfg.spike_window)
            for key, n in report.group_norms.items():
                history.setdefault(key, []).append(n)
            if callback is not None:
                callback(step, model, batch)
            clipped, _ = clip_gradients(grads, train_cfg.clip_norm)
            skipped = not adamw_step(model, clipped, adam, lr, train_cfg)
            if train_cfg.half_precision:
                scaler = loss_scaler_update(scaler, skipped)

        rec = StepRecord(step, loss_value, lr, bs, report.group_norms, report.global_norm,
                         report.spike, scale, skipped)
        records.append(rec)
        if log is not None:
            log.write(rec.to_json() + "\n")
        if checkpoint_dir and train_cfg.checkpoint_interval and \
                (step + 1) % train_cfg.checkpoint_interval == 0:
            model.save(Path(checkpoint_dir) / f"step_{step + 1:06d}")
    return records
