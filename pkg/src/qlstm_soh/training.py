"""Adam training loop, gradient clipping, LR schedule and regression metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteError, TrainingError, ValidationError
from .models import Model, ModelSpec, init_model, predict, sequence_forward
from .partition import Normalizer, SequenceDataset

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (11, 22, 33)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float | None = None  # None keeps the model spec's rate
    grad_clip_norm: float = 1.0
    lr_decay: tuple[float, int] = (0.95, 10)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")


# --------------------------------------------------------------------------
# Optimiser pieces
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place on each tensor's value.

    ``params`` fixes the update order; ``grads`` maps tensor -> gradient.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p in params:
        g = grads[p]
        m = state.m.get(p.id)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[p.id]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.id], state.v[p.id] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float = 1.0) -> dict:
    if max_norm <= 0:
        raise ValidationError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


def lr_schedule(epoch: int, lr0: float, factor: float = 0.95, every: int = 10) -> float:
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return lr0 * factor ** (epoch // every)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    history: list[float]
    lrs: list[float]
    seed: int
    seconds: float


def _rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    init, shuffle, dropout, noise = ss.spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(dropout), np.random.default_rng(noise))


def train(spec: ModelSpec, data: SequenceDataset, config: TrainConfig, seed: int, progress=None) -> TrainResult:
    """Mini-batch Adam on the mean squared error; same seed gives the same run."""
    if len(data) == 0:
        raise ValidationError("training set is empty")
    if data.x.shape[2] != spec.input_dim:
        raise ValidationError(f"model expects {spec.input_dim} features, data has {data.x.shape[2]}")
    if config.dropout is not None:
        spec = dataclasses.replace(spec, dropout=config.dropout)
    rng_init, rng_shuffle, rng_drop, rng_noise = _rngs(seed)
    model = init_model(spec, rng_init)
    params = model.parameters()
    state = AdamState()
    beta1, beta2, eps = config.adam
    factor, every = config.lr_decay
    n = len(data)
    history, lrs = [], []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr, factor, every)
        order = rng_shuffle.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            tape = ad.Tape()
            try:
                pred = sequence_forward(model, data.x[idx], tape=tape, training=True, rng=rng_drop, noise_rng=rng_noise)
                loss = ad.mse_loss(tape, pred, data.y[idx])
                grads = ad.backward(tape, loss, params)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch} batch {b}: {exc}") from exc
            value = float(loss.value)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite gradient in epoch {epoch} batch {b}")
            grads = clip_gradients(grads, config.grad_clip_norm)
            adam_step(params, grads, state, lr, beta1, beta2, eps)
            total += value * len(idx)
        history.append(total / n)
        lrs.append(lr)
        if progress is not None:
            progress(epoch, history[-1])
        log.debug("%s seed %d epoch %d loss %.6g", spec.kind.value, seed, epoch, history[-1])
    return TrainResult(model, history, lrs, seed, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class Metrics:
    mae: float
    rmse: float
    r2: float | None
    n: int
    r2_missing_reason: str | None = None

    def as_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "r2": self.r2}


def regression_metrics(y, y_hat) -> Metrics:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValidationError("metrics need two non-empty arrays of equal shape")
    err = y - y_hat
    n = y.size
    mae = float(np.mean(np.abs(err)))
    sse = float(np.sum(err * err))
    rmse = math.sqrt(sse / n)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return Metrics(mae, rmse, None, n, "target variance is zero")
    return Metrics(mae, rmse, 1.0 - sse / sst, n)


def evaluate(model: Model, data: SequenceDataset, normalizer: Normalizer, noise_seed: int | None = None) -> Metrics:
    """Metrics in SOH-fraction units (predictions and targets de-normalised)."""
    if len(data) == 0:
        raise ValidationError("test set is empty")
    noise_rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    y_hat = normalizer.inverse_target(predict(model, data.x, noise_rng=noise_rng))
    y = normalizer.inverse_target(data.y)
    return regression_metrics(y, y_hat)


@dataclass
class Aggregate:
    mean: dict
    std: dict
    per_seed: list

    @classmethod
    def of(cls, runs: list[Metrics]) -> "Aggregate":
        mean, std = {}, {}
        for key in ("mae", "rmse", "r2"):
            vals = [getattr(r, key) for r in runs if getattr(r, key) is not None]
            if not vals:
                mean[key] = std[key] = None
                continue
            arr = np.array(vals)
            mean[key] = float(arr.mean())
            std[key] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return cls(mean, std, [r.as_dict() for r in runs])
