"""Adam training with early stopping, evaluation and scale-trajectory logging."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_csv
from .data import TimeSeriesDataset, WindowBatch, window
from .errors import ConfigError, DataError, NumericError
from .model import ForecastModel, model_forward, mse_loss

logger = logging.getLogger(__name__)


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit sub-seed for ``(seed, purpose)``."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    max_steps: int | None = None
    eval_batch_size: int = 256
    log_interval: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size, max_epochs must be >= 1 and patience >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_batch_size < 1 or self.log_interval < 1:
            raise ConfigError("eval_batch_size and log_interval must be >= 1")

    def in_search_ranges(self) -> bool:
        """Whether lr (1e-5..1e-3) and batch size (16, 32, 64) fall in the usual search space."""
        return 1e-5 <= self.lr <= 1e-3 and self.batch_size in (16, 32, 64)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, in place, with optional global-norm clipping."""
    if set(grads) != set(params):
        missing, extra = sorted(set(params) - set(grads)), sorted(set(grads) - set(params))
        raise ConfigError(f"gradient keys differ from parameters; missing={missing[:5]} extra={extra[:5]}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    if cfg.clip_norm is not None:
        total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if total > cfg.clip_norm:
            factor = cfg.clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


@dataclass
class RunHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    scale_steps: list[int] = field(default_factory=list)
    scale_values: list[np.ndarray] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    strategy: str = "fixed"

    @property
    def best_val(self) -> float:
        return self.val_mse[self.best_epoch]

    def to_csv(self, path: str | Path) -> None:
        rows = ([epoch, repr(tr), repr(va)] for epoch, (tr, va) in enumerate(zip(self.train_mse, self.val_mse), start=1))
        atomic_write_csv(path, ["epoch", "train_mse", "val_mse"], rows)


def predict(model: ForecastModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forecasts for a stack of input windows ``(count, L, D)``."""
    out = []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(model_forward(inputs[start : start + batch_size], model).data)
    return np.concatenate(out, axis=0)


def evaluate(
    model: ForecastModel,
    dataset: TimeSeriesDataset,
    split: str,
    lookback: int | None = None,
    horizon: int | None = None,
    denormalized: bool = False,
    batch_size: int = 256,
    windows: WindowBatch | None = None,
) -> dict[str, float]:
    """Mean per-window MSE and MAE over every window of ``split``.

    Metrics are in the dataset's (normalized) space; ``denormalized`` adds
    ``mse_raw`` / ``mae_raw`` on the original scale.
    """
    lookback = lookback or model.config.lookback
    horizon = horizon or model.config.horizon
    if windows is None:
        windows = window(dataset, split, lookback, horizon)
    if len(windows) == 0:
        raise DataError(f"{split} split has no windows")
    sq = ab = 0.0
    sq_raw = ab_raw = 0.0
    for batch in windows.batches(batch_size):
        with ad.no_grad():
            pred = model_forward(batch.inputs, model).data
        err = pred - batch.targets
        sq += float(np.sum(err * err))
        ab += float(np.sum(np.abs(err)))
        if denormalized:
            err_raw = dataset.inverse_transform(pred) - dataset.inverse_transform(batch.targets)
            sq_raw += float(np.sum(err_raw * err_raw))
            ab_raw += float(np.sum(np.abs(err_raw)))
    count = windows.targets.size
    metrics = {"mse": sq / count, "mae": ab / count}
    if denormalized:
        metrics.update(mse_raw=sq_raw / count, mae_raw=ab_raw / count)
    return metrics


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Window permutation for one epoch, keyed on ``(seed, epoch)`` only."""
    rng = np.random.default_rng([derive_seed(seed, "shuffle"), epoch])
    return rng.permutation(count)


def train(
    model: ForecastModel,
    dataset: TimeSeriesDataset,
    cfg: TrainConfig,
    train_windows: WindowBatch | None = None,
    val_windows: WindowBatch | None = None,
) -> tuple[ForecastModel, RunHistory]:
    """Fit ``model`` by Adam on MSE; keep and finally restore the best-validation state.

    Stops after ``patience`` consecutive epochs without validation improvement,
    at ``max_epochs``, or once ``max_steps`` optimizer steps have run.
    """
    c = model.config
    if dataset.n_variates != c.n_variates:
        raise ConfigError(f"model expects D={c.n_variates}, dataset has D={dataset.n_variates}")
    if train_windows is None:
        train_windows = window(dataset, "train", c.lookback, c.horizon)
    if val_windows is None:
        val_windows = window(dataset, "val", c.lookback, c.horizon)
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise DataError("train and val splits must each contain at least one window")

    params = model.parameters()
    state = AdamState()
    history = RunHistory(strategy=c.strategy)
    log_scales = c.strategy in ("learnable", "dynamic")
    best_val, best_state, stale = math.inf, None, 0

    for epoch in range(cfg.max_epochs):
        order = epoch_order(cfg.seed, epoch, len(train_windows))
        total, seen = 0.0, 0
        for batch in train_windows.batches(cfg.batch_size, order):
            with ad.tape():
                loss = mse_loss(model_forward(batch.inputs, model), batch.targets)
                grads = ad.backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"training loss became {value} at step {state.step + 1}")
            if log_scales and (state.step + 1) % cfg.log_interval == 0:
                history.scale_steps.append(state.step + 1)
                history.scale_values.append(model.scale_values())
            adam_step(params, {name: grads[p] for name, p in params.items()}, state, cfg)
            total += value * len(batch)
            seen += len(batch)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
        history.train_mse.append(total / seen)
        val = evaluate(model, dataset, "val", batch_size=cfg.eval_batch_size, windows=val_windows)["mse"]
        history.val_mse.append(val)
        logger.info("epoch %d train_mse=%.6g val_mse=%.6g", epoch + 1, history.train_mse[-1], val)
        if val < best_val:
            best_val, best_state, stale = val, model.state_dict(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale > cfg.patience:
                break
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break

    history.steps = state.step
    model.load_state_dict(best_state)
    return model, history


def log_scale_trajectory(history: RunHistory, path: str | Path) -> bool:
    """Write ``step, scale_1..scale_n`` rows; returns False (no file) for fixed scales."""
    if history.strategy == "fixed" or not history.scale_values:
        logger.warning("no scale trajectory for the %s strategy; nothing written", history.strategy)
        return False
    n = len(history.scale_values[0])
    rows = ([step] + [repr(float(v)) for v in values] for step, values in zip(history.scale_steps, history.scale_values))
    atomic_write_csv(path, ["step"] + [f"scale_{i + 1}" for i in range(n)], rows)
    return True
