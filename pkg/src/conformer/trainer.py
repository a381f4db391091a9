"""Training loop (Adam on masked MAE), early stopping, and evaluation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .data import (DatasetBundle, MaskedMetrics, NormalizationStats, SplitSpec,
                   Window, chronological_split, fit_normalization, make_windows,
                   masked_metrics)
from .errors import ConfigError, NumericsError
from .graph import normalize_adjacency
from .model import ConFormerConfig, ConFormerParams, forward, init_params


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 20
    seed: int = 0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float


@dataclass
class TrainResult:
    params: ConFormerParams
    history: list[EpochRecord]
    stats: NormalizationStats
    best_epoch: int


class EarlyStopper:
    """Tracks the best validation score and signals patience exhaustion.

    ``update`` returns True when training should stop: the given epoch is
    ``patience`` epochs past the best one without improvement.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_value = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


class AdamState:
    """Per-parameter first/second moment accumulators."""

    def __init__(self, params: ConFormerParams):
        self.m = {name: np.zeros(t.shape) for name, t in params.entries()}
        self.v = {name: np.zeros(t.shape) for name, t in params.entries()}
        self.t = 0

    def step(self, params: ConFormerParams, grads: dict[str, np.ndarray],
             tcfg: TrainConfig) -> None:
        norm_sq = sum(float((g * g).sum()) for g in grads.values())
        scale = 1.0
        if tcfg.clip_norm > 0 and norm_sq > tcfg.clip_norm ** 2:
            scale = tcfg.clip_norm / math.sqrt(norm_sq)
        self.t += 1
        bias1 = 1.0 - tcfg.beta1 ** self.t
        bias2 = 1.0 - tcfg.beta2 ** self.t
        updates = {}
        for name, g in grads.items():
            g = g * scale
            self.m[name] = tcfg.beta1 * self.m[name] + (1.0 - tcfg.beta1) * g
            self.v[name] = tcfg.beta2 * self.v[name] + (1.0 - tcfg.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            updates[name] = (params[name].data
                             - tcfg.learning_rate * m_hat / (np.sqrt(v_hat) + tcfg.adam_eps))
        params.replace(updates)


def masked_mae_loss(pred: nm.Tensor, target: np.ndarray,
                    stats: NormalizationStats) -> nm.Tensor | None:
    """Masked MAE in original units; None when no target is nonzero.

    ``pred`` is in normalized space and is denormalized inside the graph so
    gradients flow; targets with value 0 are excluded, sharing the metric
    mask.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = (target != 0).astype(np.float64)
    n_valid = mask.sum()
    if n_valid == 0:
        return None
    denorm = pred * stats.std + stats.mean
    err = nm.absolute(denorm - nm.Tensor(target))
    return nm.tsum(err * nm.Tensor(mask)) * (1.0 / n_valid)


def _window_ids(bundle: DatasetBundle, t0s, t_in: int):
    acc = np.stack([bundle.acc_ids[t0:t0 + t_in] for t0 in t0s])
    reg = np.stack([bundle.reg_ids[t0:t0 + t_in] for t0 in t0s])
    return acc, reg


def _batch_inputs(bundle: DatasetBundle, windows: list[Window], idx: np.ndarray,
                  stats: NormalizationStats):
    t0s = [windows[i].t0 for i in idx]
    x = np.stack([stats.apply(windows[i].x) for i in idx])[..., None]
    y = np.stack([windows[i].y for i in idx])[..., None]
    acc, reg = _window_ids(bundle, t0s, x.shape[1])
    return x, y, acc, reg, np.asarray(t0s)


def predict_windows(params: ConFormerParams, bundle: DatasetBundle,
                    windows: list[Window], stats: NormalizationStats,
                    batch_size: int = 64) -> np.ndarray:
    """Denormalized forecasts for a list of windows, shape [W, T', N, 1]."""
    cfg = params.cfg
    op = normalize_adjacency(bundle.graph)
    out = []
    n_workers = max(1, int(os.environ.get("CONFORMER_THREADS", "1")))
    batches = [np.arange(i, min(i + batch_size, len(windows)))
               for i in range(0, len(windows), batch_size)]

    def run(idx: np.ndarray) -> np.ndarray:
        x, _, acc, reg, t0s = _batch_inputs(bundle, windows, idx, stats)
        pred = forward(x, acc, reg, t0s, op, params, cfg)
        return stats.invert(pred.data)

    if n_workers > 1 and len(batches) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            out = list(pool.map(run, batches))
    else:
        out = [run(idx) for idx in batches]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.t_out, cfg.n_nodes, 1))


def historical_inertia(windows: list[Window], t_out: int) -> np.ndarray:
    """Reference forecaster: repeat the last observed value across the horizon."""
    if not windows:
        return np.zeros((0, t_out, 1, 1))
    last = np.stack([w.x[-1] for w in windows])          # [W, N]
    return np.repeat(last[:, None, :, None], t_out, axis=1)


def evaluate_forecasts(y_true: np.ndarray, y_pred: np.ndarray,
                       horizons: list[int]) -> dict[str, MaskedMetrics]:
    """Masked metrics per requested horizon plus the all-horizon average.

    ``horizons`` are 1-based steps into the forecast; 'average' pools every
    step of the horizon.
    """
    t_out = y_true.shape[1]
    for h in horizons:
        if not 1 <= h <= t_out:
            raise ConfigError(f"horizon {h} outside [1, {t_out}]")
    table = {f"h{h}": masked_metrics(y_true[:, h - 1], y_pred[:, h - 1])
             for h in horizons}
    table["average"] = masked_metrics(y_true, y_pred)
    return table


def evaluate(params: ConFormerParams, bundle: DatasetBundle, split: SplitSpec,
             split_name: str, horizons: list[int], stats: NormalizationStats,
             batch_size: int = 64) -> dict[str, MaskedMetrics]:
    """Metrics table for the trained model on one split, original units."""
    cfg = params.cfg
    windows = make_windows(bundle, split.range_for(split_name), cfg.t_in, cfg.t_out)
    if not windows:
        raise ConfigError(f"split '{split_name}' too short for T={cfg.t_in}, "
                          f"T'={cfg.t_out}")
    preds = predict_windows(params, bundle, windows, stats, batch_size)
    y_true = np.stack([w.y for w in windows])[..., None]
    return evaluate_forecasts(y_true, preds, horizons)


def evaluate_historical_inertia(bundle: DatasetBundle, split: SplitSpec,
                                split_name: str, t_in: int, t_out: int,
                                horizons: list[int]) -> dict[str, MaskedMetrics]:
    windows = make_windows(bundle, split.range_for(split_name), t_in, t_out)
    preds = historical_inertia(windows, t_out)
    y_true = np.stack([w.y for w in windows])[..., None]
    return evaluate_forecasts(y_true, preds, horizons)


def train(bundle: DatasetBundle, cfg: ConFormerConfig, tcfg: TrainConfig,
          split: SplitSpec | None = None) -> TrainResult:
    """Fit on the train split, early-stop on validation masked MAE.

    Returns the parameters with the lowest validation MAE, the per-epoch
    history, and the normalization stats (fit on the train split only).
    Fully deterministic for a fixed seed.
    """
    split = split or chronological_split(bundle.n_steps)
    train_windows = make_windows(bundle, split.train, cfg.t_in, cfg.t_out)
    val_windows = make_windows(bundle, split.val, cfg.t_in, cfg.t_out)
    if not train_windows or not val_windows:
        raise ConfigError(
            f"train/val splits too short for T={cfg.t_in}, T'={cfg.t_out} "
            f"(got {len(train_windows)}/{len(val_windows)} windows)")

    lo, hi = split.train
    stats = fit_normalization(bundle.values[lo:hi])
    op = normalize_adjacency(bundle.graph)

    seeds = np.random.SeedSequence(tcfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    params = init_params(cfg, seed=init_seed)
    adam = AdamState(params)
    stopper = EarlyStopper(tcfg.patience)

    history: list[EpochRecord] = []
    best_params = params.copy()

    for epoch in range(1, tcfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_windows))
        epoch_losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            x, y, acc, reg, t0s = _batch_inputs(bundle, train_windows, idx, stats)
            pred = forward(x, acc, reg, t0s, op, params, cfg,
                           dropout_rng=dropout_rng if cfg.dropout > 0 else None)
            loss = masked_mae_loss(pred, y, stats)
            if loss is None:
                continue
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericsError(
                    f"non-finite loss at epoch {epoch}, batch {start // tcfg.batch_size}")
            grads = nm.backward(loss, dict(params.entries()))
            adam.step(params, grads, tcfg)
            epoch_losses.append(loss_val)

        val_metrics = evaluate(params, bundle, split, "val", [], stats,
                               batch_size=max(tcfg.batch_size, 64))
        val_mae = val_metrics["average"].mae
        train_mae = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        history.append(EpochRecord(epoch=epoch, train_mae=train_mae, val_mae=val_mae))

        improved = val_mae < stopper.best_value
        should_stop = stopper.update(epoch, val_mae)
        if improved:
            best_params = params.copy()
        if should_stop:
            break

    return TrainResult(params=best_params, history=history, stats=stats,
                       best_epoch=stopper.best_epoch)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_mae,val_mae\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_mae!r},{rec.val_mae!r}\n")
