"""Input embedding: raw traffic, incident indicators, calendar indices, and
the learnable adaptive embedding, fused into one representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ValidationError

# Concatenation order of the fused embedding. Fixed; tests pin it.
BLOCK_ORDER = ("data", "acc", "reg", "dow", "tod", "adaptive")


@dataclass(frozen=True)
class CalendarIndexer:
    """Maps absolute step indices to (day-of-week, time-of-day) indices."""

    steps_per_day: int
    start_weekday: int = 0
    start_slot: int = 0

    def __post_init__(self):
        if self.steps_per_day < 1:
            raise ValidationError(f"steps_per_day must be >= 1, got {self.steps_per_day}")
        if not 0 <= self.start_weekday <= 6:
            raise ValidationError(f"start_weekday must be in 0..6, got {self.start_weekday}")
        if not 0 <= self.start_slot < self.steps_per_day:
            raise ValidationError(
                f"start_slot must be in 0..{self.steps_per_day - 1}, got {self.start_slot}")

    @classmethod
    def from_interval(cls, interval_minutes: int, start_weekday: int = 0,
                      start_slot: int = 0) -> "CalendarIndexer":
        if interval_minutes < 1 or 1440 % interval_minutes != 0:
            raise ValidationError(
                f"interval_minutes must divide 1440, got {interval_minutes}")
        return cls(1440 // interval_minutes, start_weekday, start_slot)


def index_time(t: int, cal: CalendarIndexer) -> tuple[int, int]:
    """(dow, tod) for absolute step ``t``; dow advances by one per day wrap."""
    total = cal.start_slot + t
    tod = total % cal.steps_per_day
    dow = (cal.start_weekday + total // cal.steps_per_day) % 7
    return dow, tod


def time_indices(t0: int, horizon: int, cal: CalendarIndexer) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``index_time`` for steps ``t0 .. t0+horizon-1``."""
    steps = np.arange(t0, t0 + horizon)
    total = cal.start_slot + steps
    tod = total % cal.steps_per_day
    dow = (cal.start_weekday + total // cal.steps_per_day) % 7
    return dow.astype(np.int64), tod.astype(np.int64)


class EmbeddingTables:
    """View over the named embedding parameters of the model.

    Category id 0 is reserved for "no incident" in the acc/reg tables.
    """

    def __init__(self, params: dict[str, nm.Tensor], cal: CalendarIndexer):
        self.data_w = params["embed.data_proj.w"]
        self.data_b = params["embed.data_proj.b"]
        self.acc_table = params["embed.acc_table"]
        self.reg_table = params["embed.reg_table"]
        self.dow_table = params["embed.dow_table"]
        self.tod_table = params["embed.tod_table"]
        self.adaptive = params["embed.adaptive"]
        self.fuse_w = params["embed.fuse.w"]
        self.fuse_b = params["embed.fuse.b"]
        self.cal = cal


def _validate_ids(ids: np.ndarray, vocab_size: int, name: str):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = np.argwhere((ids < 0) | (ids >= vocab_size))[0]
        raise ValidationError(
            f"{name} id {ids[tuple(bad)]} at (t={bad[-2]}, n={bad[-1]}) outside "
            f"vocabulary of size {vocab_size}")
    return ids.astype(np.int64)


def embed_all(x: nm.Tensor, acc_ids: np.ndarray, reg_ids: np.ndarray, t0,
              tables: EmbeddingTables) -> nm.Tensor:
    """Fused input embedding, ``[..., T, N, D_model]``.

    ``x`` is ``[T, N, D_in]`` or batched ``[B, T, N, D_in]``; ids match its
    leading shape without the feature axis. ``t0`` is the absolute step of the
    window start (an int, or one int per batch element).
    """
    x = nm.as_tensor(x)
    batched = x.ndim == 4
    t_len, n_nodes = x.shape[-3], x.shape[-2]
    lead = x.shape[:-1]

    acc_ids = _validate_ids(acc_ids, tables.acc_table.shape[0], "accident")
    reg_ids = _validate_ids(reg_ids, tables.reg_table.shape[0], "regulation")
    if acc_ids.shape != lead or reg_ids.shape != lead:
        raise ValidationError(
            f"id arrays must have shape {lead}, got {acc_ids.shape} / {reg_ids.shape}")
    if tables.adaptive.shape[0] != t_len or tables.adaptive.shape[1] != n_nodes:
        raise ValidationError(
            f"adaptive embedding {tables.adaptive.shape[:2]} does not match "
            f"window shape ({t_len}, {n_nodes})")

    t0s = np.atleast_1d(np.asarray(t0, dtype=np.int64))
    if batched and len(t0s) not in (1, x.shape[0]):
        raise ValidationError(
            f"t0 must be scalar or one per batch element, got {len(t0s)} "
            f"for batch {x.shape[0]}")
    dow = np.empty((len(t0s), t_len), dtype=np.int64)
    tod = np.empty((len(t0s), t_len), dtype=np.int64)
    for i, start in enumerate(t0s):
        dow[i], tod[i] = time_indices(int(start), t_len, tables.cal)
    # Per-timestep calendar rows broadcast over the node axis.
    dow = np.repeat(dow[:, :, None], n_nodes, axis=2)
    tod = np.repeat(tod[:, :, None], n_nodes, axis=2)
    if not batched:
        dow, tod = dow[0], tod[0]
    elif len(t0s) == 1:
        dow = np.repeat(dow, x.shape[0], axis=0)
        tod = np.repeat(tod, x.shape[0], axis=0)

    x_data = nm.matmul(x, tables.data_w) + tables.data_b
    x_acc = nm.gather_rows(tables.acc_table, acc_ids)
    x_reg = nm.gather_rows(tables.reg_table, reg_ids)
    x_dow = nm.gather_rows(tables.dow_table, dow)
    x_tod = nm.gather_rows(tables.tod_table, tod)
    x_stae = tables.adaptive
    if batched:
        x_stae = nm.broadcast_to(x_stae, (x.shape[0],) + x_stae.shape)

    fused = nm.concat_last_axis([x_data, x_acc, x_reg, x_dow, x_tod, x_stae])
    return nm.matmul(fused, tables.fuse_w) + tables.fuse_b
