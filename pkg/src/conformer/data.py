"""Dataset schema and I/O, z-score normalization, chronological splits,
masked metrics, window extraction, and the synthetic incident generator."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, LoadError, ValidationError
from .graph import GraphSpec, normalize_adjacency

VALUES_FILE = "values.csv"
INCIDENTS_FILE = "incidents.csv"
ADJACENCY_FILE = "adjacency.csv"
META_FILE = "meta.json"

TOPOLOGIES = ("ring", "grid", "random-geometric")


@dataclass
class DatasetBundle:
    """In-memory dataset: observed values, incident ids, graph, metadata.

    ``values`` is [T_total, N]; zeros are permitted and treated as missing by
    the metrics and the loss. ``acc_ids``/``reg_ids`` are integer category
    ids with 0 meaning "no incident".
    """

    values: np.ndarray
    acc_ids: np.ndarray
    reg_ids: np.ndarray
    graph: GraphSpec
    interval_minutes: int
    start_weekday: int = 0
    start_slot: int = 0
    acc_vocab: tuple[str, ...] = ("none", "accident")
    reg_vocab: tuple[str, ...] = ("none", "regulation")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.acc_ids = np.asarray(self.acc_ids, dtype=np.int64)
        self.reg_ids = np.asarray(self.reg_ids, dtype=np.int64)
        self.acc_vocab = tuple(self.acc_vocab)
        self.reg_vocab = tuple(self.reg_vocab)
        if self.values.ndim != 2:
            raise ValidationError(f"values must be [T, N], got {self.values.shape}")
        if self.acc_ids.shape != self.values.shape or self.reg_ids.shape != self.values.shape:
            raise ValidationError("values, acc_ids and reg_ids must share one shape")
        if self.values.shape[1] != self.graph.n_nodes:
            raise ValidationError(
                f"values have {self.values.shape[1]} nodes, graph has "
                f"{self.graph.n_nodes}")
        if self.interval_minutes < 1 or 1440 % self.interval_minutes != 0:
            raise ValidationError(
                f"interval_minutes must divide 1440, got {self.interval_minutes}")
        for name, ids, vocab in (("acc", self.acc_ids, self.acc_vocab),
                                 ("reg", self.reg_ids, self.reg_vocab)):
            if ids.size and (ids.min() < 0 or ids.max() >= len(vocab)):
                raise ValidationError(f"{name}_ids outside vocabulary of size {len(vocab)}")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes


@dataclass(frozen=True)
class NormalizationStats:
    """Z-score statistics fit on the training split only."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValidationError(f"std must be > 0, got {self.std}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def fit_normalization(values: np.ndarray) -> NormalizationStats:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std())
    return NormalizationStats(mean=float(values.mean()), std=std if std > 0 else 1.0)


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous chronological train/val/test ranges partitioning [0, T)."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def range_for(self, name: str) -> tuple[int, int]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split '{name}'") from None


def chronological_split(n_steps: int, ratios=(6, 2, 2)) -> SplitSpec:
    total = sum(ratios)
    n_train = round(n_steps * ratios[0] / total)
    n_val = round(n_steps * ratios[1] / total)
    return SplitSpec(train=(0, n_train), val=(n_train, n_train + n_val),
                     test=(n_train + n_val, n_steps))


@dataclass(frozen=True)
class MaskedMetrics:
    """Masked MAE / RMSE / MAPE over entries with nonzero ground truth.

    ``n_valid == 0`` is the explicit empty-mask signal; the metric fields are
    NaN in that case. MAPE is reported in percent.
    """

    mae: float
    rmse: float
    mape: float
    n_valid: int


def masked_metrics(y, y_hat) -> MaskedMetrics:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"metric shapes differ: {y.shape} vs {y_hat.shape}")
    mask = y != 0
    n_valid = int(mask.sum())
    if n_valid == 0:
        return MaskedMetrics(math.nan, math.nan, math.nan, 0)
    err = y_hat[mask] - y[mask]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    mape = float((np.abs(err) / np.abs(y[mask])).mean() * 100.0)
    return MaskedMetrics(mae=mae, rmse=rmse, mape=mape, n_valid=n_valid)


@dataclass(frozen=True)
class Window:
    """One training/evaluation sample: input values, target values, start step."""

    x: np.ndarray
    y: np.ndarray
    t0: int


def windows_with_incidents(bundle: DatasetBundle, windows: list[Window],
                           t_in: int) -> list[Window]:
    """Windows whose input block contains at least one accident id."""
    return [w for w in windows if bundle.acc_ids[w.t0:w.t0 + t_in].any()]


def make_windows(bundle: DatasetBundle, split_range: tuple[int, int], t_in: int,
                 t_out: int) -> list[Window]:
    """Stride-1 sliding windows fully contained in the split range.

    Both the input block [t0, t0+T) and the target block [t0+T, t0+T+T')
    stay inside the range, so no window leaks across split boundaries.
    Returns an empty list when the range is too short.
    """
    lo, hi = split_range
    if not (0 <= lo <= hi <= bundle.n_steps):
        raise ConfigError(f"split range {split_range} outside [0, {bundle.n_steps}]")
    windows = []
    for t0 in range(lo, hi - t_in - t_out + 1):
        x = bundle.values[t0:t0 + t_in]
        y = bundle.values[t0 + t_in:t0 + t_in + t_out]
        windows.append(Window(x=x, y=y, t0=t0))
    return windows


# -- on-disk format -----------------------------------------------------------


def _fmt(v: float) -> str:
    # repr of a Python float is the shortest string that round-trips exactly,
    # so save -> load is bitwise lossless.
    return repr(float(v))


def save_dataset(bundle: DatasetBundle, out_dir) -> None:
    """Write the four-file dataset layout (UTF-8, LF endings, 0-based ids)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, VALUES_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,node,value\n")
        for t in range(bundle.n_steps):
            for n in range(bundle.n_nodes):
                fh.write(f"{t},{n},{_fmt(bundle.values[t, n])}\n")
    with open(os.path.join(out_dir, INCIDENTS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,node,kind,code\n")
        for kind, ids in (("acc", bundle.acc_ids), ("reg", bundle.reg_ids)):
            for t, n in zip(*np.nonzero(ids)):
                fh.write(f"{t},{n},{kind},{ids[t, n]}\n")
    with open(os.path.join(out_dir, ADJACENCY_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src,dst,weight\n")
        for src, dst, weight in bundle.graph.edges:
            fh.write(f"{src},{dst},{_fmt(weight)}\n")
    meta = {
        "interval_minutes": bundle.interval_minutes,
        "start_weekday": bundle.start_weekday,
        "start_slot": bundle.start_slot,
        "n_nodes": bundle.n_nodes,
        "n_steps": bundle.n_steps,
        "acc_vocab": list(bundle.acc_vocab),
        "reg_vocab": list(bundle.reg_vocab),
    }
    with open(os.path.join(out_dir, META_FILE), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_error(path, line_no, msg) -> LoadError:
    return LoadError(f"{path}:{line_no}: {msg}")


def load_dataset(data_dir) -> DatasetBundle:
    """Read and validate the four-file dataset layout."""
    paths = {name: os.path.join(data_dir, name)
             for name in (VALUES_FILE, INCIDENTS_FILE, ADJACENCY_FILE, META_FILE)}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise LoadError(f"{path}: missing dataset file")

    meta_path = paths[META_FILE]
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise _load_error(meta_path, exc.lineno, f"invalid JSON: {exc.msg}") from exc
    required = {"interval_minutes", "start_weekday", "start_slot", "n_nodes",
                "n_steps", "acc_vocab", "reg_vocab"}
    missing = required - set(meta)
    if missing:
        raise LoadError(f"{meta_path}: missing keys {sorted(missing)}")
    n_nodes, n_steps = int(meta["n_nodes"]), int(meta["n_steps"])
    interval = int(meta["interval_minutes"])
    if interval < 1 or 1440 % interval != 0:
        raise LoadError(f"{meta_path}: interval_minutes {interval} does not divide 1440")

    values = np.zeros((n_steps, n_nodes))
    seen = np.zeros((n_steps, n_nodes), dtype=bool)
    vpath = paths[VALUES_FILE]
    with open(vpath, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "node", "value"]:
            raise _load_error(vpath, 1, f"expected header t,node,value, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise _load_error(vpath, line_no, f"expected 3 fields, got {len(row)}")
            try:
                t, n, v = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise _load_error(vpath, line_no, f"malformed row: {exc}") from exc
            if not (0 <= t < n_steps and 0 <= n < n_nodes):
                raise _load_error(vpath, line_no, f"(t={t}, node={n}) out of range")
            if seen[t, n]:
                raise _load_error(vpath, line_no, f"duplicate entry for (t={t}, node={n})")
            seen[t, n] = True
            values[t, n] = v
    if not seen.all():
        t, n = np.argwhere(~seen)[0]
        raise LoadError(f"{vpath}: missing value for (t={t}, node={n})")

    acc_ids = np.zeros((n_steps, n_nodes), dtype=np.int64)
    reg_ids = np.zeros((n_steps, n_nodes), dtype=np.int64)
    vocabs = {"acc": [str(s) for s in meta["acc_vocab"]],
              "reg": [str(s) for s in meta["reg_vocab"]]}
    ipath = paths[INCIDENTS_FILE]
    with open(ipath, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "node", "kind", "code"]:
            raise _load_error(ipath, 1, f"expected header t,node,kind,code, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise _load_error(ipath, line_no, f"expected 4 fields, got {len(row)}")
            try:
                t, n, kind, code = int(row[0]), int(row[1]), row[2], int(row[3])
            except ValueError as exc:
                raise _load_error(ipath, line_no, f"malformed row: {exc}") from exc
            if kind not in ("acc", "reg"):
                raise _load_error(ipath, line_no, f"kind must be acc or reg, got '{kind}'")
            if not (0 <= t < n_steps and 0 <= n < n_nodes):
                raise _load_error(ipath, line_no, f"(t={t}, node={n}) out of range")
            if not (1 <= code < len(vocabs[kind])):
                raise _load_error(
                    ipath, line_no,
                    f"{kind} code {code} outside vocabulary of size {len(vocabs[kind])}")
            target = acc_ids if kind == "acc" else reg_ids
            target[t, n] = code

    edges = []
    apath = paths[ADJACENCY_FILE]
    with open(apath, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst", "weight"]:
            raise _load_error(apath, 1, f"expected header src,dst,weight, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise _load_error(apath, line_no, f"expected 3 fields, got {len(row)}")
            try:
                edges.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise _load_error(apath, line_no, f"malformed row: {exc}") from exc
    try:
        graph = GraphSpec(n_nodes=n_nodes, edges=tuple(edges))
    except ValidationError as exc:
        raise LoadError(f"{apath}: {exc}") from exc

    try:
        return DatasetBundle(
            values=values, acc_ids=acc_ids, reg_ids=reg_ids, graph=graph,
            interval_minutes=interval,
            start_weekday=int(meta["start_weekday"]),
            start_slot=int(meta["start_slot"]),
            acc_vocab=tuple(vocabs["acc"]), reg_vocab=tuple(vocabs["reg"]))
    except ValidationError as exc:
        raise LoadError(f"{data_dir}: {exc}") from exc


# -- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic incident-aware traffic generator."""

    n_nodes: int = 30
    days: int = 14
    interval_minutes: int = 5
    topology: str = "ring"
    incident_rate: float = 0.2      # expected accidents per node per day
    regulation_rate: float = 0.0    # expected regulations per node per day
    drop_factor: float = 0.45       # speed multiplier at the accident source
    cap_fraction: float = 0.6       # speed ceiling fraction under regulation
    decay_hops: int = 2
    attenuation: float = 0.5        # per-hop impact falloff
    duration_steps: int = 12
    recovery_steps: int = 12
    base_speed: float = 60.0
    daily_amplitude: float = 18.0
    node_offset_scale: float = 4.0
    noise_scale: float = 1.0
    start_weekday: int = 0
    start_slot: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(
                f"unknown topology '{self.topology}', expected one of {TOPOLOGIES}")
        if self.n_nodes < 1 or self.days < 1:
            raise ConfigError("n_nodes and days must be >= 1")
        if self.interval_minutes < 1 or 1440 % self.interval_minutes != 0:
            raise ConfigError(
                f"interval_minutes must divide 1440, got {self.interval_minutes}")
        if not 0.0 < self.drop_factor <= 1.0 or not 0.0 < self.cap_fraction <= 1.0:
            raise ConfigError("drop_factor and cap_fraction must be in (0, 1]")


def _ring_graph(n: int) -> GraphSpec:
    edges = []
    for i in range(n):
        j = (i + 1) % n
        if i != j:
            edges.append((i, j, 1.0))
            edges.append((j, i, 1.0))
    return GraphSpec(n_nodes=n, edges=tuple(dict.fromkeys(edges)))


def _grid_graph(n: int) -> GraphSpec:
    rows = int(math.isqrt(n))
    while rows > 1 and n % rows != 0:
        rows -= 1
    cols = n // rows
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges += [(i, i + 1, 1.0), (i + 1, i, 1.0)]
            if r + 1 < rows:
                edges += [(i, i + cols, 1.0), (i + cols, i, 1.0)]
    return GraphSpec(n_nodes=n, edges=tuple(edges))


def _random_geometric_graph(n: int, rng: np.random.Generator) -> GraphSpec:
    pts = rng.random((n, 2))
    radius = 1.3 * math.sqrt(2.0 / max(n, 2))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(pts[i] - pts[j])) <= radius:
                edges += [(i, j, 1.0), (j, i, 1.0)]
    return GraphSpec(n_nodes=n, edges=tuple(edges))


def build_topology(name: str, n_nodes: int, rng: np.random.Generator) -> GraphSpec:
    if name == "ring":
        return _ring_graph(n_nodes)
    if name == "grid":
        return _grid_graph(n_nodes)
    if name == "random-geometric":
        return _random_geometric_graph(n_nodes, rng)
    raise ConfigError(f"unknown topology '{name}'")


def _incident_footprint(graph: GraphSpec, source: int, decay_hops: int,
                        attenuation: float) -> np.ndarray:
    """Per-node impact weights: 1 at the source, attenuated per hop outward.

    Spread follows the propagation operator so the footprint matches what the
    model's graph propagation can see.
    """
    op = normalize_adjacency(graph, add_self_loops=True).matrix
    impact = np.zeros(graph.n_nodes)
    impact[source] = 1.0
    footprint = impact.copy()
    for _ in range(decay_hops):
        impact = attenuation * (op.T @ impact)
        footprint = np.maximum(footprint, impact)
    return footprint


def _event_profile(length: int, t0: int, duration: int, recovery: int) -> np.ndarray:
    """Temporal intensity: 1 during the event, then linear recovery to 0."""
    profile = np.zeros(length)
    end = min(t0 + duration, length)
    profile[t0:end] = 1.0
    for j in range(recovery):
        t = t0 + duration + j
        if t >= length:
            break
        profile[t] = 1.0 - (j + 1) / (recovery + 1)
    return profile


def synth_generate(gen: SynthConfig, seed: int) -> DatasetBundle:
    """Deterministic synthetic bundle: daily sinusoid plus injected incidents.

    Accidents multiply speeds by ``drop_factor`` at the source, attenuated
    per hop over the footprint, recovering linearly. Regulations cap speeds
    at a fraction of the node's base curve over the same kind of footprint.
    """
    rng = np.random.default_rng(seed)
    graph_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    n = gen.n_nodes
    steps_per_day = 1440 // gen.interval_minutes
    t_total = gen.days * steps_per_day
    graph = build_topology(gen.topology, n, graph_rng)

    node_offset = rng.normal(0.0, gen.node_offset_scale, size=n)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    tod = np.arange(t_total) % steps_per_day
    angle = 2.0 * np.pi * tod[:, None] / steps_per_day + phase[None, :]
    base = gen.base_speed + node_offset[None, :] - gen.daily_amplitude * np.sin(angle)
    values = base + rng.normal(0.0, gen.noise_scale, size=(t_total, n))

    acc_ids = np.zeros((t_total, n), dtype=np.int64)
    reg_ids = np.zeros((t_total, n), dtype=np.int64)
    acc_vocab = ("none", "minor", "major")
    reg_vocab = ("none", "lane-restriction")

    events = []
    for kind, rate in (("acc", gen.incident_rate), ("reg", gen.regulation_rate)):
        n_events = rng.poisson(rate * gen.days, size=n)
        for node in range(n):
            for _ in range(n_events[node]):
                t0 = int(rng.integers(0, max(1, t_total - gen.duration_steps)))
                severity = int(rng.integers(1, 3)) if kind == "acc" else 1
                events.append((kind, node, t0, severity))
    # Fixed ordering keeps the bundle independent of dict/set iteration.
    events.sort()

    for kind, node, t0, severity in events:
        footprint = _incident_footprint(graph, node, gen.decay_hops, gen.attenuation)
        # Major accidents (severity 2) hit harder and linger longer, so the
        # severity code carries information the speed values alone cannot.
        duration = gen.duration_steps if severity == 1 else gen.duration_steps * 2
        profile = _event_profile(t_total, t0, duration, gen.recovery_steps)
        effect = profile[:, None] * footprint[None, :]
        if kind == "acc":
            drop = gen.drop_factor if severity == 1 else gen.drop_factor * 0.7
            values *= 1.0 - (1.0 - drop) * effect
            marked = effect >= 0.05
            acc_ids[marked] = np.maximum(acc_ids[marked], severity)
        else:
            cap = base * (gen.cap_fraction + (1.0 - gen.cap_fraction) * (1.0 - effect))
            values = np.minimum(values, np.where(effect > 0, cap, np.inf))
            marked = effect >= 0.05
            reg_ids[marked] = np.maximum(reg_ids[marked], severity)

    values = np.maximum(values, 0.5)

    return DatasetBundle(
        values=values, acc_ids=acc_ids, reg_ids=reg_ids, graph=graph,
        interval_minutes=gen.interval_minutes, start_weekday=gen.start_weekday,
        start_slot=gen.start_slot, acc_vocab=acc_vocab, reg_vocab=reg_vocab)
