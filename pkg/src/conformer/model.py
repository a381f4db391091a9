"""Full model assembly: configuration, parameter store, forward pass,
parameter accounting, FLOPs estimation, and checkpoint serialization."""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .attention import (AttentionProjections, conditional_qkv, fuse,
                        spatial_attention, temporal_attention)
from .conditioning import (ConditionFactors, FactorGenerator, compute_condition,
                           generate_factors, gln, modulated_residual)
from .embeddings import CalendarIndexer, EmbeddingTables, embed_all
from .errors import ConfigError, DimensionError, LoadError
from .graph import GraphSpec, PropagationOperator, normalize_adjacency

ABLATIONS = ("no-accident", "no-regulation", "no-alpha", "no-beta", "no-gamma",
             "no-spatial", "no-temporal", "plain-ln")

_MAGIC = b"CFMR1\n"


@dataclass(frozen=True)
class ConFormerConfig:
    """Static shape and behavior knobs for one model instance."""

    t_in: int = 12
    t_out: int = 12
    n_nodes: int = 1
    d_in: int = 1
    d_data: int = 16
    d_acc: int = 8
    d_reg: int = 8
    d_dow: int = 8
    d_tod: int = 8
    d_stae: int = 16
    d_model: int = 32
    k_hops: int = 2
    n_heads: int = 4
    n_layers: int = 1
    dropout: float = 0.1
    eps: float = 1e-5
    steps_per_day: int = 288
    start_weekday: int = 0
    start_slot: int = 0
    n_acc_codes: int = 2
    n_reg_codes: int = 2
    ablations: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if min(self.t_in, self.t_out, self.n_nodes) < 1:
            raise ConfigError("t_in, t_out and n_nodes must all be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.k_hops < 0:
            raise ConfigError(f"k_hops must be >= 0, got {self.k_hops}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))

    @property
    def cond_width(self) -> int:
        return (self.k_hops + 1) * self.d_model

    @property
    def embed_width(self) -> int:
        return (self.d_data + self.d_acc + self.d_reg + self.d_dow + self.d_tod
                + self.d_stae)

    def calendar(self) -> CalendarIndexer:
        return CalendarIndexer(self.steps_per_day, self.start_weekday, self.start_slot)

    def ablated(self, flag: str) -> bool:
        return flag in self.ablations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConFormerConfig":
        d = dict(d)
        d["ablations"] = tuple(d.get("ablations", ()))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ConFormerParams:
    """All learnable arrays, keyed by stable names in a fixed enumeration.

    The enumeration order is construction order and is the contract for
    parameter counting, gradient records, and checkpoint layout.
    """

    def __init__(self, cfg: ConFormerConfig, arrays: "OrderedDict[str, nm.Tensor]"):
        self.cfg = cfg
        self.arrays = arrays

    def __getitem__(self, name: str) -> nm.Tensor:
        return self.arrays[name]

    def entries(self) -> list[tuple[str, nm.Tensor]]:
        return list(self.arrays.items())

    def replace(self, updates: dict[str, np.ndarray]) -> None:
        """Swap in new values for the given names (tensors stay immutable)."""
        for name, values in updates.items():
            if name not in self.arrays:
                raise ConfigError(f"unknown parameter '{name}'")
            if tuple(values.shape) != self.arrays[name].shape:
                raise DimensionError(
                    f"parameter '{name}' shape {self.arrays[name].shape} cannot "
                    f"take values of shape {values.shape}")
            self.arrays[name] = nm.Tensor(values)

    def copy(self) -> "ConFormerParams":
        return ConFormerParams(self.cfg, OrderedDict(
            (k, nm.Tensor(v.data.copy())) for k, v in self.arrays.items()))

    def tables(self) -> EmbeddingTables:
        return EmbeddingTables(self.arrays, self.cfg.calendar())


def _affine(rng: np.random.Generator, n_in: int, n_out: int):
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_in, n_out))
    b = rng.uniform(-bound, bound, size=(n_out,))
    return w, b


def init_params(cfg: ConFormerConfig, seed: int = 0) -> ConFormerParams:
    """Fresh parameters; generator output heads start at exactly zero."""
    rng = np.random.default_rng(seed)
    d, c = cfg.d_model, cfg.cond_width
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    w, b = _affine(rng, cfg.d_in, cfg.d_data)
    arrays["embed.data_proj.w"], arrays["embed.data_proj.b"] = w, b
    arrays["embed.acc_table"] = rng.uniform(-0.1, 0.1, (cfg.n_acc_codes, cfg.d_acc))
    arrays["embed.reg_table"] = rng.uniform(-0.1, 0.1, (cfg.n_reg_codes, cfg.d_reg))
    arrays["embed.dow_table"] = rng.uniform(-0.1, 0.1, (7, cfg.d_dow))
    arrays["embed.tod_table"] = rng.uniform(-0.1, 0.1, (cfg.steps_per_day, cfg.d_tod))
    arrays["embed.adaptive"] = rng.uniform(-0.1, 0.1, (cfg.t_in, cfg.n_nodes, cfg.d_stae))
    w, b = _affine(rng, cfg.embed_width, d)
    arrays["embed.fuse.w"], arrays["embed.fuse.b"] = w, b

    for i in range(cfg.n_layers):
        for gen in ("gen_c", "gen_f"):
            w, b = _affine(rng, c, d)
            arrays[f"layer{i}.{gen}.hidden.w"], arrays[f"layer{i}.{gen}.hidden.b"] = w, b
            arrays[f"layer{i}.{gen}.out.w"] = np.zeros((d, 2 * d + 1))
            arrays[f"layer{i}.{gen}.out.b"] = np.zeros((2 * d + 1,))
        w, b = _affine(rng, d, d)
        arrays[f"layer{i}.attn.wq"], arrays[f"layer{i}.attn.bq"] = w, b
        w, b = _affine(rng, d + c, d)
        arrays[f"layer{i}.attn.wk"], arrays[f"layer{i}.attn.bk"] = w, b
        w, b = _affine(rng, d + c, d)
        arrays[f"layer{i}.attn.wv"], arrays[f"layer{i}.attn.bv"] = w, b
        w, b = _affine(rng, 2 * d, d)
        arrays[f"layer{i}.attn.fuse.w"], arrays[f"layer{i}.attn.fuse.b"] = w, b
        w, b = _affine(rng, d, 4 * d)
        arrays[f"layer{i}.ff.w1"], arrays[f"layer{i}.ff.b1"] = w, b
        w, b = _affine(rng, 4 * d, d)
        arrays[f"layer{i}.ff.w2"], arrays[f"layer{i}.ff.b2"] = w, b
        if cfg.ablated("plain-ln"):
            arrays[f"layer{i}.ln1.gamma"] = np.ones((d,))
            arrays[f"layer{i}.ln1.beta"] = np.zeros((d,))
            arrays[f"layer{i}.ln2.gamma"] = np.ones((d,))
            arrays[f"layer{i}.ln2.beta"] = np.zeros((d,))

    w, b = _affine(rng, cfg.t_in * d, cfg.t_out)
    arrays["readout.w"], arrays["readout.b"] = w, b

    tensors = OrderedDict((k, nm.Tensor(v)) for k, v in arrays.items())
    return ConFormerParams(cfg, tensors)


def count_params(params: ConFormerParams) -> int:
    """Exact number of scalar learnables in the flat enumeration."""
    return sum(t.size for _, t in params.entries())


def estimate_flops(cfg: ConFormerConfig, n_edges: int) -> int:
    """Printed-formula FLOPs: ``K|E|D + (T N^2 D + N T^2 D) + N T D^2``."""
    t, n, d = cfg.t_in, cfg.n_nodes, cfg.d_model
    return (cfg.k_hops * n_edges * d + (t * n * n * d + n * t * t * d)
            + n * t * d * d)


def _dropout(x: nm.Tensor, rate: float, rng: np.random.Generator | None) -> nm.Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * nm.Tensor(mask)


def _apply_factors(cfg: ConFormerConfig, f: ConditionFactors) -> ConditionFactors:
    """Rewrite the factor triplet according to active ablation flags."""
    gamma, beta, alpha = f.gamma, f.beta, f.alpha
    if cfg.ablated("no-gamma"):
        gamma = nm.Tensor(np.ones(gamma.shape))
    if cfg.ablated("no-beta"):
        beta = nm.Tensor(np.zeros(beta.shape))
    if cfg.ablated("no-alpha"):
        alpha = nm.Tensor(np.ones(alpha.shape))
    return ConditionFactors(gamma=gamma, beta=beta, alpha=alpha)


def _norm(cfg: ConFormerConfig, params: ConFormerParams, layer: int, which: int,
          x: nm.Tensor, f: ConditionFactors) -> nm.Tensor:
    if cfg.ablated("plain-ln"):
        static = ConditionFactors(
            gamma=params[f"layer{layer}.ln{which}.gamma"],
            beta=params[f"layer{layer}.ln{which}.beta"],
            alpha=f.alpha)
        return gln(x, static, cfg.eps)
    return gln(x, f, cfg.eps)


def forward(x, acc_ids, reg_ids, t0, graph: GraphSpec | PropagationOperator,
            params: ConFormerParams, cfg: ConFormerConfig,
            dropout_rng: np.random.Generator | None = None) -> nm.Tensor:
    """Full forward pass: embeddings, conditioned layers, horizon readout.

    Input ``x`` is ``[T, N, D_in]`` or batched ``[B, T, N, D_in]``; the output
    is ``[T', N, 1]`` (or ``[B, T', N, 1]``). Pass ``dropout_rng`` only during
    training; inference is deterministic.
    """
    x = nm.as_tensor(x)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [.., T, N, D_in], got {x.shape}")
    if x.shape[-3] != cfg.t_in or x.shape[-2] != cfg.n_nodes or x.shape[-1] != cfg.d_in:
        raise DimensionError(
            f"input window {x.shape} does not match config "
            f"(T={cfg.t_in}, N={cfg.n_nodes}, D_in={cfg.d_in})")
    op = graph if isinstance(graph, PropagationOperator) else normalize_adjacency(graph)
    if op.n_nodes != cfg.n_nodes:
        raise DimensionError(
            f"graph has {op.n_nodes} nodes, config expects {cfg.n_nodes}")

    acc_ids = np.asarray(acc_ids)
    reg_ids = np.asarray(reg_ids)
    if cfg.ablated("no-accident"):
        acc_ids = np.zeros_like(acc_ids)
    if cfg.ablated("no-regulation"):
        reg_ids = np.zeros_like(reg_ids)

    h = embed_all(x, acc_ids, reg_ids, t0, params.tables())

    for i in range(cfg.n_layers):
        x_c = compute_condition(h, op, cfg.k_hops)
        gen_c = FactorGenerator(params.arrays, f"layer{i}.gen_c", cfg.d_model)
        gen_f = FactorGenerator(params.arrays, f"layer{i}.gen_f", cfg.d_model)
        f_c = _apply_factors(cfg, generate_factors(x_c, gen_c))
        f_f = _apply_factors(cfg, generate_factors(x_c, gen_f))

        x_gln = _norm(cfg, params, i, 1, h, f_c)
        proj = AttentionProjections(params.arrays, f"layer{i}.attn")
        q, k, v = conditional_qkv(x_gln, x_c, proj)
        zeros = nm.Tensor(np.zeros(q.shape))
        x_sp = zeros if cfg.ablated("no-spatial") else spatial_attention(q, k, v, cfg.n_heads)
        x_te = zeros if cfg.ablated("no-temporal") else temporal_attention(q, k, v, cfg.n_heads)
        x_att = fuse(x_sp, x_te, proj.fuse_w, proj.fuse_b)
        x_att = _dropout(x_att, cfg.dropout, dropout_rng)
        x_res = modulated_residual(h, x_att, f_c.alpha)

        x_gln2 = _norm(cfg, params, i, 2, x_res, f_f)
        hidden = nm.gelu(nm.matmul(x_gln2, params[f"layer{i}.ff.w1"])
                         + params[f"layer{i}.ff.b1"])
        x_ff = nm.matmul(hidden, params[f"layer{i}.ff.w2"]) + params[f"layer{i}.ff.b2"]
        x_ff = _dropout(x_ff, cfg.dropout, dropout_rng)
        h = modulated_residual(x_res, x_ff, f_f.alpha)

    return readout(h, params, cfg, batched)


def readout(h: nm.Tensor, params: ConFormerParams, cfg: ConFormerConfig,
            batched: bool) -> nm.Tensor:
    """Per-node affine map from the flattened (T, D) embedding to T' scalars."""
    # [..., T, N, D] -> [..., N, T, D] -> [..., N, T*D] -> [..., N, T'] -> [..., T', N, 1]
    moved = nm.moveaxis(h, -3, -2)
    flat = nm.reshape(moved, moved.shape[:-2] + (cfg.t_in * cfg.d_model,))
    pred = nm.matmul(flat, params["readout.w"]) + params["readout.b"]
    pred = nm.moveaxis(pred, -1, -2)
    return nm.reshape(pred, pred.shape + (1,))


# -- checkpoint I/O -----------------------------------------------------------


def save_checkpoint(path, params: ConFormerParams, extra: dict | None = None) -> None:
    """Single-file checkpoint: JSON header then little-endian float64 arrays.

    Arrays are written flat in enumeration order, so the file is byte-stable
    for a given (config, parameter values, extra) triple.
    """
    header = {
        "config": params.cfg.to_dict(),
        "params": [[name, list(t.shape)] for name, t in params.entries()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in params.entries():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ConFormerParams, dict]:
    """Inverse of ``save_checkpoint``; validates shapes against the header."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(len(_MAGIC)) != _MAGIC:
        raise LoadError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", buf.read(8))
    try:
        header = json.loads(buf.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint header: {exc}") from exc
    cfg = ConFormerConfig.from_dict(header["config"])
    arrays: "OrderedDict[str, nm.Tensor]" = OrderedDict()
    for name, shape in header["params"]:
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise LoadError(f"{path}: truncated data for parameter '{name}'")
        arrays[name] = nm.Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
    if buf.read(1):
        raise LoadError(f"{path}: trailing bytes after parameter data")
    params = ConFormerParams(cfg, arrays)
    expected = [(name, t.shape) for name, t in init_params(cfg, seed=0).entries()]
    if [(name, t.shape) for name, t in params.entries()] != expected:
        raise LoadError(f"{path}: parameter enumeration does not match config")
    return params, header.get("extra", {})
