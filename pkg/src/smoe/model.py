"""Model assembly, presets, the cost model, and checkpoints.

An acoustic model is an input projection, a stack of routed
feed-forward + memory pairs with periodic self-attention, an output head,
and (optionally) a static embedding tower whose per-frame output feeds
every router. ``count_params`` and ``count_flops`` price a configuration
by pure algebra, without instantiating any tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .layers import (EmbeddingNetwork, ExpertFFN, Linear, MemoryBlock,
                     MultiHeadAttention, Router, RouterRecord, moe_forward)
from .tensor import Tensor

FRAMES_PER_SECOND = 100.0 / 3.0  # post-subsampling rate: 100 fps / rate 3

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture description; every field is checkpointable JSON."""
    d: int = 32
    h_ffn: int = 64
    heads: int = 4
    n_experts: int = 4
    moe_layers: int = 4
    attention_every: int = 2
    input_dim: int = 128
    vocab: int = 8
    router_mode: str = Router.EMBEDDING_CONCAT
    loss_mode: str = "importance+l1"
    embedding_depth: int = 2
    aux_layer_reduce: str = "mean"
    preset: str = "custom"

    def __post_init__(self):
        bad = []
        if self.d < 1:
            bad.append(f"d={self.d} (need >= 1)")
        if self.h_ffn < 1:
            bad.append(f"h_ffn={self.h_ffn} (need >= 1)")
        if self.heads < 1 or (self.d >= 1 and self.d % self.heads != 0):
            bad.append(f"heads={self.heads} (need >= 1 and dividing d={self.d})")
        if self.n_experts < 1:
            bad.append(f"n_experts={self.n_experts} (need >= 1)")
        if self.moe_layers < 0:
            bad.append(f"moe_layers={self.moe_layers} (need >= 0)")
        if self.attention_every < 0:
            bad.append(f"attention_every={self.attention_every} (need >= 0)")
        if self.input_dim < 1:
            bad.append(f"input_dim={self.input_dim} (need >= 1)")
        if self.vocab < 2:
            bad.append(f"vocab={self.vocab} (need >= 2, including blank)")
        if self.router_mode not in (Router.PLAIN, Router.EMBEDDING_CONCAT):
            bad.append(f"router_mode={self.router_mode!r}")
        if self.loss_mode not in ("balancing", "balancing+l1", "importance+l1"):
            bad.append(f"loss_mode={self.loss_mode!r}")
        if self.embedding_depth < 0:
            bad.append(f"embedding_depth={self.embedding_depth} (need >= 0)")
        if self.router_mode == Router.EMBEDDING_CONCAT and self.embedding_depth < 1:
            bad.append("router_mode=embedding-concat requires embedding_depth >= 1")
        if self.aux_layer_reduce not in ("mean", "sum"):
            bad.append(f"aux_layer_reduce={self.aux_layer_reduce!r}")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))

    @property
    def blank(self) -> int:
        return self.vocab - 1

    @property
    def n_attention(self) -> int:
        if self.attention_every <= 0:
            return 0
        return self.moe_layers // self.attention_every

    @property
    def n_emb_attention(self) -> int:
        if self.attention_every <= 0 or self.embedding_depth <= 0:
            return 0
        return self.embedding_depth // self.attention_every

    @property
    def has_embedding_network(self) -> bool:
        return self.embedding_depth > 0 and self.router_mode == Router.EMBEDDING_CONCAT

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown model config fields: {unknown}")
        return cls(**raw)


# Full-scale rows share the wide geometry; desk rows shrink every extent so
# gradient checks and training fit in seconds. The b1 rows double the depth
# (and drop the routed machinery) to stay cost-matched with the routed rows.
_FULL = dict(d=512, h_ffn=1024, heads=8, moe_layers=30, attention_every=10,
             input_dim=960, vocab=1434, embedding_depth=30)
_DESK = dict(d=32, h_ffn=64, heads=4, moe_layers=4, attention_every=2,
             input_dim=128, vocab=8, embedding_depth=2)


def _rows(base: dict, depth_b1: int) -> dict[str, dict]:
    plain = dict(base, router_mode=Router.PLAIN, embedding_depth=0)
    emb = dict(base, router_mode=Router.EMBEDDING_CONCAT)
    return {
        "b1": dict(plain, n_experts=1, moe_layers=depth_b1,
                   loss_mode="balancing"),
        "b2": dict(plain, n_experts=4, loss_mode="balancing"),
        "moe-l1": dict(plain, n_experts=4, loss_mode="balancing+l1"),
        "moe-l1-emb": dict(emb, n_experts=4, loss_mode="balancing+l1"),
        "moe-imp": dict(emb, n_experts=4, loss_mode="importance+l1"),
        "moe-2e": dict(emb, n_experts=2, loss_mode="importance+l1"),
        "moe-4e": dict(emb, n_experts=4, loss_mode="importance+l1"),
        "moe-8e": dict(emb, n_experts=8, loss_mode="importance+l1"),
    }


PRESETS: dict[str, dict] = {}
PRESETS.update(_rows(_FULL, depth_b1=60))
PRESETS.update({f"desk-{k}": v for k, v in _rows(_DESK, depth_b1=8).items()})


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: "
                          + ", ".join(sorted(PRESETS)))
    merged = dict(PRESETS[name], preset=name)
    merged.update(overrides)
    return ModelConfig(**merged)


class AcousticModel:
    """Materialized network; use ``build`` to construct one."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.inproj = Linear(cfg.input_dim, d, rng, bias=False)
        self.routers: list[Router] = []
        self.expert_groups: list[list[ExpertFFN]] = []
        self.memories: list[MemoryBlock] = []
        for _ in range(cfg.moe_layers):
            self.routers.append(Router(d, cfg.n_experts, cfg.router_mode, rng))
            self.expert_groups.append(
                [ExpertFFN(d, cfg.h_ffn, rng) for _ in range(cfg.n_experts)])
            self.memories.append(MemoryBlock(d))
        self.attentions = [MultiHeadAttention(d, cfg.heads, rng)
                           for _ in range(cfg.n_attention)]
        self.head = Linear(d, cfg.vocab, rng)
        self.emb_net = None
        if cfg.has_embedding_network:
            self.emb_net = EmbeddingNetwork(d, cfg.h_ffn, cfg.embedding_depth,
                                            cfg.heads, cfg.attention_every,
                                            cfg.vocab, rng)

    def forward_utterance(self, features: np.ndarray) \
            -> tuple[Tensor, list[RouterRecord], Tensor | None]:
        """Run one utterance of stacked frames through the network.

        Returns frame-synchronous output logits, one RouterRecord per
        routed layer, and the embedding tower's logits when that tower
        exists (None otherwise).
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise DimensionError(
                f"expected (T, {self.cfg.input_dim}) features, got shapes "
                f"{x.shape}")
        if x.shape[0] < 1:
            raise ContractError("utterance must have at least one frame")
        o0 = self.inproj.forward(Tensor(x))
        emb = emb_logits = None
        if self.emb_net is not None:
            emb, emb_logits = self.emb_net.forward(o0)
        o = o0
        records = []
        attn_idx = 0
        for i in range(self.cfg.moe_layers):
            rec = self.routers[i].route(
                o, emb if self.routers[i].mode == Router.EMBEDDING_CONCAT else None)
            records.append(rec)
            o = tt.add(o, moe_forward(self.expert_groups[i], rec, o))
            o = self.memories[i].forward(o)
            if self.cfg.attention_every > 0 \
                    and (i + 1) % self.cfg.attention_every == 0 \
                    and attn_idx < len(self.attentions):
                o = tt.add(o, self.attentions[attn_idx].forward(o))
                attn_idx += 1
        return self.head.forward(o), records, emb_logits

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = self.inproj.parameters("inproj")
        for i in range(self.cfg.moe_layers):
            out += self.routers[i].parameters(f"pair{i:02d}.router")
            for j, ex in enumerate(self.expert_groups[i]):
                out += ex.parameters(f"pair{i:02d}.expert{j}")
            out += self.memories[i].parameters(f"pair{i:02d}.mem")
        for k, att in enumerate(self.attentions):
            out += att.parameters(f"attn{k}")
        out += self.head.parameters("head")
        if self.emb_net is not None:
            out += self.emb_net.parameters("emb")
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def reset_expert_counters(self) -> None:
        for group in self.expert_groups:
            for ex in group:
                ex.frames_processed = 0

    def param_total(self) -> int:
        return sum(p.size for _, p in self.parameters())


def build(cfg: ModelConfig, seed: int = 0) -> AcousticModel:
    """Materialize cfg with a deterministic seed-derived initialization."""
    return AcousticModel(cfg, seed)


@dataclass
class CostReport:
    """Cost-model output; breakdown maps component names to counts."""
    params: int | None = None
    flops_per_second: float | None = None
    breakdown: dict = field(default_factory=dict)

    def merged(self, other: "CostReport") -> "CostReport":
        out = CostReport(params=self.params if self.params is not None
                         else other.params,
                         flops_per_second=self.flops_per_second
                         if self.flops_per_second is not None
                         else other.flops_per_second)
        out.breakdown = {**self.breakdown, **other.breakdown}
        return out


def _pair_params(cfg: ModelConfig, n_experts: int, router_in: int | None) -> int:
    expert = cfg.d * cfg.h_ffn + cfg.h_ffn + cfg.h_ffn * cfg.d + cfg.d
    total = n_experts * expert + 6 * cfg.d  # experts + memory taps
    if router_in is not None:
        total += router_in * cfg.n_experts
    return total


def count_params(cfg: ModelConfig) -> CostReport:
    """Exact trainable-parameter total from the architecture algebra."""
    d, v = cfg.d, cfg.vocab
    router_in = d if cfg.router_mode == Router.PLAIN else 2 * d
    attn = 4 * d * d
    head = d * v + v
    parts = {
        "input_projection": cfg.input_dim * d,
        "routers": cfg.moe_layers * router_in * cfg.n_experts,
        "experts": cfg.moe_layers * cfg.n_experts
                   * (d * cfg.h_ffn + cfg.h_ffn + cfg.h_ffn * d + d),
        "memory": cfg.moe_layers * 6 * d,
        "attention": cfg.n_attention * attn,
        "output_head": head,
    }
    if cfg.has_embedding_network:
        parts["embedding_network"] = (
            cfg.embedding_depth
            * (d * cfg.h_ffn + cfg.h_ffn + cfg.h_ffn * d + d + 6 * d)
            + cfg.n_emb_attention * attn + head)
    total = sum(parts.values())
    return CostReport(params=total, breakdown={"params": dict(parts)})


def count_flops(cfg: ModelConfig, audio_seconds: float = 1.0,
                convention: str = "mac1",
                frames_per_second: float = FRAMES_PER_SECOND) -> CostReport:
    """Estimated operations to process the given duration of audio.

    Counts multiply-accumulates of the active path: the input projection,
    one expert per routed layer, the router products, the memory taps,
    attention at the reference utterance length, and the output head.
    Under mac1 one multiply-accumulate is one operation; mac2 doubles it.

    Headline figure: every preset with more than one expert is priced as
    the routed family's full inference pipeline, which includes a
    backbone-depth embedding tower feeding the routers, whether or not
    this particular configuration instantiates one. That keeps the figure
    comparable across the family (the routed rows differ only in expert
    count, which the active path does not see). The breakdown's
    ``executed_path`` entry prices exactly what this configuration runs.
    """
    if audio_seconds <= 0:
        raise ContractError(f"audio_seconds must be > 0, got {audio_seconds}")
    if convention not in ("mac1", "mac2"):
        raise ConfigError(f"convention must be mac1 or mac2, got {convention!r}")
    d, h = cfg.d, cfg.h_ffn
    frames = frames_per_second * audio_seconds
    t_ref = frames  # attention spans the reference utterance
    scale = 1.0 if convention == "mac1" else 2.0

    router_in = d if cfg.router_mode == Router.PLAIN else 2 * d
    ffn = d * h + h * d
    mem = 6 * d
    attn = 4 * d * d + 2 * t_ref * d
    per_frame = {
        "input_projection": float(cfg.input_dim * d),
        "routers": float(cfg.moe_layers * router_in * cfg.n_experts),
        "experts_active": float(cfg.moe_layers * ffn),
        "memory": float(cfg.moe_layers * mem),
        "attention": cfg.n_attention * attn,
        "output_head": float(d * cfg.vocab),
    }
    executed = sum(per_frame.values())
    if cfg.has_embedding_network:
        executed += cfg.embedding_depth * (ffn + mem) \
            + cfg.n_emb_attention * attn
    if cfg.n_experts > 1:
        # family convention: a backbone-depth static tower with the same
        # attention cadence as the backbone
        n_tower_attn = (cfg.moe_layers // cfg.attention_every
                        if cfg.attention_every > 0 else 0)
        per_frame["embedding_pipeline"] = (
            cfg.moe_layers * (ffn + mem) + n_tower_attn * attn)
    headline = sum(per_frame.values())

    breakdown = {"flops": {k: v * frames * scale for k, v in per_frame.items()}}
    breakdown["flops"]["executed_path"] = executed * frames * scale
    breakdown["frames"] = frames
    breakdown["convention"] = convention
    return CostReport(flops_per_second=headline * frames * scale / audio_seconds,
                      breakdown=breakdown)


def save_checkpoint(model: AcousticModel, path: str) -> None:
    """Write config, seed, and every named parameter block to one file."""
    params = model.parameters()
    cfg_bytes = model.cfg.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Iq", CHECKPOINT_VERSION, model.seed))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            for extent in p.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _ck_need(buf: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(buf):
        raise FormatError(
            f"truncated checkpoint: {what} needs {count} bytes but only "
            f"{len(buf) - offset} remain", offset=offset)
    return offset + count


def load_checkpoint(path: str) -> AcousticModel:
    """Rebuild the checkpointed model; parameters round-trip bit-exactly."""
    with open(path, "rb") as f:
        buf = f.read()
    off = _ck_need(buf, 0, 20, "header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}",
            offset=0)
    version, seed = struct.unpack_from("<Iq", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = struct.unpack_from("<I", buf, 16)
    off = _ck_need(buf, off, cfg_len, "config JSON")
    try:
        cfg = ModelConfig.from_json(buf[off - cfg_len:off].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"checkpoint config is not valid JSON: {e}",
                          offset=off - cfg_len) from e
    blocks_off = off
    off = _ck_need(buf, off, 4, "block count")
    (n_blocks,) = struct.unpack_from("<I", buf, blocks_off)

    model = build(cfg, seed)
    params = model.parameters()
    if n_blocks != len(params):
        raise FormatError(
            f"checkpoint has {n_blocks} parameter blocks, model defines "
            f"{len(params)}", offset=blocks_off)
    for name, p in params:
        start = off
        off = _ck_need(buf, off, 2, "block name length")
        (name_len,) = struct.unpack_from("<H", buf, start)
        off = _ck_need(buf, off, name_len, "block name")
        stored = buf[off - name_len:off].decode("utf-8")
        if stored != name:
            raise FormatError(
                f"parameter block {stored!r} where {name!r} was expected",
                offset=start)
        off = _ck_need(buf, off, 4, "rank")
        (ndim,) = struct.unpack_from("<I", buf, off - 4)
        off = _ck_need(buf, off, 4 * ndim, "shape")
        shape = struct.unpack_from(f"<{ndim}I", buf, off - 4 * ndim) \
            if ndim else ()
        if tuple(shape) != p.data.shape:
            raise FormatError(
                f"block {name!r} has shape {tuple(shape)}, model expects "
                f"{p.data.shape}", offset=start)
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data_off = off
        off = _ck_need(buf, off, 8 * count, f"block {name!r} data")
        p.data = np.frombuffer(buf, dtype="<f8", count=count,
                               offset=data_off).reshape(p.data.shape).copy()
    if off != len(buf):
        raise FormatError(
            f"{len(buf) - off} trailing bytes after the last block",
            offset=off)
    return model
