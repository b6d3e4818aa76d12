"""Building blocks of the routed acoustic model.

Expert feed-forward blocks, the top-1 router (plain or with a shared
embedding concatenated to its input), the routed layer itself, the
sequential memory block, multi-head self-attention, and the shared
embedding tower that feeds every router.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map x @ w + b on row vectors; bias optional."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Tensor(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = tt.matmul(x, self.w)
        if self.b is not None:
            y = tt.add(y, self.b)
        return y

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class ExpertFFN:
    """Two-layer feed-forward block: d -> hidden (ReLU) -> d.

    Output width equals input width so the block sits behind a residual
    connection. ``frames_processed`` counts rows seen by forward; the
    routing tests use it to verify that exactly one expert runs per frame.
    """

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.d = d
        self.hidden = hidden
        self.lin1 = Linear(d, hidden, rng)
        self.lin2 = Linear(hidden, d, rng)
        self.frames_processed = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d:
            raise DimensionError(
                f"expected frames of width {self.d}, got {x.shape}")
        self.frames_processed += x.shape[0]
        return self.lin2.forward(tt.relu(self.lin1.forward(x)))

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.lin1.parameters(f"{prefix}.lin1") + \
            self.lin2.parameters(f"{prefix}.lin2")


@dataclass
class RouterRecord:
    """Per-frame routing outcome for one layer.

    probs: (T, n) probability rows, differentiable.
    selected: (T,) expert index per frame, argmax with lowest-index ties.
    gate: (T,) probability of the selected expert, differentiable.
    """
    probs: Tensor
    selected: np.ndarray
    gate: Tensor

    @property
    def frames(self) -> int:
        return self.probs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


class Router:
    """Linear + softmax map from frame features to an expert distribution.

    In plain mode the input is the previous layer's output; in
    embedding-concat mode the shared embedding is concatenated in front of
    it, doubling the input width.
    """

    PLAIN = "plain"
    EMBEDDING_CONCAT = "embedding-concat"

    def __init__(self, d: int, n_experts: int, mode: str,
                 rng: np.random.Generator):
        if mode not in (self.PLAIN, self.EMBEDDING_CONCAT):
            raise ConfigError(f"unknown router mode {mode!r}")
        self.d = d
        self.n_experts = n_experts
        self.mode = mode
        in_dim = d if mode == self.PLAIN else 2 * d
        self.wr = Tensor(xavier_uniform(rng, in_dim, n_experts,
                                        (in_dim, n_experts)),
                         requires_grad=True)

    def route(self, o_prev: Tensor, e: Tensor | None = None) -> RouterRecord:
        if self.mode == self.PLAIN:
            if e is not None:
                raise ContractError("plain router takes no embedding input")
            inp = o_prev
        else:
            if e is None:
                raise ContractError(
                    "embedding-concat router requires the shared embedding")
            if e.shape[0] != o_prev.shape[0]:
                raise ContractError(
                    f"embedding frame count {e.shape[0]} != "
                    f"layer frame count {o_prev.shape[0]}")
            inp = tt.concat([e, o_prev], axis=1)
        probs = tt.softmax(tt.matmul(inp, self.wr), axis=1)
        selected = np.argmax(probs.data, axis=1)  # ties break to lowest index
        gate = tt.take_per_row(probs, selected)
        return RouterRecord(probs=probs, selected=selected, gate=gate)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.wr", self.wr)]


def moe_forward(experts: list[ExpertFFN], rec: RouterRecord,
                x: Tensor) -> Tensor:
    """Dispatch each frame to its selected expert and gate the output.

    Frames are grouped by expert so each expert runs once on its own rows;
    the results are reassembled in frame order and scaled by the gate. The
    selection itself is a constant, so the router only learns through the
    gate factor.
    """
    t = x.shape[0]
    if rec.frames != t:
        raise ContractError(
            f"router record covers {rec.frames} frames, input has {t}")
    if rec.selected.size and rec.selected.max() >= len(experts):
        raise ContractError(
            f"selected expert {int(rec.selected.max())} out of range "
            f"for {len(experts)} experts")

    order = []
    pieces = []
    for i, expert in enumerate(experts):
        idx = np.nonzero(rec.selected == i)[0]
        if idx.size == 0:
            continue
        order.append(idx)
        pieces.append(expert.forward(tt.gather_rows(x, idx)))
    perm = np.concatenate(order)
    inverse = np.argsort(perm, kind="stable")
    stacked = pieces[0] if len(pieces) == 1 else tt.concat(pieces, axis=0)
    return tt.scale_rows(tt.gather_rows(stacked, inverse), rec.gate)


class MemoryBlock:
    """Sequential memory block with strided look-back and look-ahead taps.

    m[t] = h[t] + sum_i a_i * h[t - back_stride*i] + sum_j c_j * h[t + ahead_stride*j]

    with per-dimension coefficient vectors and zero padding past the ends.
    Coefficients start at zero, so the block is an identity until trained.
    """

    def __init__(self, d: int, back_order: int = 5, ahead_order: int = 1,
                 back_stride: int = 2, ahead_stride: int = 1):
        self.d = d
        self.back_stride = back_stride
        self.ahead_stride = ahead_stride
        self.back = [Tensor(np.zeros(d), requires_grad=True)
                     for _ in range(back_order)]
        self.ahead = [Tensor(np.zeros(d), requires_grad=True)
                      for _ in range(ahead_order)]

    def forward(self, h: Tensor) -> Tensor:
        m = h
        for i, a in enumerate(self.back, start=1):
            m = tt.add(m, tt.mul(tt.shift_rows(h, i * self.back_stride), a))
        for j, c in enumerate(self.ahead, start=1):
            m = tt.add(m, tt.mul(tt.shift_rows(h, -j * self.ahead_stride), c))
        return m

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.back{i}", a) for i, a in enumerate(self.back, 1)]
        out += [(f"{prefix}.ahead{j}", c) for j, c in enumerate(self.ahead, 1)]
        return out


class MultiHeadAttention:
    """Full-sequence (non-causal) scaled dot-product attention, bias-free."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.wq = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)
        self.wk = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)
        self.wv = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)
        self.wo = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        q = tt.matmul(x, self.wq)
        k = tt.matmul(x, self.wk)
        v = tt.matmul(x, self.wv)
        scale = 1.0 / np.sqrt(self.head_dim)
        ctx = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = tt.slice_cols(q, lo, hi)
            kh = tt.slice_cols(k, lo, hi)
            vh = tt.slice_cols(v, lo, hi)
            scores = tt.mul(tt.matmul(qh, tt.transpose(kh)), Tensor(scale))
            ctx.append(tt.matmul(tt.softmax(scores, axis=1), vh))
        merged = ctx[0] if len(ctx) == 1 else tt.concat(ctx, axis=1)
        return tt.matmul(merged, self.wo)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo)]


class EmbeddingNetwork:
    """Static tower producing the shared routing embedding.

    Mirrors the backbone layer pattern (feed-forward + memory pairs with
    attention inserted every ``attention_every`` pairs) but without routing.
    It consumes the projected input frames, returns the final hidden
    representation as the embedding, and exposes its own output head whose
    logits are trained with an auxiliary CTC loss.
    """

    def __init__(self, d: int, hidden: int, depth: int, heads: int,
                 attention_every: int, vocab: int, rng: np.random.Generator):
        self.depth = depth
        self.attention_every = attention_every
        self.ffns = [ExpertFFN(d, hidden, rng) for _ in range(depth)]
        self.memories = [MemoryBlock(d) for _ in range(depth)]
        n_attn = depth // attention_every if attention_every > 0 else 0
        self.attentions = [MultiHeadAttention(d, heads, rng)
                           for _ in range(n_attn)]
        self.head = Linear(d, vocab, rng)

    def forward(self, o0: Tensor) -> tuple[Tensor, Tensor]:
        o = o0
        attn_idx = 0
        for i in range(self.depth):
            o = tt.add(o, self.ffns[i].forward(o))
            o = self.memories[i].forward(o)
            if self.attention_every > 0 and (i + 1) % self.attention_every == 0 \
                    and attn_idx < len(self.attentions):
                o = tt.add(o, self.attentions[attn_idx].forward(o))
                attn_idx += 1
        return o, self.head.forward(o)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i in range(self.depth):
            out += self.ffns[i].parameters(f"{prefix}.pair{i:02d}.ffn")
            out += self.memories[i].parameters(f"{prefix}.pair{i:02d}.mem")
        for j, att in enumerate(self.attentions):
            out += att.parameters(f"{prefix}.attn{j}")
        out += self.head.parameters(f"{prefix}.head")
        return out
