"""Training objectives: CTC plus the router auxiliary losses.

The recognition loss is connectionist temporal classification computed in
log space. Router regularizers operate on the per-layer RouterRecord
probabilities: a balancing penalty on dispatch/probability mass, an L1
sparsity pressure on normalized distributions, and a mean-importance
penalty. ``combine`` assembles the weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError
from .layers import RouterRecord
from .tensor import Tensor

LOSS_MODES = ("balancing", "balancing+l1", "importance+l1")
LAYER_REDUCES = ("mean", "sum")


@dataclass
class LossWeights:
    """Scales of the auxiliary terms in the total loss.

    alpha scales the L1 sparsity term, beta the importance (or balancing)
    term, gamma the embedding-network CTC term.
    """
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if v < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {v}")


@dataclass
class LossBreakdown:
    """One utterance's loss terms; absent terms are None.

    total = recognition + alpha*sparsity + beta*(importance and/or
    balancing) + gamma*embedding, over the terms present.
    """
    recognition: Tensor
    total: Tensor
    sparsity: Tensor | None = None
    importance: Tensor | None = None
    balancing: Tensor | None = None
    embedding: Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        def val(t):
            return float(t.data) if t is not None else 0.0
        return {
            "total": val(self.total),
            "recognition": val(self.recognition),
            "sparsity": val(self.sparsity),
            "importance": val(self.importance),
            "balancing": val(self.balancing),
            "embedding": val(self.embedding),
        }


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """Negative log probability of all label paths collapsing to target.

    ``log_probs`` is (T, V) of per-frame log-probabilities (log-softmax
    rows; normalization is the caller's contract). The target is expanded
    with interleaved blanks and scored by the standard forward recursion,
    all in log space. The result is differentiable with respect to
    ``log_probs``.

    A target that cannot be emitted in T frames (too long, or repeats
    needing separator blanks) yields a detached +inf tensor: callers must
    test ``np.isinf(loss.data)`` before calling backward.
    """
    if log_probs.data.ndim != 2:
        raise DimensionError(
            f"ctc_loss needs (T, V) log-probs, got {log_probs.shape}")
    t_len, vocab = log_probs.shape
    if t_len < 1:
        raise ContractError("ctc_loss needs at least one frame")
    if not 0 <= blank < vocab:
        raise ContractError(f"blank {blank} outside vocab of size {vocab}")
    tgt = np.asarray(list(target), dtype=np.int64)
    if tgt.size:
        if tgt.min() < 0 or tgt.max() >= vocab:
            raise ContractError(
                f"target labels must lie in [0, {vocab}), got {tgt.tolist()}")
        if (tgt == blank).any():
            raise ContractError("target labels must not contain the blank")

    # Blank-interleaved label sequence: ^ a ^ b ^ ... ^
    s_len = 2 * tgt.size + 1
    ext = np.full(s_len, blank, dtype=np.int64)
    ext[1::2] = tgt
    # skip_ok[s]: a path may jump s-2 -> s, skipping the blank between two
    # distinct labels.
    skip_ok = np.zeros(s_len, dtype=bool)
    for s in range(2, s_len):
        skip_ok[s] = ext[s] != blank and ext[s] != ext[s - 2]

    lp = log_probs.data
    neg = -np.inf
    emit = lp[:, ext]  # (T, S): log prob of emitting ext[s] at frame t

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([neg], prev[:-1]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate(([neg, neg], prev[:-2]))
            acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + emit[t]

    if s_len > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]
    if np.isneginf(log_p):
        return Tensor(np.inf)

    # beta[t, s]: log prob of emitting frames t+1..T-1 from state s, not
    # counting the emission at t itself.
    beta = np.full((t_len, s_len), neg)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [neg]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate((nxt[2:], [neg, neg]))
            can = np.concatenate((skip_ok[2:], [False, False]))
            acc = np.where(can, np.logaddexp(acc, skip), acc)
        beta[t] = acc

    # d(-log P)/d lp[t, k] = -sum over states s labeled k of
    # exp(alpha[t,s] + beta[t,s] - log P).
    ab = alpha + beta - log_p
    grad = np.zeros_like(lp)
    for s in range(s_len):
        grad[:, ext[s]] -= np.exp(ab[:, s])

    out = Tensor(-log_p, _parents=(log_probs,))

    def rule(g):
        if log_probs.requires_grad:
            log_probs._accumulate(float(g) * grad)

    out._rule = rule
    return out


def _check_records(records: Sequence[RouterRecord],
                   layer_reduce: str) -> None:
    if not records:
        raise ContractError("need at least one routed layer's record")
    if layer_reduce not in LAYER_REDUCES:
        raise ConfigError(f"layer_reduce must be one of {LAYER_REDUCES}, "
                          f"got {layer_reduce!r}")
    for rec in records:
        if rec.frames < 1:
            raise ContractError("router record has no frames")


def _reduce_layers(terms: list[Tensor], layer_reduce: str) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = tt.add(total, t)
    if layer_reduce == "mean":
        total = tt.mul(total, Tensor(1.0 / len(terms)))
    return total


def balancing_loss(records: Sequence[RouterRecord],
                   layer_reduce: str = "mean") -> Tensor:
    """Dispatch-balance penalty: per layer, n * sum_i s_i * P_i.

    s_i is the fraction of frames dispatched to expert i, held constant
    (dispatch is not differentiable); P_i is the mean router probability of
    expert i, which carries the gradient. Equals 1 under exact uniformity
    of both and n at full collapse.
    """
    _check_records(records, layer_reduce)
    terms = []
    for rec in records:
        n = rec.n_experts
        s = np.bincount(rec.selected, minlength=n) / rec.frames
        p_mean = tt.reduce_mean(rec.probs, axis=0)
        terms.append(tt.mul(tt.reduce_sum(tt.mul(p_mean, Tensor(s))),
                            Tensor(float(n))))
    return _reduce_layers(terms, layer_reduce)


def sparsity_l1_loss(records: Sequence[RouterRecord],
                     layer_reduce: str = "mean",
                     epsilon: float = 1e-12) -> Tensor:
    """Mean L1 norm of the unit-L2-normalized router distributions.

    For probability rows this lies in [1, sqrt(n)]: 1 exactly at one-hot
    rows, sqrt(n) at uniform ones, so minimizing it sharpens the router.
    """
    _check_records(records, layer_reduce)
    terms = []
    for rec in records:
        normed = tt.l2_normalize(rec.probs, axis=1, epsilon=epsilon)
        terms.append(tt.reduce_mean(tt.reduce_sum(normed, axis=1)))
    return _reduce_layers(terms, layer_reduce)


def mean_importance_loss(records: Sequence[RouterRecord],
                         layer_reduce: str = "mean") -> Tensor:
    """Importance penalty: n * sum_j Imp_j^2 with Imp_j the mean probability.

    Fully differentiable. Minimum 1 exactly when every expert's mean
    probability equals 1/n; maximum n when one expert takes all mass.
    """
    _check_records(records, layer_reduce)
    terms = []
    for rec in records:
        imp = tt.reduce_mean(rec.probs, axis=0)
        terms.append(tt.mul(tt.reduce_sum(tt.square(imp)),
                            Tensor(float(rec.n_experts))))
    return _reduce_layers(terms, layer_reduce)


def combine(recognition: Tensor, weights: LossWeights,
            sparsity: Tensor | None = None,
            importance: Tensor | None = None,
            balancing: Tensor | None = None,
            embedding: Tensor | None = None) -> LossBreakdown:
    """Weighted sum of the supplied terms.

    total = recognition + alpha*sparsity + beta*importance + beta*balancing
    + gamma*embedding, skipping absent terms entirely so their graphs are
    never touched.
    """
    total = recognition
    if sparsity is not None and weights.alpha != 0.0:
        total = tt.add(total, tt.mul(sparsity, Tensor(weights.alpha)))
    if importance is not None and weights.beta != 0.0:
        total = tt.add(total, tt.mul(importance, Tensor(weights.beta)))
    if balancing is not None and weights.beta != 0.0:
        total = tt.add(total, tt.mul(balancing, Tensor(weights.beta)))
    if embedding is not None and weights.gamma != 0.0:
        total = tt.add(total, tt.mul(embedding, Tensor(weights.gamma)))
    return LossBreakdown(recognition=recognition, total=total,
                         sparsity=sparsity, importance=importance,
                         balancing=balancing, embedding=embedding)


def utterance_loss(logits: Tensor, records: Sequence[RouterRecord],
                   emb_logits: Tensor | None, target: Sequence[int],
                   blank: int, weights: LossWeights, loss_mode: str,
                   layer_reduce: str = "mean") -> LossBreakdown:
    """Full training loss of one utterance from raw model outputs.

    Applies log-softmax to both output heads, computes CTC against the
    target, and adds the auxiliary terms selected by ``loss_mode``. If
    either CTC term is infinite (target unachievable) the breakdown's
    total is a detached +inf and no auxiliary graphs are built.
    """
    if loss_mode not in LOSS_MODES:
        raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, "
                          f"got {loss_mode!r}")
    rec_loss = ctc_loss(tt.log_softmax(logits, axis=1), target, blank)
    if np.isinf(rec_loss.data):
        return LossBreakdown(recognition=rec_loss, total=rec_loss)

    emb_loss = None
    if emb_logits is not None and weights.gamma != 0.0:
        emb_loss = ctc_loss(tt.log_softmax(emb_logits, axis=1), target, blank)
        if np.isinf(emb_loss.data):
            return LossBreakdown(recognition=rec_loss, total=emb_loss,
                                 embedding=emb_loss)

    sparsity = importance = balancing = None
    if records and records[0].n_experts > 1:
        if loss_mode in ("balancing+l1", "importance+l1") and weights.alpha != 0.0:
            sparsity = sparsity_l1_loss(records, layer_reduce)
        if loss_mode in ("balancing", "balancing+l1") and weights.beta != 0.0:
            balancing = balancing_loss(records, layer_reduce)
        if loss_mode == "importance+l1" and weights.beta != 0.0:
            importance = mean_importance_loss(records, layer_reduce)
    return combine(rec_loss, weights, sparsity=sparsity,
                   importance=importance, balancing=balancing,
                   embedding=emb_loss)
