"""Training loop, evaluation, and routing-statistics instrumentation.

Per-utterance forward passes are averaged into one scalar per batch, the
gradient is clipped by global norm, and Adam (or SGD) applies the step.
Validation tracks the recognition CTC loss alone so curves stay comparable
across loss configurations; the best-validation parameters are what the
run ultimately keeps. Every run is a pure function of (config, seed):
histories and checkpoints are bitwise reproducible.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tt
from .data import Batch, CmvnStats, Utterance, cmvn_fit, make_batches, \
    pipeline_features
from .errors import ConfigError, ContractError
from .layers import RouterRecord
from .losses import LossWeights, ctc_loss, utterance_loss
from .model import AcousticModel, save_checkpoint
from .tensor import Tensor

log = logging.getLogger("smoe.trainer")

HISTORY_HEADER = ("step,train_total,train_ctc,train_l1,train_imp,"
                  "train_balance,train_emb,valid_ctc,valid_ter")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    epochs: int = 5
    batch_frames: int = 2048
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 20
    clip_norm: float = 5.0
    warmup_steps: int = 0  # linear lr ramp from 0 over this many steps
    stack: int = 8
    rate: int = 3
    valid_every: int = 10  # every k-th utterance held out for validation

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, "
                              f"got {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0 when set, "
                              f"got {self.clip_norm}")
        if self.epochs < 1 or self.eval_every < 1 or self.valid_every < 2:
            raise ConfigError("epochs and eval_every must be >= 1, "
                              "valid_every >= 2")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, "
                              f"got {self.warmup_steps}")


class Optimizer:
    """Adam (bias-corrected) or momentum SGD over named parameters."""

    def __init__(self, params: list, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        lr = c.lr
        if c.warmup_steps > 0 and self.t <= c.warmup_steps:
            lr = c.lr * self.t / c.warmup_steps
        for name, p in self.params:
            g = grads[name]
            if c.optimizer == "adam":
                self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
                self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
                m_hat = self.m[name] / (1 - c.beta1 ** self.t)
                v_hat = self.v[name] / (1 - c.beta2 ** self.t)
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + c.eps)
            else:
                self.m[name] = c.momentum * self.m[name] + g
                p.data = p.data - lr * self.m[name]


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


@dataclass
class LayerRouteStats:
    """Aggregated routing behaviour of one layer over a frame population."""
    load: np.ndarray  # fraction of frames dispatched to each expert
    mean_prob: np.ndarray  # mean router probability per expert
    sparsity: float  # mean L1 norm of L2-normalized probability rows
    entropy: float  # mean Shannon entropy (nats) of probability rows
    mean_gate: float  # mean probability of the selected expert
    frames: int

    @property
    def importance(self) -> np.ndarray:
        # mean importance per expert coincides with the mean probability
        return self.mean_prob

    def as_dict(self) -> dict:
        return {
            "load": [float(x) for x in self.load],
            "mean_prob": [float(x) for x in self.mean_prob],
            "importance": [float(x) for x in self.importance],
            "sparsity": float(self.sparsity),
            "entropy": float(self.entropy),
            "mean_gate": float(self.mean_gate),
            "frames": int(self.frames),
        }


@dataclass
class RouteStats:
    layers: list[LayerRouteStats]


def collect_route_stats(records: Sequence[Sequence[RouterRecord]]) -> RouteStats:
    """Aggregate per-utterance router records into per-layer statistics.

    ``records[u][l]`` is utterance u's record for layer l, exactly as
    forward_utterance returns them. Only real frames ever enter records,
    so padding cannot skew any statistic.
    """
    if not records or not records[0]:
        raise ContractError("need records from at least one utterance")
    n_layers = len(records[0])
    layers = []
    for layer in range(n_layers):
        probs = np.concatenate([np.asarray(r[layer].probs.data)
                                for r in records])
        selected = np.concatenate([r[layer].selected for r in records])
        frames, n = probs.shape
        load = np.bincount(selected, minlength=n) / frames
        norms = np.maximum(np.sqrt((probs * probs).sum(axis=1)), 1e-12)
        sparsity = float((probs.sum(axis=1) / norms).mean())
        plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)),
                         0.0)
        entropy = float(-plogp.sum(axis=1).mean())
        gate = probs[np.arange(frames), selected]
        layers.append(LayerRouteStats(load=load, mean_prob=probs.mean(axis=0),
                                      sparsity=sparsity, entropy=entropy,
                                      mean_gate=float(gate.mean()),
                                      frames=frames))
    return RouteStats(layers=layers)


def greedy_decode(logits: np.ndarray, blank: int) -> np.ndarray:
    """Frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(logits, axis=1)
    out = []
    prev = -1
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return np.asarray(out, dtype=np.int64)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class EvalReport:
    mean_ctc: float
    ter: float
    route_stats: RouteStats | None
    skipped: int


def evaluate(model: AcousticModel, corpus: list[Utterance], stats: CmvnStats,
             stack: int = 8, rate: int = 3) -> EvalReport:
    """Mean recognition CTC loss, greedy token error rate, routing stats.

    The token error rate pools edit distance over the corpus: total edits
    divided by total reference labels. Utterances whose target cannot be
    emitted in their frame budget are skipped from the CTC mean but still
    decoded and scored.
    """
    if not corpus:
        raise ContractError("evaluate needs a non-empty corpus")
    blank = model.cfg.blank
    losses = []
    edits = 0
    ref_len = 0
    skipped = 0
    all_records = []
    for utt in corpus:
        feats = pipeline_features(utt.features, stats, stack, rate)
        logits, records, _ = model.forward_utterance(feats)
        all_records.append(records)
        loss = ctc_loss(tt.log_softmax(logits, axis=1), utt.labels, blank)
        if np.isinf(loss.data):
            skipped += 1
        else:
            losses.append(float(loss.data))
        hyp = greedy_decode(logits.data, blank)
        edits += edit_distance(hyp.tolist(), utt.labels.tolist())
        ref_len += max(1, utt.labels.size)
    route = collect_route_stats(all_records) if all_records[0] else None
    mean_ctc = float(np.mean(losses)) if losses else float("inf")
    return EvalReport(mean_ctc=mean_ctc, ter=edits / ref_len,
                      route_stats=route, skipped=skipped)


@dataclass
class TrainResult:
    history: list[dict]
    best_step: int
    best_valid_ctc: float
    final_valid_ctc: float
    skipped_utterances: int
    aborted: bool
    steps: int
    checkpoint_path: str | None = None
    history_path: str | None = None
    route_stats_path: str | None = None


def split_corpus(corpus: list[Utterance],
                 valid_every: int) -> tuple[list[Utterance], list[Utterance]]:
    """Hold out every valid_every-th utterance (by position) for validation."""
    train = [u for i, u in enumerate(corpus) if i % valid_every != 0]
    valid = [u for i, u in enumerate(corpus) if i % valid_every == 0]
    return train, valid


def _history_row(step, means, valid_ctc, valid_ter) -> dict:
    return {
        "step": step,
        "train_total": means.get("total", 0.0),
        "train_ctc": means.get("recognition", 0.0),
        "train_l1": means.get("sparsity", 0.0),
        "train_imp": means.get("importance", 0.0),
        "train_balance": means.get("balancing", 0.0),
        "train_emb": means.get("embedding", 0.0),
        "valid_ctc": valid_ctc,
        "valid_ter": valid_ter,
    }


def _format_row(row: dict) -> str:
    keys = HISTORY_HEADER.split(",")
    return ",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                    for k in keys)


def train(model: AcousticModel, corpus: list[Utterance], cfg: TrainConfig,
          out_dir: str | None = None) -> TrainResult:
    """Optimize the model on the corpus; returns it holding the best-
    validation parameters.

    The corpus is split positionally into train/validation, CMVN is fitted
    on the training portion, and training walks seed-shuffled batches for
    the configured epochs. Every eval period the validation CTC loss and
    token error rate are recorded together with per-layer routing
    statistics; the parameters achieving the lowest validation CTC are
    kept (and checkpointed when an output directory is given). A
    non-finite training loss aborts the run, retaining the best state
    reached so far.
    """
    if not corpus:
        raise ContractError("train needs a non-empty corpus")
    train_utts, valid_utts = split_corpus(corpus, cfg.valid_every)
    if not train_utts or not valid_utts:
        raise ContractError(
            f"corpus of {len(corpus)} utterances leaves an empty split "
            f"at valid_every={cfg.valid_every}")
    stats = cmvn_fit(train_utts)
    batches = make_batches(train_utts, stats, cfg.batch_frames,
                           cfg.stack, cfg.rate)
    params = model.parameters()
    opt = Optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    blank = model.cfg.blank

    history: list[dict] = []
    hist_f = stats_f = None
    ckpt_path = hist_path = route_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "best.ckpt")
        hist_path = os.path.join(out_dir, "history.csv")
        route_path = os.path.join(out_dir, "route_stats.jsonl")
        hist_f = open(hist_path, "w", encoding="utf-8")
        hist_f.write(HISTORY_HEADER + "\n")
        stats_f = open(route_path, "w", encoding="utf-8")

    best_step = -1
    best_valid = float("inf")
    best_params = {name: p.data.copy() for name, p in params}
    final_valid = float("inf")
    final_ter = 1.0
    skipped_total = 0
    aborted = False
    step = 0
    term_sums: dict[str, float] = {}
    term_count = 0

    def run_eval() -> None:
        nonlocal best_step, best_valid, best_params, final_valid, final_ter
        report = evaluate(model, valid_utts, stats, cfg.stack, cfg.rate)
        final_valid, final_ter = report.mean_ctc, report.ter
        means = {k: v / max(1, term_count) for k, v in term_sums.items()}
        row = _history_row(step, means, report.mean_ctc, report.ter)
        history.append(row)
        if hist_f is not None:
            hist_f.write(_format_row(row) + "\n")
            hist_f.flush()
        if stats_f is not None and report.route_stats is not None:
            for li, layer in enumerate(report.route_stats.layers):
                rec = {"step": step, "layer": li, **layer.as_dict()}
                stats_f.write(json.dumps(rec, sort_keys=True) + "\n")
            stats_f.flush()
        if report.mean_ctc < best_valid:
            best_valid = report.mean_ctc
            best_step = step
            best_params = {name: p.data.copy() for name, p in params}
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path)
        term_sums.clear()

    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(batches))
            for bi in order:
                batch: Batch = batches[bi]
                losses = []
                for i in range(batch.size):
                    logits, records, emb_logits = model.forward_utterance(
                        batch.utterance_features(i))
                    bd = utterance_loss(
                        logits, records, emb_logits, batch.labels[i], blank,
                        cfg.weights, model.cfg.loss_mode,
                        model.cfg.aux_layer_reduce)
                    if np.isinf(bd.total.data):
                        skipped_total += 1
                        log.warning(
                            "skipping %s: target of %d labels cannot be "
                            "emitted in %d frames",
                            batch.ids[i], batch.label_lengths[i],
                            batch.feature_lengths[i])
                        continue
                    losses.append(bd)
                if not losses:
                    continue
                total = losses[0].total
                for bd in losses[1:]:
                    total = tt.add(total, bd.total)
                total = tt.mul(total, Tensor(1.0 / len(losses)))
                if not np.isfinite(total.data):
                    log.error("non-finite loss at step %d; aborting", step)
                    aborted = True
                    raise StopIteration
                for bd in losses:
                    for k, v in bd.as_floats().items():
                        term_sums[k] = term_sums.get(k, 0.0) + v / len(losses)
                term_count += 1
                model.zero_grad()
                total.backward()
                grads = {name: (p.grad if p.grad is not None
                                else np.zeros_like(p.data))
                         for name, p in params}
                if cfg.clip_norm is not None:
                    clip_global_norm(grads, cfg.clip_norm)
                opt.step(grads)
                step += 1
                if step % cfg.eval_every == 0:
                    run_eval()
    except StopIteration:
        pass

    if not aborted and (step == 0 or step % cfg.eval_every != 0):
        run_eval()

    # leave the model holding its best parameters
    for name, p in params:
        p.data = best_params[name].copy()
    if hist_f is not None:
        hist_f.close()
    if stats_f is not None:
        stats_f.close()
    return TrainResult(history=history, best_step=best_step,
                       best_valid_ctc=best_valid, final_valid_ctc=final_valid,
                       skipped_utterances=skipped_total, aborted=aborted,
                       steps=step, checkpoint_path=ckpt_path,
                       history_path=hist_path, route_stats_path=route_path)
