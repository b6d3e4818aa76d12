"""Command-line entry point.

Subcommands: train, eval, cost, gradcheck, route-stats, synth. Every
command prints a human-readable report by default or a single JSON object
with --json, is deterministic given its config and seed, and stamps
reports with a hash of the effective merged config. The SMOE_SEED
environment variable overrides any configured seed. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import tensor as tt
from .data import (SynthSpec, cmvn_fit, pipeline_features, read_features,
                   synth_corpus, write_features, write_manifest)
from .errors import ConfigError, SmoeError
from .layers import (ExpertFFN, MemoryBlock, MultiHeadAttention, Router,
                     moe_forward)
from .losses import LossWeights, ctc_loss, utterance_loss
from .model import (AcousticModel, ModelConfig, PRESETS, build, count_flops,
                    count_params, load_checkpoint, preset_config)
from .tensor import GradCheckReport, Tensor, grad_check
from .trainer import TrainConfig, collect_route_stats, evaluate, train


def _config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _resolve_seed(seed: int) -> int:
    env = os.environ.get("SMOE_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"SMOE_SEED must be an integer, got {env!r}")


def _emit(report: dict, as_json: bool, human_lines: list[str]) -> None:
    if as_json:
        print(json.dumps(report, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _dataclass_from(cls, raw: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown {where} fields: {unknown}")
    return cls(**raw)


def _load_corpus(data_cfg: dict):
    if "features" in data_cfg:
        path = data_cfg["features"]
        if not os.path.exists(path):
            raise ConfigError(f"data.features path does not exist: {path}")
        return read_features(path)
    if "synth" in data_cfg:
        spec = _dataclass_from(SynthSpec, data_cfg["synth"], "data.synth")
        return synth_corpus(spec)
    raise ConfigError("config needs data.features (a feature file path) "
                      "or data.synth (a synthesis spec)")


def cmd_train(args) -> int:
    doc = _load_config_file(args.config)
    preset = args.preset or doc.get("preset")
    if preset is None:
        raise ConfigError("config needs a preset (field preset or --preset)")
    out_dir = args.out or doc.get("out_dir")
    if out_dir is None:
        raise ConfigError("config needs an output directory "
                          "(field out_dir or --out)")
    data_cfg = dict(doc.get("data", {}))
    if args.features:
        data_cfg = {"features": args.features}

    train_raw = dict(doc.get("train", {}))
    for key in ("epochs", "lr", "eval_every", "batch_frames"):
        v = getattr(args, key)
        if v is not None:
            train_raw[key] = v
    weights_raw = dict(doc.get("weights", {}))
    train_raw["weights"] = _dataclass_from(LossWeights, weights_raw,
                                           "weights")
    seed = _resolve_seed(args.seed if args.seed is not None
                         else doc.get("seed", 0))
    train_raw["seed"] = seed
    tcfg = _dataclass_from(TrainConfig, train_raw, "train config")
    mcfg = preset_config(preset, **doc.get("model", {}))

    merged = {
        "preset": preset, "seed": seed, "out_dir": out_dir,
        "model": asdict(mcfg), "train": {**asdict(tcfg),
                                         "weights": asdict(tcfg.weights)},
        "data": data_cfg,
    }
    cfg_hash = _config_hash(merged)

    corpus = _load_corpus(data_cfg)
    if not corpus:
        raise ConfigError("data produced an empty corpus")
    max_label = max((int(u.labels.max()) for u in corpus if u.labels.size),
                    default=-1)
    if max_label >= mcfg.vocab - 1:
        raise ConfigError(
            f"corpus label {max_label} collides with blank: model.vocab "
            f"{mcfg.vocab} needs labels < {mcfg.vocab - 1}")
    dim = corpus[0].dim
    if dim * tcfg.stack != mcfg.input_dim:
        raise ConfigError(
            f"feature dim {dim} x stack {tcfg.stack} != model.input_dim "
            f"{mcfg.input_dim}")

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w",
              encoding="utf-8") as f:
        json.dump(merged, f, sort_keys=True, indent=2)
        f.write("\n")

    model = build(mcfg, seed)
    result = train(model, corpus, tcfg, out_dir)
    report = {
        "config_sha256": cfg_hash,
        "preset": preset,
        "seed": seed,
        "steps": result.steps,
        "best_step": result.best_step,
        "best_valid_ctc": result.best_valid_ctc,
        "final_valid_ctc": result.final_valid_ctc,
        "skipped_utterances": result.skipped_utterances,
        "aborted": result.aborted,
        "checkpoint": result.checkpoint_path,
        "history": result.history_path,
        "route_stats": result.route_stats_path,
    }
    _emit(report, args.json, [
        f"# train {preset} seed={seed} config={cfg_hash}",
        f"steps: {result.steps}  skipped: {result.skipped_utterances}"
        + ("  ABORTED" if result.aborted else ""),
        f"best valid ctc: {result.best_valid_ctc:.6f} at step "
        f"{result.best_step}",
        f"final valid ctc: {result.final_valid_ctc:.6f}",
        f"artifacts: {out_dir}",
    ])
    return 1 if result.aborted else 0


def cmd_cost(args) -> int:
    mcfg = preset_config(args.preset)
    params = count_params(mcfg)
    flops = count_flops(mcfg, audio_seconds=args.seconds,
                        convention=args.flop_convention)
    merged = params.merged(flops)
    report = {
        "config_sha256": _config_hash(asdict(mcfg)),
        "preset": args.preset,
        "params": merged.params,
        "flops_per_second": merged.flops_per_second,
        "seconds": args.seconds,
        "convention": args.flop_convention,
        "breakdown": merged.breakdown,
    }
    lines = [
        f"# cost {args.preset} config={report['config_sha256']}",
        f"params: {merged.params:,}",
        f"flops/sec ({args.flop_convention}, {args.seconds}s utterance): "
        f"{merged.flops_per_second:,.0f}",
        "param breakdown:",
    ]
    for k, v in merged.breakdown["params"].items():
        lines.append(f"  {k:24s} {v:>16,}")
    lines.append("flop breakdown (per configured duration):")
    for k, v in merged.breakdown["flops"].items():
        lines.append(f"  {k:24s} {v:>20,.0f}")
    _emit(report, args.json, lines)
    return 0


def _margin_ok(logits: np.ndarray, margin: float = 1e-3) -> bool:
    """True when every frame's top-2 logits are separated by margin."""
    if logits.shape[1] < 2:
        return True
    part = np.partition(logits, -2, axis=1)
    return bool(np.all(part[:, -1] - part[:, -2] > margin))


def gradcheck_suite(seed: int = 0, step: float = 1e-5,
                    tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """Finite-difference checks of every differentiable component.

    Covers the expert FFN, both router modes, a routed layer, the memory
    block, attention, CTC, and the full desk-preset composite loss.
    Routing inputs are redrawn until every frame's top-2 router logits are
    separated by a clear margin, so the finite-difference step cannot flip
    a selection.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, GradCheckReport] = {}

    d, h, n, t = 5, 7, 3, 4
    ffn = ExpertFFN(d, h, rng)
    x = Tensor(rng.normal(size=(t, d)), requires_grad=True)
    ffn_params = [p for _, p in ffn.parameters("ffn")] + [x]

    def ffn_loss(_):
        return tt.reduce_sum(tt.square(ffn.forward(x)))

    out["expert_ffn"] = grad_check(ffn_loss, ffn_params, step, tolerance)

    def routed_setup(mode):
        router = Router(d, n, mode, rng)
        while True:
            o = Tensor(rng.normal(size=(t, d)), requires_grad=True)
            e = Tensor(rng.normal(size=(t, d)), requires_grad=True)
            inp = o.data if mode == Router.PLAIN \
                else np.concatenate([e.data, o.data], axis=1)
            if _margin_ok(inp @ router.wr.data):
                return router, o, e

    router_p, o_p, _ = routed_setup(Router.PLAIN)

    def plain_loss(_):
        rec = router_p.route(o_p)
        return tt.add(tt.reduce_sum(tt.square(rec.probs)),
                      tt.reduce_sum(tt.square(rec.gate)))

    out["router_plain"] = grad_check(plain_loss, [router_p.wr, o_p],
                                     step, tolerance)

    router_e, o_e, e_e = routed_setup(Router.EMBEDDING_CONCAT)

    def emb_loss(_):
        rec = router_e.route(o_e, e_e)
        return tt.add(tt.reduce_sum(tt.square(rec.probs)),
                      tt.reduce_sum(tt.square(rec.gate)))

    out["router_embedding"] = grad_check(emb_loss, [router_e.wr, o_e, e_e],
                                         step, tolerance)

    router_m, o_m, _ = routed_setup(Router.PLAIN)
    experts = [ExpertFFN(d, h, rng) for _ in range(n)]
    moe_params = [router_m.wr, o_m]
    for i, ex in enumerate(experts):
        moe_params += [p for _, p in ex.parameters(f"e{i}")]

    def moe_loss(_):
        rec = router_m.route(o_m)
        return tt.reduce_sum(tt.square(moe_forward(experts, rec, o_m)))

    out["moe_layer"] = grad_check(moe_loss, moe_params, step, tolerance)

    mem = MemoryBlock(d)
    for v in mem.back + mem.ahead:
        v.data = rng.normal(size=v.data.shape) * 0.3
    xm = Tensor(rng.normal(size=(13, d)), requires_grad=True)
    mem_params = [p for _, p in mem.parameters("mem")] + [xm]

    def mem_loss(_):
        return tt.reduce_sum(tt.square(mem.forward(xm)))

    out["memory_block"] = grad_check(mem_loss, mem_params, step, tolerance)

    att = MultiHeadAttention(6, 2, rng)
    xa = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    att_params = [p for _, p in att.parameters("att")] + [xa]

    def att_loss(_):
        return tt.reduce_sum(tt.square(att.forward(xa)))

    out["attention"] = grad_check(att_loss, att_params, step, tolerance)

    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    target = [0, 2]

    def ctc(_):
        return ctc_loss(tt.log_softmax(logits, axis=1), target, blank=3)

    out["ctc"] = grad_check(ctc, logits, step, tolerance)

    mcfg = preset_config("desk-moe-4e")
    model = build(mcfg, seed)
    while True:
        feats = rng.normal(size=(6, mcfg.input_dim))
        _, records, _ = model.forward_utterance(feats)
        margins = []
        for rec in records:
            p = np.sort(rec.probs.data, axis=1)
            margins.append(float((p[:, -1] - p[:, -2]).min()))
        if min(margins) > 1e-3:
            break
    composite_target = [0, 1]
    weights = LossWeights()
    model_params = [p for _, p in model.parameters()]

    def composite(_):
        logits_, records_, emb_logits_ = model.forward_utterance(feats)
        bd = utterance_loss(logits_, records_, emb_logits_, composite_target,
                            mcfg.blank, weights, mcfg.loss_mode,
                            mcfg.aux_layer_reduce)
        return bd.total

    out["full_composite"] = grad_check(
        composite, model_params, step, tolerance, max_checks=4,
        rng=np.random.default_rng(seed + 1))
    return out


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    reports = gradcheck_suite(seed)
    all_pass = all(r.passed for r in reports.values())
    report = {
        "seed": seed,
        "tolerance": 1e-4,
        "passed": all_pass,
        "components": {k: {"max_rel_error": r.max_rel_error,
                           "passed": r.passed, "checked": r.checked}
                       for k, r in reports.items()},
    }
    lines = [f"# gradcheck seed={seed}"]
    for k, r in reports.items():
        lines.append(f"  {k:18s} max rel err {r.max_rel_error:.3e} "
                     f"({r.checked} coords) "
                     f"{'ok' if r.passed else 'FAIL'}")
    lines.append("all components pass" if all_pass
                 else "FAILURES above tolerance 1e-4")
    _emit(report, args.json, lines)
    return 0 if all_pass else 1


def _eval_setup(checkpoint: str, features: str):
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint path does not exist: {checkpoint}")
    if not os.path.exists(features):
        raise ConfigError(f"features path does not exist: {features}")
    model = load_checkpoint(checkpoint)
    corpus = read_features(features)
    if not corpus:
        raise ConfigError("feature file holds no utterances")
    # normalization statistics are refit on the evaluation corpus
    return model, corpus, cmvn_fit(corpus)


def cmd_eval(args) -> int:
    model, corpus, stats = _eval_setup(args.checkpoint, args.features)
    rep = evaluate(model, corpus, stats)
    report = {
        "config_sha256": _config_hash(asdict(model.cfg)),
        "preset": model.cfg.preset,
        "utterances": len(corpus),
        "mean_ctc": rep.mean_ctc,
        "ter": rep.ter,
        "skipped": rep.skipped,
    }
    _emit(report, args.json, [
        f"# eval {args.checkpoint} config={report['config_sha256']}",
        f"utterances: {len(corpus)}  skipped: {rep.skipped}",
        f"mean ctc: {rep.mean_ctc:.6f}",
        f"greedy ter: {rep.ter:.4f}",
    ])
    return 0


def cmd_route_stats(args) -> int:
    model, corpus, stats = _eval_setup(args.checkpoint, args.features)
    if model.cfg.moe_layers < 1:
        raise ConfigError("model has no routed layers")
    records = []
    for utt in corpus:
        feats = pipeline_features(utt.features, stats)
        _, recs, _ = model.forward_utterance(feats)
        records.append(recs)
    rs = collect_route_stats(records)
    report = {
        "config_sha256": _config_hash(asdict(model.cfg)),
        "preset": model.cfg.preset,
        "layers": [layer.as_dict() for layer in rs.layers],
    }
    lines = [f"# route-stats {args.checkpoint} "
             f"config={report['config_sha256']}"]
    for i, layer in enumerate(rs.layers):
        lines.append(f"layer {i}: frames={layer.frames}")
        lines.append("  load      " + " ".join(f"{x:.4f}" for x in layer.load))
        lines.append("  mean_prob " + " ".join(f"{x:.4f}"
                                               for x in layer.mean_prob))
        lines.append("  importance" + " ".join(f" {x:.4f}"
                                               for x in layer.importance))
        lines.append(f"  sparsity {layer.sparsity:.4f}  entropy "
                     f"{layer.entropy:.4f}  mean_gate {layer.mean_gate:.4f}")
    _emit(report, args.json, lines)
    return 0


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    spec = SynthSpec(clusters=args.clusters, vocab=args.vocab,
                     utterances=args.utterances, min_frames=args.min_frames,
                     max_frames=args.max_frames, feature_dim=args.dim,
                     separation=args.separation, noise=args.noise, seed=seed)
    corpus = synth_corpus(spec)
    offsets = write_features(corpus, args.out)
    if args.manifest:
        write_manifest(corpus, args.out, offsets, args.manifest)
    report = {
        "config_sha256": _config_hash(asdict(spec)),
        "utterances": len(corpus),
        "out": args.out,
        "manifest": args.manifest,
        "total_frames": int(sum(u.frames for u in corpus)),
    }
    _emit(report, args.json, [
        f"# synth config={report['config_sha256']}",
        f"wrote {len(corpus)} utterances "
        f"({report['total_frames']} frames) to {args.out}"
        + (f" with manifest {args.manifest}" if args.manifest else ""),
    ])
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="smoe",
        description="Routed mixture-of-experts CTC acoustic modeling")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a preset on a corpus")
    tr.add_argument("-c", "--config", help="experiment config JSON")
    tr.add_argument("--preset", choices=sorted(PRESETS))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--eval-every", dest="eval_every", type=int)
    tr.add_argument("--batch-frames", dest="batch_frames", type=int)
    tr.add_argument("--features", help="feature file (overrides config data)")
    tr.add_argument("--out", help="output directory")
    tr.add_argument("--json", action="store_true")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--features", required=True)
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    co = sub.add_parser("cost", help="parameter and FLOP estimates")
    co.add_argument("--preset", required=True)
    co.add_argument("--flop-convention", dest="flop_convention",
                    choices=("mac1", "mac2"), default="mac1")
    co.add_argument("--seconds", type=float, default=1.0)
    co.add_argument("--json", action="store_true")
    co.set_defaults(fn=cmd_cost)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--json", action="store_true")
    gc.set_defaults(fn=cmd_gradcheck)

    rs = sub.add_parser("route-stats",
                        help="per-layer routing statistics of a checkpoint")
    rs.add_argument("--checkpoint", required=True)
    rs.add_argument("--features", required=True)
    rs.add_argument("--json", action="store_true")
    rs.set_defaults(fn=cmd_route_stats)

    sy = sub.add_parser("synth", help="generate a synthetic corpus")
    sy.add_argument("--out", required=True)
    sy.add_argument("--manifest")
    sy.add_argument("--utterances", type=int, default=50)
    sy.add_argument("--clusters", type=int, default=2)
    sy.add_argument("--vocab", type=int, default=8)
    sy.add_argument("--dim", type=int, default=16)
    sy.add_argument("--min-frames", dest="min_frames", type=int, default=24)
    sy.add_argument("--max-frames", dest="max_frames", type=int, default=72)
    sy.add_argument("--separation", type=float, default=3.0)
    sy.add_argument("--noise", type=float, default=0.5)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--json", action="store_true")
    sy.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SmoeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
