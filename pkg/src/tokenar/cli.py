"""Command-line front end: gen-data, train, generate, eval, ablate, inspect-attn.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import report
from .config import ConfigError, RunConfig
from .errors import DatasetIOError, InvalidArgument, TokenARError, VersionError
from .evaluation import (
    attn_focus_entropy,
    attn_prompt_similarity,
    evaluate,
    run_ablation,
    score_predictions,
)
from .inference import generate_batch
from .model import init_params, load_checkpoint
from .scene_gen import filter_sample, random_scene, read_dataset, write_dataset
from .tokenizer import build_codebook, dequantize, quantize, read_ppm, write_ppm
from .training import prepare, teacher_forced_metrics, train_loop
from .vocab import RELATIONS

log = logging.getLogger("tokenar")

THREADS_ENV = "TOKENAR_THREADS"


class UsageError(InvalidArgument):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _codebook(cfg: RunConfig):
    return build_codebook(cfg.tokenizer.codebook_seed, cfg.tokenizer.K)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.paths.out
    if out is None:
        raise UsageError("no output directory: pass --out or set paths.out")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TokenARError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_data(args, cfg: RunConfig):
    data = args.data or cfg.paths.dataset
    if data is None:
        raise UsageError("no dataset: pass --data or set paths.dataset")
    if not Path(data).is_dir():
        raise DatasetIOError(f"dataset directory not found: {data}")
    samples, header = read_dataset(data)
    tk = cfg.tokenizer
    if (header.get("K"), header.get("patch"), header.get("codebook_seed")) != (tk.K, tk.patch, tk.codebook_seed):
        raise ConfigError(f"dataset {data} was built with K={header.get('K')}, patch={header.get('patch')}, "
                          f"codebook_seed={header.get('codebook_seed')}; config has K={tk.K}, "
                          f"patch={tk.patch}, codebook_seed={tk.codebook_seed}")
    if samples and samples[0].target_tokens.size != cfg.n:
        raise ConfigError(f"dataset images hold {samples[0].target_tokens.size} tokens, config expects {cfg.n}")
    if not samples:
        raise DatasetIOError(f"dataset {data} holds no samples")
    return samples


def _load_model(args, cfg: RunConfig):
    path = args.checkpoint or cfg.paths.checkpoint
    if path is None:
        raise UsageError("no checkpoint: pass --checkpoint or set paths.checkpoint")
    if not Path(path).is_file():
        raise DatasetIOError(f"checkpoint not found: {path}")
    model = load_checkpoint(path, cfg.model_config())
    model.eval()
    return model


def _select(samples, limit: int | None):
    return samples if limit is None else samples[:limit]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    dg, tk = cfg.datagen, cfg.tokenizer
    cb = _codebook(cfg)
    rng = np.random.default_rng(dg.seed)
    kept = []
    for _ in range(dg.count):
        s = random_scene(rng, cb, patch=tk.patch, image_size=tk.image_size, max_jitter=dg.max_jitter)
        if filter_sample(s, dg.delta):
            kept.append(s)
    write_dataset(kept, out, cb, tk.patch, extra={"delta": dg.delta, "generated": dg.count, "seed": dg.seed})
    hist = Counter(RELATIONS[s.relation_id] for s in kept)
    stats = {
        "generated": dg.count,
        "kept": len(kept),
        "pass_rate": len(kept) / dg.count if dg.count else 0.0,
        "delta": dg.delta,
        "relation_histogram": {r: hist.get(r, 0) for r in RELATIONS},
    }
    report.write_json(out / "stats.json", stats)
    report.write_rows(out / "relation_histogram.csv",
                      [{"relation": r, "count": c} for r, c in stats["relation_histogram"].items()])
    report.write_json(out / "config.json", cfg.to_dict())
    print(f"gen-data: kept {len(kept)}/{dg.count} samples (pass rate {stats['pass_rate']:.3f}) -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    samples = _load_data(args, cfg)
    out = _out_dir(args, cfg)
    tcfg = cfg.train_config()
    model = init_params(cfg.model_config(), tcfg.seed)
    report.write_json(out / "config.json", cfg.to_dict())
    res = train_loop(samples, tcfg, model, out, m=cfg.layout.m)
    items = prepare(samples, cfg.sequence_layout(), cfg.tokenizer.K, tcfg, model.cfg.distill_dim,
                    model.cfg.torch_dtype)
    metrics = {**teacher_forced_metrics(model, items), "steps": len(res.history)}
    if res.history:
        metrics.update({f"final_{k}": res.history[-1][k] for k in ("ce", "distill", "total")})
        report.plot_loss(res.history, out / "loss.png")
    report.write_json(out / "metrics.json", metrics)
    print("train: " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))
    print(f"train: checkpoint {out / 'final.tkar'}")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    samples = _select(_load_data(args, cfg), args.limit)
    model = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    layout = cfg.sequence_layout()
    cb = _codebook(cfg)
    spans = []
    for i in range(0, len(samples), args.batch_size):
        chunk = samples[i:i + args.batch_size]
        res = generate_batch(model, chunk, layout, cfg.generate_config())
        for j, (grid, span) in enumerate(zip(res.target, res.span)):
            stem = f"{i + j:06d}"
            write_ppm(out / f"{stem}_pred.ppm", dequantize(grid, cb, cfg.tokenizer.patch))
            spans.append({"id": stem, "span": span.tolist(), "target": grid.ravel().tolist()})
    report.write_json(out / "spans.json", spans)
    print(f"generate: wrote {len(spans)} predictions -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    samples = _select(_load_data(args, cfg), args.limit)
    out = _out_dir(args, cfg)
    cb = _codebook(cfg)
    patch = cfg.tokenizer.patch
    if args.predictions:
        preds = []
        for i in range(len(samples)):
            path = Path(args.predictions) / f"{i:06d}_pred.ppm"
            preds.append(quantize(read_ppm(path), cb, patch))
        result = score_predictions(preds, samples, cb, patch)
    else:
        model = _load_model(args, cfg)
        rep = evaluate(model, samples, cfg.sequence_layout(), cb, patch, cfg.generate_config(),
                       train_cfg=cfg.train_config())
        result = rep.to_dict()
        report.plot_layer_curve(rep.focus_entropy, out / "focus_entropy.png", "focus entropy (nats)")
        if rep.prompt_divergence:
            report.plot_layer_curve(rep.prompt_divergence, out / "prompt_divergence.png", "profile L1")
    report.write_json(out / "eval.json", result)
    report.write_rows(out / "eval.csv", [{k: v for k, v in result.items() if not isinstance(v, list)}])
    print("eval: " + " ".join(f"{k}={v:.4f}" for k, v in result.items() if isinstance(v, float)))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    samples = _load_data(args, cfg)
    out = _out_dir(args, cfg)
    ab = cfg.ablation
    need = ab.train_count + ab.eval_count
    if len(samples) < need:
        raise ConfigError(f"ablation needs {need} samples, dataset has {len(samples)}")
    train, held = samples[:ab.train_count], samples[ab.train_count:need]
    base = cfg.train_config()
    progress = lambda row: print(f"ablate: {row['variant']} seed={row['seed']} "
                                 f"confusion={row['identity_confusion']:.4f} "
                                 f"accuracy={row['token_accuracy']:.4f} eval_ce={row['eval_ce']:.4f}", flush=True)
    res = run_ablation(train, held, _codebook(cfg), base, cfg.model_kwargs(), ab.variants, ab.seeds,
                       cfg.tokenizer.patch, cfg.layout.m, cfg.generate_config(), progress)
    report.write_rows(out / "ablation_runs.csv", res.runs)
    report.write_rows(out / "ablation_summary.csv", res.summary)
    report.write_json(out / "ablation.json", {"runs": res.runs, "summary": res.summary})
    report.plot_ablation(res.summary, ["identity_confusion", "token_accuracy", "eval_ce"], out / "ablation.png")
    return 0


def cmd_inspect_attn(args, cfg: RunConfig) -> int:
    samples = _select(_load_data(args, cfg), args.limit)
    model = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    layout = cfg.sequence_layout()
    res = generate_batch(model, samples, layout, cfg.generate_config(), capture=True)
    trace = res.trace
    report.write_rows(out / "attn_trace.csv", report.trace_rows(trace),
                      ["sample", "layer", "head", "query", "span", "key", "weight"])
    summary = []
    for layer in range(trace.n_layers):
        row = {"layer": layer, "focus_entropy": attn_focus_entropy(trace, layer)}
        if layout.M:
            row["prompt_divergence"] = attn_prompt_similarity(trace, layer)
        summary.append(row)
    report.write_rows(out / "attn_summary.csv", summary)
    report.plot_layer_curve([r["focus_entropy"] for r in summary], out / "focus_entropy.png",
                            "focus entropy (nats)", "reference-key focus")
    if layout.M:
        report.plot_layer_curve([r["prompt_divergence"] for r in summary], out / "prompt_divergence.png",
                                "profile L1", "instruct vs prompt attention")
    for row in summary:
        print("inspect-attn: " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                          for k, v in row.items()))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-attn": cmd_inspect_attn,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (value parsed as JSON)")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"intra-op threads; 1 is the deterministic mode (env {THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tokenar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate and filter a scene dataset")
    for name, needs_ckpt in (("train", False), ("generate", True), ("eval", True),
                             ("ablate", False), ("inspect-attn", True)):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--data", help="dataset directory (overrides paths.dataset)")
        if needs_ckpt:
            sp.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
            sp.add_argument("--limit", type=int, default=None, help="use the first N samples")
        if name == "generate":
            sp.add_argument("--batch-size", type=int, default=16)
        if name == "eval":
            sp.add_argument("--predictions", help="directory of NNNNNN_pred.ppm files to score instead of a model")
        if name == "inspect-attn":
            sp.set_defaults(limit=4)
    return p


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from exc
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads(args.threads))
        cfg = RunConfig.load(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except (InvalidArgument, DatasetIOError, VersionError) as exc:
        print(f"tokenar {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TokenARError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"tokenar {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
