"""``ktm`` command line: gen-data, train, eval, generate, report.

Exit codes: 0 success, 1 curriculum stalled, 2 config/usage error,
3 diverged run, 4 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, apply_override, load_config
from .data import Tokenizer, gen_tree_dataset, load_jsonl, write_jsonl
from .encoder import MergeEncoder, partition_and_pad
from .errors import (CheckpointError, ConfigError, ContractError, DivergedError,
                     StalledCurriculumError)
from .infer import GenerationConfig, dump_trace, generate, prefill
from .model import ModelConfig, attach_lora, init_params
from .state import Bundle, load_bundle, restore_trainer, save_bundle, save_trainer
from .train import (CurriculumSchedule, Stage, Trainer, TrainRow, clone_params, pretrain_base,
                    run_curriculum, write_log_csv)

log = logging.getLogger("ktm")

EXIT_OK, EXIT_STALLED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


# -- config resolution ---------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    flag_map = {
        "k": "merge.k", "lr": "train.lr", "seeds": "train.seeds", "out_dir": "train.out_dir",
        "base": "train.base_checkpoint", "base_epochs": "train.base_epochs",
        "batch_size": "train.batch_size", "strategy": "merge.strategy",
        "n_samples": "data.n_samples", "data_seed": "data.seed",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            apply_override(cfg, key, value)
    if getattr(args, "n_nodes", None) is not None:
        apply_override(cfg, "data.n_nodes", list(args.n_nodes))
    if getattr(args, "no_merge", False):
        cfg.merge.enabled = False
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(cfg, key.strip(), value)
    env_seed = os.environ.get("KTM_SEED")
    if env_seed is not None:
        try:
            s = int(env_seed)
        except ValueError:
            raise ConfigError(f"KTM_SEED must be an integer, got {env_seed!r}") from None
        cfg.data.seed = s
        cfg.train.base_seed = s
        cfg.train.seeds = [s + i for i in range(len(cfg.train.seeds))]
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        cfg.train.epochs = epochs
    return cfg.validate(check_paths=True)


def _stages(cfg: RunConfig) -> list:
    out = []
    for s in cfg.train.stages:
        max_epochs = s.max_epochs if cfg.train.epochs is None else cfg.train.epochs
        out.append(Stage(tuple(s.n_nodes), s.threshold, max_epochs, s.n_train, s.n_val))
    return out


def _model_config(cfg: RunConfig, tok: Tokenizer) -> ModelConfig:
    m = cfg.model
    return ModelConfig(tok.vocab_size, m.embed_dim, m.n_layers, m.n_heads, m.max_seq_len, m.dropout_p)


# -- gen-data ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    records = gen_tree_dataset(cfg.data.n_samples, tuple(cfg.data.n_nodes), cfg.data.seed)
    write_jsonl(records, args.out)
    tok = Tokenizer()
    stats = {
        "samples": len(records),
        "positive_fraction": sum(r.completion == "true" for r in records) / max(1, len(records)),
        "mean_prompt_tokens": float(np.mean([len(tok.encode(r.prompt)) for r in records])) if records else 0.0,
        "path": str(args.out),
    }
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _base_records(cfg: RunConfig) -> list:
    if cfg.data.task == "jsonl":
        return list(load_jsonl(cfg.data.train_path))
    lo = min(s.n_nodes[0] for s in cfg.train.stages)
    hi = max(s.n_nodes[1] for s in cfg.train.stages)
    return gen_tree_dataset(cfg.train.base_n_train, (lo, hi), seed=10_000 + cfg.train.base_seed)


def build_base(cfg: RunConfig, tok: Tokenizer, out_dir: Path):
    """Load the base model, or pretrain it on uncompressed data and save it."""
    if cfg.train.base_checkpoint:
        params = load_bundle(cfg.train.base_checkpoint).params
        want = _model_config(cfg, tok)
        if params.config != want:
            raise ConfigError(f"base checkpoint model {params.config} does not match config {want}")
        return params
    params = init_params(_model_config(cfg, tok), np.random.default_rng(cfg.train.base_seed))
    if cfg.train.base_epochs > 0:
        log.info("pretraining base model for %d epochs", cfg.train.base_epochs)
        pretrain_base(params, tok, _base_records(cfg), cfg.train.base_epochs,
                      seed=cfg.train.base_seed, lr=cfg.train.base_lr, batch_size=cfg.train.base_batch_size)
    save_bundle(out_dir / "base.ktm", params, {}, None, cfg.to_dict())
    return params


def make_trainer(cfg: RunConfig, base, tok: Tokenizer, seed: int) -> Trainer:
    params = clone_params(base)
    rng = np.random.default_rng([seed, 1])
    adapters = attach_lora(params, rng, cfg.lora.rank, cfg.lora.alpha, cfg.lora.dropout)
    enc = None
    if cfg.merge.enabled:
        enc = MergeEncoder(cfg.merge.k, params.config.embed_dim, rng, hidden=cfg.merge.hidden,
                           strategy=cfg.merge.strategy, keep_mean=cfg.merge.keep_mean,
                           dtype=params.emb.dtype)
    return Trainer(params, adapters, enc, tok, seed=seed, lr=cfg.train.lr,
                   weight_decay=cfg.train.weight_decay, batch_size=cfg.train.batch_size,
                   full_finetune=cfg.lora.full_finetune, grad_clip=cfg.train.grad_clip)


def _train_jsonl(cfg: RunConfig, trainer: Trainer, on_epoch) -> list:
    train = list(load_jsonl(cfg.data.train_path))
    val = list(load_jsonl(cfg.data.val_path)) if cfg.data.val_path else train
    epochs = cfg.train.epochs if cfg.train.epochs is not None else cfg.train.stages[0].max_epochs
    while trainer.epoch < epochs:
        loss = trainer.run_epoch(train)
        trainer.epoch += 1
        total, count = trainer.nll_totals(val)
        # per-token geometric-mean probability stands in for accuracy
        row = TrainRow(trainer.opt.step, trainer.epoch, 0, loss, math.exp(-total / count), trainer.seed)
        trainer.rows.append(row)
        on_epoch(trainer, row)
    return trainer.rows


def _run_seed(cfg: RunConfig, trainer: Trainer, seed_dir: Path, stage_index: int = 0) -> dict:
    seed_dir.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    best = {"val": -1.0}
    schedule = CurriculumSchedule(_stages(cfg), current=stage_index)

    def on_epoch(tr, row):
        extra = {"stage": schedule.current}
        if row.val_accuracy > best["val"]:
            best["val"] = row.val_accuracy
            save_trainer(seed_dir / "best.ktm", tr, snapshot, extra)
        save_trainer(seed_dir / "last.ktm", tr, snapshot, extra)
        write_log_csv(tr.rows, seed_dir / "train_log.csv")

    status = "converged"
    if all(s.max_epochs == 0 for s in schedule.stages) and cfg.train.epochs == 0:
        save_trainer(seed_dir / "best.ktm", trainer, snapshot, {"stage": 0})
        status = "not-trained"
    elif cfg.data.task == "jsonl":
        _train_jsonl(cfg, trainer, on_epoch)
    else:
        try:
            run_curriculum(schedule, trainer, data_seed=trainer.seed, on_epoch=on_epoch,
                           stop_at_threshold=cfg.train.stop_at_threshold)
        except StalledCurriculumError as exc:
            log.error("%s", exc)
            status = "stalled"
    save_trainer(seed_dir / "final.ktm", trainer, snapshot, {"stage": schedule.current})
    write_log_csv(trainer.rows, seed_dir / "train_log.csv")
    last = trainer.rows[-1].val_accuracy if trainer.rows else None
    return {"seed": trainer.seed, "status": status, "final_val": last,
            "best_val": max((r.val_accuracy for r in trainer.rows), default=None),
            "epochs": trainer.epoch, "dir": str(seed_dir)}


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tok = Tokenizer()
    out_dir = Path(cfg.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    if args.resume:
        bundle = load_bundle(args.resume)
        trainer = restore_trainer(bundle, tok)
        stage = bundle.header["trainer"].get("stage", 0)
        results.append(_run_seed(cfg, trainer, out_dir / f"seed_{trainer.seed}", stage))
    else:
        base = build_base(cfg, tok, out_dir)
        for seed in cfg.train.seeds:
            results.append(_run_seed(cfg, make_trainer(cfg, base, tok, seed), out_dir / f"seed_{seed}"))
    scored = [r for r in results if r["best_val"] is not None]
    best = max(scored, key=lambda r: r["best_val"]) if scored else None
    summary = {"runs": results, "best_seed": best["seed"] if best else None,
               "best_val": best["best_val"] if best else None}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    if best is not None and all(r["status"] == "stalled" for r in results):
        return EXIT_STALLED
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def evaluate_bundle(bundle: Bundle, records: list, tok: Tokenizer, metric: str | None = None,
                    method: str | None = None, ppl_min: float | None = None,
                    n_generated: int = 0, keep_last: int = 0) -> metrics.EvalReport:
    from .train import Trainer as _T

    k = bundle.k or 1
    if metric is None:
        metric = "accuracy" if all(r.meta.get("task") == "tree" for r in records) else "perplexity"
    trainer = _T(bundle.params, bundle.adapters, bundle.encoder, tok, batch_size=64)
    if metric == "accuracy":
        raw = trainer.accuracy(records)
    else:
        raw = metrics.perplexity(bundle.params, bundle.adapters, bundle.encoder, tok, records)
    tokens, slots = [], []
    for r in records:
        n = len(tok.encode(r.prompt))
        tokens.append(n)
        if bundle.encoder is None:
            slots.append(n)
        else:
            head = n - min(keep_last, n)
            slots.append((partition_and_pad(range(head), k, 0)[0].n_blocks if head else 0) + (n - head))
    name = method or (f"{k}-Token" if bundle.encoder is not None else "Uncompressed")
    return metrics.make_report(name, metric, raw, tokens, slots, k=k, ppl_min=ppl_min,
                               n_generated=n_generated)


def _eval_records(args, cfg: RunConfig) -> list:
    if args.data:
        return list(load_jsonl(args.data))
    if cfg.data.task == "jsonl" and cfg.data.val_path:
        return list(load_jsonl(cfg.data.val_path))
    return gen_tree_dataset(cfg.data.n_samples, tuple(cfg.data.n_nodes), cfg.data.seed)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    bundle = load_bundle(args.checkpoint)
    have = bundle.k or 1
    if args.k is not None and args.k != have:
        raise ConfigError(f"checkpoint was trained with K={have}, requested K={args.k}")
    tok = Tokenizer()
    report = evaluate_bundle(bundle, _eval_records(args, cfg), tok, args.metric, args.method,
                             cfg.eval.ppl_min, cfg.eval.n_generated)
    if args.out_json:
        Path(args.out_json).write_text(report.to_json() + "\n")
    if args.out_csv:
        Path(args.out_csv).write_text(report.csv_header() + report.csv_row())
    print(report.to_json())
    return EXIT_OK


# -- generate ------------------------------------------------------------------

def cmd_generate(args) -> int:
    if not args.prompt:
        raise ConfigError("generate: prompt must be a nonempty string")
    bundle = load_bundle(args.checkpoint)
    tok = Tokenizer()
    gcfg = GenerationConfig(args.max_new_tokens, args.mode, args.temperature, tok.stop_id, args.seed)
    seq = prefill(bundle.encoder, bundle.params, tok.encode(args.prompt), tok.pad_id,
                  keep_last=args.keep_last)
    emitted = generate(seq, bundle.params, bundle.adapters, gcfg)
    if args.trace:
        dump_trace(seq, emitted, args.trace)
    print(tok.decode(t for t in emitted if t != tok.stop_id))
    return EXIT_OK


# -- report / bits -------------------------------------------------------------

def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        reports.append(metrics.EvalReport.from_dict(json.loads(Path(path).read_text())))
    for name in args.reference or []:
        reports.extend(metrics.reference_reports(name))
    if not reports:
        raise ConfigError("report: need at least one eval report or --reference table")
    metrics.normalize_perplexity_rows(reports)
    table = metrics.pareto_table(reports)
    print(metrics.format_pareto(table))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("method,P,L,pl_f1,pareto\n")
            for r, flag in table:
                fh.write(f"{r.method},{r.performance:.6f},{r.length_reduction:.6f},{r.pl_f1:.6f},{int(flag)}\n")
    return EXIT_OK


def cmd_bits(args) -> int:
    emb_bits, min_bits = metrics.bits_report(args.vocab_size, args.embed_dim, args.bits, args.k)
    print(json.dumps({
        "embedding_bits": emb_bits,
        "minimal_bits": min_bits,
        "minimal_bits_whole": args.k * math.ceil(math.log2(args.vocab_size)),
        "per_token_bits": math.log2(args.vocab_size),
        "note": "per_token_bits is exact log2(V); whole-bit figures round each token up",
        "ratio": emb_bits / min_bits,
    }, sort_keys=True))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ktm", description="K-token merging toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")

    g = sub.add_parser("gen-data", help="write a Textualized Tree JSONL dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--n-nodes", type=int, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--seed", dest="data_seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train LoRA adapters and the merge encoder")
    common(t)
    t.add_argument("--k", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--strategy", choices=["average", "random"])
    t.add_argument("--out-dir")
    t.add_argument("--base", help="base model checkpoint (skips base pretraining)")
    t.add_argument("--base-epochs", type=int)
    t.add_argument("--no-merge", action="store_true", help="train the uncompressed baseline")
    t.add_argument("--resume", help="continue from a trainer checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="JSONL dataset (default: generated from config)")
    e.add_argument("--k", type=int)
    e.add_argument("--metric", choices=["accuracy", "perplexity"])
    e.add_argument("--method")
    e.add_argument("--out-json")
    e.add_argument("--out-csv")
    e.set_defaults(func=cmd_eval)

    gen = sub.add_parser("generate", help="complete a prompt")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--max-new-tokens", type=int, default=32)
    gen.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    gen.add_argument("--temperature", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--keep-last", type=int, default=0, help="leave N trailing prompt tokens uncompressed")
    gen.add_argument("--trace", help="append a JSON line with slots and token ids")
    gen.set_defaults(func=cmd_generate)

    r = sub.add_parser("report", help="Pareto table over eval reports")
    r.add_argument("reports", nargs="*")
    r.add_argument("--reference", action="append", choices=sorted(metrics.REFERENCE_ROWS),
                   help="include published reference rows")
    r.add_argument("--csv")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bits", help="embedding vs. minimal K-gram bit count")
    b.add_argument("--vocab-size", type=int, required=True)
    b.add_argument("--embed-dim", type=int, required=True)
    b.add_argument("--bits", type=int, default=32)
    b.add_argument("--k", type=int, default=1)
    b.set_defaults(func=cmd_bits)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"error: run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
