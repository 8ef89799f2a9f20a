"""Command-line entry point: ``valor <subcommand> --config PATH --seed N --out DIR``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .ablation import GRIDS, run_ablation
from .acd import acd, corpus_stats, load_corpus, load_ontology
from .config import config_to_text, load_config, parse_flat
from .data import SyntheticGenerator, save_dataset
from .downstream import write_report
from .errors import ValorError
from .trainer import Trainer, evaluate, eval_splits, finetune, pretrain

log = logging.getLogger("valor")


def _config(args):
    over = parse_flat("\n".join(args.set)) if args.set else {}
    if args.seed is not None:
        over["seed"] = args.seed
    return load_config(args.config, **over)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args)
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    _, metrics = pretrain(cfg, out, steps=args.steps)
    print(json.dumps(metrics[-1] if metrics else {}))
    return 0


def cmd_finetune(args) -> int:
    out = _out(args)
    base = Trainer.from_checkpoint(args.checkpoint)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    tuned = finetune(base, args.task, args.group, args.steps, args.lr)
    tuned.save(out / "checkpoint.bin")
    if args.task == "retrieval":
        metrics, _ = evaluate(tuned.model, eval_splits(tuned.cfg, tuned.source))
        print(json.dumps(metrics))
    return 0


def cmd_eval(args) -> int:
    out = _out(args)
    trainer = Trainer.from_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    metrics, records = evaluate(trainer.model, eval_splits(cfg, trainer.source), use_dsl=args.dsl)
    write_report(out / "report.jsonl", records, metrics)
    print(json.dumps(metrics))
    return 0


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    gen = SyntheticGenerator(cfg.generator, cfg.model.encoder.max_text_len)
    rng = np.random.default_rng(cfg.seed)
    examples = [gen.example(rng, has_audio=not args.no_audio) for _ in range(args.count)]
    save_dataset(args.out, examples, gen.vocab)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_acd(args) -> int:
    corpus = load_corpus(args.corpus)
    onto = load_ontology(args.ontology)
    stats = corpus_stats(corpus, onto)
    result = {"acd": acd(corpus, onto), "num_captions": stats.num_captions,
              "average_length": stats.average_length, "phrases": stats.phrase_histogram}
    if args.out:
        out = _out(args)
        (out / "acd.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(result))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    table = run_ablation(args.grid, cfg, steps=args.steps, finetune_steps=args.finetune_steps,
                         rows=args.rows.split(",") if args.rows else None)
    text = table.format()
    (out / f"ablation_{table.grid}.md").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valor", description="Tri-modality pretraining at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, out_required=True):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.set_defaults(func=fn)
        return p

    p = add("pretrain", cmd_pretrain)
    p.add_argument("--steps", type=int)

    p = add("finetune", cmd_finetune)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=("retrieval", "caption", "qa"))
    p.add_argument("--group", default="T-AV")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float)

    p = add("eval", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dsl", action="store_true", help="dual-softmax post-processing")

    p = add("generate-data", cmd_generate_data)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--no-audio", action="store_true")

    p = add("acd", cmd_acd, out_required=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)

    p = add("ablate", cmd_ablate)
    p.add_argument("--grid", required=True, choices=sorted(GRIDS))
    p.add_argument("--rows", help="comma-separated subset of grid rows")
    p.add_argument("--steps", type=int)
    p.add_argument("--finetune-steps", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValorError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
