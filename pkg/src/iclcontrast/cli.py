"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, inputs, config),
2 runtime or transport error. Errors are also written to stderr as one JSON
object ``{"error": <type>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .abt import LEARNING_TYPES, ExperimentSettings, Meme, run_experiment, summarize
from .client import ChatClient, file_image_loader
from .data import dump_json, load_config, load_memes, write_jsonl
from .duality import KERNELS, duality_sweep
from .errors import RuntimeFailure, ValidationError
from .mixed_effects import MapConfig
from .pipelines import read_table, run_fit_lmm, run_shift_map
from .report import build_reports
from .selection import Bm25Index, bm25_rank, confounder_pairs, select_one_shot

log = logging.getLogger("iclcontrast")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _emit(obj, out: Optional[str]) -> None:
    text = dump_json(obj, out)
    if out is None:
        sys.stdout.write(text)


def _config(args, **extra):
    overrides = {
        "seed": args.seed,
        "distance_metric": getattr(args, "metric", None),
        "kernel": getattr(args, "kernel", None),
        **extra,
    }
    return load_config(args.config, overrides)


def _sample(items: list, n: Optional[int], seed: int) -> list:
    """Uniform sample of ``n`` items under ``seed``, original order kept."""
    if not n or n >= len(items):
        return items
    keep = np.sort(np.random.default_rng(seed).choice(len(items), size=n, replace=False))
    return [items[i] for i in keep]


def cmd_duality(args) -> int:
    cfg = _config(args)
    report = duality_sweep(args.trials, cfg.kernel, args.tol, cfg.seed, args.max_dim, args.max_context)
    _emit(report, args.out)
    return 0


def cmd_fit_lmm(args) -> int:
    cfg = _config(args)
    cols = read_table(args.data)
    result = run_fit_lmm(cols, args.y, _csv_list(args.fixed), args.group, _csv_list(args.random),
                         intercept=not args.no_intercept, bootstrap_n=args.bootstrap, seed=cfg.seed,
                         fixed_label=args.fixed_label, random_label=args.random_label)
    _emit(result, args.out)
    return 0


def cmd_shift_map(args) -> int:
    cfg = _config(args)
    map_cfg = MapConfig(seed=cfg.seed, holdout=cfg.holdout_fraction, epochs=args.epochs,
                        lr=args.lr, batch_size=args.batch_size)
    result = run_shift_map(args.zsl, args.icl, args.query_segment, args.answer_segment, args.layer,
                           cfg.distance_metric, args.pooling, map_cfg, bootstrap_n=cfg.bootstrap_n,
                           label=args.label)
    _emit(result, args.out)
    return 0


def cmd_select(args) -> int:
    cfg = _config(args)
    train = load_memes(args.train)
    entries = [m.as_entry() for m in train]
    rows = []
    if args.mode == "confounders":
        for benign, hateful in confounder_pairs(entries):
            rows.append({"text": benign.text, "benign": benign.id, "hateful": hateful.id})
    else:
        queries = load_memes(args.queries) if args.queries else []
        if args.query_text:
            queries = [Meme(id="query", image_ref="-", text=args.query_text)] + queries
        queries = _sample(queries, args.sample_n, cfg.seed)
        index = Bm25Index.build(entries)
        for q in queries:
            if args.mode == "bm25":
                ranked = bm25_rank(q.text, index, args.top_k)
                rows.append({"query": q.id, "ranked": [{"id": i, "score": s} for i, s in ranked]})
            else:
                benign, hateful = select_one_shot(q.text, entries, index)
                rows.append({"query": q.id, "benign": benign.id, "hateful": hateful.id})
    if args.out:
        write_jsonl(rows, args.out)
    else:
        for row in rows:
            sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_abt(args) -> int:
    cfg = _config(args, base_url=args.base_url, api_key_env=args.api_key_env,
                  max_concurrency=args.max_concurrency, model=args.model, data=args.data, train=args.train)
    if not cfg.data:
        raise UsageError("abt needs --data (or data= in the config)")
    dataset = _sample(load_memes(cfg.data), args.sample_n, cfg.seed)
    train = load_memes(cfg.train) if cfg.train else []
    if args.lt == "icl" and not train:
        raise UsageError("icl runs need --train")
    client = ChatClient(cfg.client_config(), image_loader=file_image_loader(Path(cfg.data).parent))
    settings = ExperimentSettings(train=train, max_concurrency=cfg.max_concurrency,
                                  bootstrap_n=cfg.bootstrap_n, seed=cfg.seed,
                                  benign_first=not args.hateful_first)
    records, ci = run_experiment(dataset, args.lt, client, settings)
    summary = summarize(records, ci, args.lt)
    out = Path(args.out or ".")
    write_jsonl((r.to_dict() for r in records), out / f"records_{args.lt}.jsonl")
    dump_json(summary, out / f"summary_{args.lt}.json")
    sys.stdout.write(dump_json(summary))
    return 0


def cmd_report(args) -> int:
    rendered = build_reports(args.from_dir, args.out)
    if not args.out:
        for name, text in rendered.items():
            sys.stdout.write(f"# {name}\n{text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat INI config file; flags override its keys")
    common.add_argument("--seed", type=int, help="RNG seed (default 1987)")
    common.add_argument("--out", help="output file or directory")

    parser = _Parser(prog="iclcontrast", description="Contrastive analyses of in-context learning.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("duality", parents=[common], help="attention vs. weight-update property sweep")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--kernel", choices=KERNELS)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-dim", type=int, default=16)
    p.add_argument("--max-context", type=int, default=8)
    p.set_defaults(func=cmd_duality)

    p = sub.add_parser("fit-lmm", parents=[common], help="linear mixed model + Nakagawa R^2 from a CSV table")
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--y", required=True)
    p.add_argument("--fixed", default="", help="comma-separated fixed terms; a:b is a product")
    p.add_argument("--random", default="1", help="comma-separated random terms; 1 is the intercept")
    p.add_argument("--group", required=True)
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--bootstrap", type=int, default=0, help="resamples for R^2 intervals (0 = off)")
    p.add_argument("--fixed-label")
    p.add_argument("--random-label")
    p.set_defaults(func=cmd_fit_lmm)

    p = sub.add_parser("shift-map", parents=[common], help="representational-shift map and distance regression")
    p.add_argument("--zsl", nargs="+", required=True, help="zero-shot dump manifests")
    p.add_argument("--icl", nargs="+", required=True, help="ICL dump manifests, paired with --zsl")
    p.add_argument("--query-segment", default="query")
    p.add_argument("--answer-segment", default="answer")
    p.add_argument("--layer", type=int, default=-1, help="layer index; negative counts from the last")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--pooling", choices=("mean", "last"), default="mean")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--label")
    p.set_defaults(func=cmd_shift_map)

    p = sub.add_parser("select", parents=[common], help="ICL example selection")
    p.add_argument("--train", required=True)
    p.add_argument("--queries")
    p.add_argument("--query-text")
    p.add_argument("--mode", choices=("bm25", "one-shot", "confounders"), default="one-shot")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--sample-n", type=int)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("abt", parents=[common], help="run zsl/icl/abt classification against a chat endpoint")
    p.add_argument("--data")
    p.add_argument("--train")
    p.add_argument("--lt", choices=LEARNING_TYPES, default="abt")
    p.add_argument("--base-url")
    p.add_argument("--api-key-env")
    p.add_argument("--model")
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--sample-n", type=int)
    p.add_argument("--hateful-first", action="store_true", help="render the hateful ICL example first")
    p.set_defaults(func=cmd_abt)

    p = sub.add_parser("report", parents=[common], help="render the four summary CSV tables from stored results")
    p.add_argument("--from", dest="from_dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc: Exception, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (ValidationError, KeyError) as exc:
        return _fail(exc, 1)
    except (RuntimeFailure, OSError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
