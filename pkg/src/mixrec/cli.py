"""Command-line driver: train, evaluate, ablate and split."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, TrainConfig, parse_overrides, resolve_config
from .dataset import DatasetError, NegativeSamplingError, build_graph, load_dataset, random_split
from .encoder import CheckpointError, ConfigurationError
from .evaluation import ABLATIONS, evaluate, format_ablation_table, run_ablations, sparsity_report
from .trainer import load_checkpoint, save_checkpoint, train

logger = logging.getLogger("mixrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonl_writer(fh):
    def write(record):
        fh.write(json.dumps(record, sort_keys=False) + "\n")
    return write


def _shared(parser: argparse.ArgumentParser, data=True) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    if data:
        parser.add_argument("--train", help="train interactions (adjacency lines)")
        parser.add_argument("--test", help="test interactions (adjacency lines)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--n", type=int, help="ranking cutoff (topn)")
    parser.add_argument("--log-losses", action="store_true", help="write per-step losses to losses.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _shared(p)
    p.add_argument("--manifest", help="re-run from a previous run's manifest.json")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sparsity-report", help="write per-sparsity-group metrics as CSV")
    p.add_argument("--group-by", choices=("interactions", "users"), default="interactions")

    p = sub.add_parser("ablate", help="train the full model and its ablations")
    _shared(p)
    p.add_argument("--variants", nargs="+", choices=list(ABLATIONS))

    p = sub.add_parser("split", help="random per-user holdout of a single interaction file")
    _shared(p, data=False)
    p.add_argument("--input", required=True, help="interactions to split (adjacency or pair lines)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    return parser


def _resolve(args, base=None) -> TrainConfig:
    if base is not None:
        # --set on top of a saved config only touches the keys it names
        cfg = TrainConfig(**{**base, **parse_overrides(args.overrides)})
    else:
        cfg = resolve_config(args.config, args.overrides)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["topn"] = args.n
    return cfg.replace(**changes) if changes else cfg


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"missing required flag(s): {', '.join(missing)}")


def cmd_train(args) -> int:
    base = None
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        base = manifest["config"]
        args.train = args.train or manifest["train"]
        args.test = args.test or manifest["test"]
    _need(args, "out", "train", "test")
    config = _resolve(args, base)
    ds = load_dataset(args.train, args.test)
    for line in ds.summary_lines():
        logger.info("dataset %s", line)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"command": "train", "config": config.to_dict(), "train": os.path.abspath(args.train),
                "test": os.path.abspath(args.test), "seed": config.seed, "out": os.path.abspath(args.out)}
    _write_json(os.path.join(args.out, "manifest.json"), manifest)

    graph = build_graph(ds)
    losses = open(os.path.join(args.out, "losses.jsonl"), "w", encoding="utf-8") if args.log_losses else None
    try:
        with open(os.path.join(args.out, "log.jsonl"), "w", encoding="utf-8") as log_fh:
            result = train(ds, config, graph, step_log=_jsonl_writer(losses) if losses else None,
                           epoch_log=_jsonl_writer(log_fh))
    finally:
        if losses:
            losses.close()

    ckpt = os.path.join(args.out, "best.mxemb")
    save_checkpoint(ckpt, result.table, config, result.steps, {"best_epoch": result.best_epoch})
    metrics = evaluate(result.table, graph, ds, config.topn, config.layers, config.include_layer0)
    _write_json(os.path.join(args.out, "metrics.json"), metrics.to_json())
    print(metrics.to_table())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _need(args, "train", "test")
    table, sidecar = load_checkpoint(args.checkpoint)
    base = sidecar["config"] if sidecar and args.config is None else None
    config = _resolve(args, base)
    ds = load_dataset(args.train, args.test)
    if table.shape[0] != ds.num_nodes:
        raise CheckpointError(f"checkpoint has {table.shape[0]} rows but the dataset has {ds.num_nodes} nodes")
    graph = build_graph(ds)
    result = evaluate(table, graph, ds, config.topn, config.layers, config.include_layer0)
    print(result.to_table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), result.to_json())
    if args.sparsity_report:
        groups = sparsity_report(ds, result, by=args.group_by)
        with open(args.sparsity_report, "w", encoding="utf-8") as fh:
            fh.write(groups.to_csv())
    return EXIT_OK


def _variant_file(name: str) -> str:
    return name.replace("/", "_") + ".json"


def cmd_ablate(args) -> int:
    _need(args, "out", "train", "test")
    config = _resolve(args)
    ds = load_dataset(args.train, args.test)
    rows = run_ablations(ds, config, args.variants, build_graph(ds))
    os.makedirs(args.out, exist_ok=True)
    n = config.topn
    for name, (rec, nd) in rows.items():
        _write_json(os.path.join(args.out, _variant_file(name)), {f"recall@{n}": rec, f"ndcg@{n}": nd})
    summary = format_ablation_table(rows, n)
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    _write_json(os.path.join(args.out, "manifest.json"),
                {"command": "ablate", "config": config.to_dict(), "train": os.path.abspath(args.train),
                 "test": os.path.abspath(args.test), "seed": config.seed, "variants": list(rows)})
    print(summary)
    return EXIT_OK


def _read_pairs(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                ids = [int(tok) for tok in text.split()]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed token in {text!r}") from None
            pairs.extend((ids[0], i) for i in ids[1:])
    return pairs


def _write_adjacency(path, pairs, num_users):
    by_user = [[] for _ in range(num_users)]
    for u, i in pairs:
        by_user[u].append(i)
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(by_user):
            if items:
                fh.write(" ".join(map(str, [u] + sorted(items))) + "\n")


def cmd_split(args) -> int:
    _need(args, "out")
    seed = 0 if args.seed is None else args.seed
    try:
        ds = random_split(_read_pairs(args.input), args.test_fraction, seed)
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise UsageError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    _write_adjacency(os.path.join(args.out, "train.txt"), ds.train.tolist(), ds.num_users)
    _write_adjacency(os.path.join(args.out, "test.txt"), ds.test.tolist(), ds.num_users)
    print("\n".join(ds.summary_lines()))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "split": cmd_split}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, NegativeSamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        # a missing config is a usage problem; anything else is data
        return EXIT_USAGE if exc.filename in (getattr(args, "config", None), getattr(args, "manifest", None)) \
            else EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
