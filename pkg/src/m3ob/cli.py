"""Command-line entry point: ``python -m m3ob <subcommand> --config c.json --out dir``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ABLATION_FLAGS, ConfigError, dumps, load_config
from .data import DataError
from .evaluation import write_report
from .training import NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SUBCOMMANDS = (
    "synth", "ingest", "preprocess", "build-kg", "pretrain-kg", "build-graphs", "train", "evaluate", "ablate", "report",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="m3ob", description="Multi-modal next-location prediction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config document")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, applied after the config file")
        p.add_argument("--out", type=Path, required=True, help="run directory for artifacts")
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=ABLATION_FLAGS + ("full",))
        if name == "evaluate":
            p.add_argument("--split", default="test", choices=("train", "validation", "test"))
            p.add_argument("--model", type=Path, help="directory holding model.bin (default --out)")
        if name == "report":
            p.add_argument("runs", nargs="+", type=Path, help="run directories with metrics.json")
        if name == "train":
            p.add_argument("--quiet", action="store_true")
    return parser


def _echo_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(cfg) + "\n")


def _progress(quiet: bool):
    if quiet:
        return None
    return lambda rec: print(rec.line(), file=sys.stderr, flush=True)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides)
    out: Path = args.out
    cmd = args.command
    if cmd == "synth":
        corpus = pl.run_synth(cfg, out)
        print(f"wrote {len(corpus.records)} check-ins for {len(corpus.locations)} locations to {out}")
        return EXIT_OK
    if cmd == "report":
        doc = pl.report(args.runs, out)
        print(f"wrote report for {len(doc['runs'])} run(s) to {out}")
        return EXIT_OK

    _echo_config(out, cfg)
    if cmd == "ingest":
        records, hierarchy, _ = pl.ingest(cfg, out)
        pl.write_ingest(out, records, hierarchy)
        print(f"ingested {len(records)} check-ins")
        return EXIT_OK
    if cmd == "ablate":
        cfg = pl.ablation_config(cfg, args.variant)
        _echo_config(out, cfg)
        pl.run_train(cfg, out, _progress(True))
        report = pl.run_evaluate(cfg, out)
        print(json.dumps({"variant": args.variant, **report.overall.as_dict()}))
        return EXIT_OK
    if cmd == "train":
        result, _, _ = pl.run_train(cfg, out, _progress(args.quiet))
        print(f"trained {len(result.history)} epoch(s); best validation acc@10 {result.best_val_acc10:.4f} "
              f"at epoch {result.best_epoch}")
        return EXIT_OK
    if cmd == "evaluate":
        report = pl.run_evaluate(cfg, out, args.split, args.model)
        print(json.dumps(report.overall.as_dict()))
        return EXIT_OK

    prep = pl.prepare(cfg, out)
    if cmd == "preprocess":
        pl.write_prepared(out, prep)
        print(f"{len(prep.trajectories)} trajectories, sizes {prep.dataset.sizes}")
    elif cmd == "build-kg":
        triplets = pl.build_kg(prep)
        pl.write_triplets(out / "triplets.tsv", triplets)
        print(f"{len(triplets)} distinct triplets ({sum(triplets.values())} occurrences)")
    elif cmd == "pretrain-kg":
        kg = pl.pretrain_kg(cfg, prep, out)
        print(f"trained {kg.entity.shape[0]} entity and {kg.relation.shape[0]} relation vectors")
    elif cmd == "build-graphs":
        kg = pl.load_or_pretrain_kg(cfg, prep, out)
        graphs = pl.build_graphs(kg, cfg)
        pl.write_graph_file(out, graphs)
        print(", ".join(f"{lvl}: {g.n} nodes {g.matrix.nnz} edges" for lvl, g in graphs.items()))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return run(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
