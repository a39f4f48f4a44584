"""Command-line front end: run, gen, exec, analyze, preset, profile, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import harness
from .graph import DataError, generate_sbm, generate_size_classes, load_dataset, save_dataset
from .trainer import FrameworkSpec, IncompatibleSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_spec_flags(p, with_dataset=True):
    if with_dataset:
        p.add_argument("--dataset", help="dataset JSON or edge list")
    p.add_argument("--encoder", default="gcn")
    p.add_argument("--readout", default="mean")
    p.add_argument("--sampler", default="line")
    p.add_argument("--disc", default="inner")
    p.add_argument("--est", default="jsd")
    p.add_argument("--dim", type=int, choices=(64, 128), default=64)
    p.add_argument("--layers", type=int, choices=(1, 2, 3, 4), default=2)
    _add_train_flags(p)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="gclab", description="Modular graph contrastive learning experiments.")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="train and evaluate one spec")
    _add_spec_flags(p)
    p.add_argument("--out", default="results.csv", help="results CSV to append to")

    p = sub.add_parser("gen", help="write a controlled-pair batch (JSON lines)")
    p.add_argument("--axis", required=True, choices=harness.MODULE_AXES + harness.HYPER_AXES)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--space", help="search-space JSON")
    p.add_argument("--dataset", action="append", help="dataset path; repeat for several")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--out", help="batch file (default stdout)")

    p = sub.add_parser("exec", help="run a batch file with a worker pool")
    p.add_argument("batch")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="results.csv")

    p = sub.add_parser("analyze", help="ranking / Comb / leaderboard CSVs from results")
    p.add_argument("results")
    p.add_argument("--mode", choices=("single", "pairwise", "full"), default="full")
    p.add_argument("--t", type=float, default=10.0)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("preset", help="print or run a named preset")
    p.add_argument("name", choices=sorted(harness.PRESETS))
    p.add_argument("--print", action="store_true", dest="print_only")
    p.add_argument("--dataset")
    p.add_argument("--dim", type=int, choices=(64, 128), default=64)
    p.add_argument("--layers", type=int, choices=(1, 2, 3, 4), default=2)
    _add_train_flags(p)
    p.add_argument("--out", default="results.csv")

    p = sub.add_parser("profile", help="encoder and sampler cost tables")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dim", type=int, choices=(64, 128), default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory for CSVs (default: print only)")

    p = sub.add_parser("synth", help="write a synthetic dataset JSON")
    p.add_argument("--kind", choices=("sbm", "sizes"), default="sbm")
    p.add_argument("--blocks", default="100,100", help="SBM block sizes")
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return root


def _load(path):
    if not path:
        raise UsageError("--dataset is required")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def _run_spec(spec: FrameworkSpec, dataset_path: str, out: str) -> int:
    dataset = _load(dataset_path)
    start = time.perf_counter()
    _, report = harness.train_and_evaluate(spec, dataset)
    elapsed = (time.perf_counter() - start) * 1000
    print(json.dumps(report.to_json(), sort_keys=True))
    record = harness.ResultRecord(harness.ExperimentConfig(spec, dataset_path), report.test_accuracy, elapsed)
    harness.write_results([record], out, append=True)
    return EXIT_OK


def cmd_run(a) -> int:
    spec = FrameworkSpec(encoder=a.encoder, readout=a.readout, sampler=a.sampler, discriminator=a.disc,
                         estimator=a.est, emb_dim=a.dim, layers=a.layers, lr=a.lr,
                         max_epochs=a.epochs, seed=a.seed)
    return _run_spec(spec, a.dataset, a.out)


def cmd_gen(a) -> int:
    space = harness.load_space(a.space)
    datasets = a.dataset or space.get("datasets") or ["dataset.json"]
    configs = harness.generate_controlled_pairs(space, a.axis, a.m, a.seed, datasets,
                                                lr=a.lr, max_epochs=a.epochs)
    lines = [json.dumps(c.to_json(), sort_keys=True) for c in configs]
    if a.out:
        Path(a.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {len(lines)} configs to {a.out}", file=sys.stderr)
    else:
        print("\n".join(lines))
    return EXIT_OK


def cmd_exec(a) -> int:
    configs = harness.read_batch(a.batch)
    records = harness.execute_batch(configs, a.out, a.workers)
    failed = sum(r.status != "ok" for r in records)
    print(f"{len(records)} runs, {failed} failed -> {a.out}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(a) -> int:
    records = harness.read_results(a.results)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = sum(r.status != "ok" for r in records)
    if failed:
        print(f"{failed} failed runs excluded", file=sys.stderr)
    if a.mode in ("single", "full"):
        table = harness.rank_pairs(records)
        harness.write_ranking_csv(table, out / "ranking.csv")
        if table.excluded_groups:
            print(f"{table.excluded_groups} incomplete pair groups excluded", file=sys.stderr)
    if a.mode in ("pairwise", "full"):
        harness.write_comb_csv(harness.best_pool_comb(records, a.t), out / "comb.csv")
    if a.mode == "full":
        harness.write_leaderboard_csv(records, out / "leaderboard.csv")
    return EXIT_OK


def cmd_preset(a) -> int:
    spec = harness.preset(a.name, emb_dim=a.dim, layers=a.layers, lr=a.lr, max_epochs=a.epochs, seed=a.seed)
    if a.print_only:
        print(json.dumps(dict(zip(harness.MODULE_AXES, spec.modules))))
        return EXIT_OK
    return _run_spec(spec, a.dataset, a.out)


def _cell(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def _print_table(rows):
    if not rows:
        return
    cols = list(rows[0])
    widths = [max(len(c), *(len(_cell(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(_cell(r[c]).ljust(w) for c, w in zip(cols, widths)))


def cmd_profile(a) -> int:
    dataset = _load(a.dataset)
    enc_rows, samp_rows = harness.profile_modules(dataset, harness.preset("line", emb_dim=a.dim, seed=a.seed))
    _print_table(enc_rows)
    print()
    _print_table(samp_rows)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in (("profile_encoders.csv", enc_rows), ("profile_samplers.csv", samp_rows)):
            harness.write_csv(out / name, list(rows[0]), [[_cell(v) for v in r.values()] for r in rows])
    return EXIT_OK


def cmd_synth(a) -> int:
    if a.kind == "sbm":
        try:
            blocks = [int(b) for b in a.blocks.split(",")]
        except ValueError:
            raise UsageError(f"--blocks must be comma-separated counts, got {a.blocks!r}") from None
        dataset = generate_sbm(blocks, a.p_in, a.p_out, a.feat_dim, a.seed)
    else:
        dataset = generate_size_classes()
    save_dataset(dataset, a.out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "exec": cmd_exec, "analyze": cmd_analyze,
            "preset": cmd_preset, "profile": cmd_profile, "synth": cmd_synth}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (IncompatibleSpec, ValueError) as err:
        if isinstance(err, DataError):
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
        print(f"invalid configuration: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
