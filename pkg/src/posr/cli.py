"""``posr`` command line: synth, train, loso, gradcheck and report.

Exit codes: 0 success, 1 validation error, 2 runtime or training error
(including a failed gradient check), 3 LOSO run with some failed folds.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, parse_config, write_config
from .data import generate_synthetic, make_loso_plan, write_epochs
from .errors import ConfigError, PosrError
from .eval import aggregate_across_runs, aggregate_runs, format_report, mean_auroc, read_metrics_csv, write_metrics_csv
from .train import load_dataset, run_loso, train_fold

log = logging.getLogger("posr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

EPOCH_FILE = "epochs.eegb"
CONFIG_ECHO = "config.txt"
CHECKPOINT = "checkpoint.posr"
METRICS = "metrics.csv"
AGGREGATE_TXT = "aggregate.txt"
AGGREGATE_CSV = "aggregate.csv"
FAILURES = "failures.txt"


class UsageError(PosrError, ValueError):
    """Bad command-line input (exit code 1)."""


def _resolve_config(args, seed_key: str = "train.seed") -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    overrides = {}
    if args.seed is not None:
        overrides[seed_key] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def _parallelism(args) -> int:
    if args.parallel is not None:
        n = args.parallel
    else:
        raw = os.environ.get("POSR_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"POSR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"parallelism must be >= 1, got {n}")
    return n


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _resolve_config(args, seed_key="synth.seed")
    out = _out_dir(cfg)
    batch = generate_synthetic(cfg.synth)
    write_epochs(batch, out / EPOCH_FILE)
    write_config(cfg, out / CONFIG_ECHO)
    print(f"wrote {batch.n_trials} trials ({batch.n_channels} ch x {batch.n_samples} samples) to {out / EPOCH_FILE}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    write_config(cfg, out / CONFIG_ECHO)
    batch = load_dataset(cfg)
    pool = cfg.loso.pool or tuple(batch.subjects())
    plan = make_loso_plan(pool, cfg.loso.eval_session, cfg.train.seed, cfg.loso.run_id, cfg.loso.train_fraction)
    if not 0 <= cfg.loso.fold < len(plan.folds):
        raise ConfigError(f"loso.fold={cfg.loso.fold} out of range for {len(plan.folds)} folds")
    fold = plan.folds[cfg.loso.fold]
    result = train_fold(cfg, batch, fold, out / CHECKPOINT)
    write_metrics_csv([result.record], out / METRICS)
    rec = result.record
    auroc = "-" if rec.ossr_auroc is None else f"{rec.ossr_auroc:.4f}"
    print(
        f"fold {fold.index} target {fold.target} {rec.method}: test accuracy {100 * rec.accuracy:.2f}%, "
        f"train {100 * result.train_accuracy:.2f}%, val {100 * result.val_accuracy:.2f}% "
        f"(epoch {result.best_epoch}), ossr_auroc {auroc}"
    )
    return EXIT_OK


def cmd_loso(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    write_config(cfg, out / CONFIG_ECHO)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    result = run_loso(cfg, parallel=_parallelism(args), checkpoint_dir=ckpt_dir)
    write_metrics_csv(result.records, out / METRICS)
    if result.failures:
        lines = [f"fold {i}: {err}" for i, err in sorted(result.failures.items())]
        (out / FAILURES).write_text("\n".join(lines) + "\n", encoding="utf-8")
        for line in lines:
            print(f"FAILED {line}", file=sys.stderr)
    if not result.records:
        print("every fold failed", file=sys.stderr)
        return EXIT_RUNTIME
    report = format_report(result.records)
    (out / AGGREGATE_TXT).write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_gradcheck, run_gradcheck_suite

    cases = run_gradcheck_suite(seed=args.seed or 0, h=args.h, tol=args.tol)
    print(format_gradcheck(cases), end="")
    return EXIT_OK if all(c.report.passed for c in cases) else EXIT_RUNTIME


def aggregate_csv_text(records) -> str:
    folds = aggregate_runs(records)
    runs = aggregate_across_runs(records)
    aurocs = mean_auroc(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_folds", "mean_accuracy", "std_accuracy", "n_runs", "run_mean_accuracy", "run_std_accuracy", "mean_ossr_auroc", "formatted"])
    for method, agg in folds.items():
        run = runs[method]
        au = f"{aurocs[method]:.6f}" if method in aurocs else ""
        w.writerow([method, agg.n, f"{agg.mean:.6f}", f"{agg.std:.6f}", run.n, f"{run.mean:.6f}", f"{run.std:.6f}", au, agg.formatted()])
    return buf.getvalue()


def cmd_report(args) -> int:
    records = []
    for path in args.metrics:
        records.extend(read_metrics_csv(path))
    if not records:
        raise UsageError("no metrics rows in the given files")
    report = format_report(records)
    print(report, end="")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / AGGREGATE_TXT).write_text(report, encoding="utf-8")
        (out / AGGREGATE_CSV).write_text(aggregate_csv_text(records), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posr", description=__doc__.split("\n", 1)[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch logs")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p, parallel=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the seed in the config")
        if parallel:
            p.add_argument("--parallel", type=int, help="folds trained concurrently (default: $POSR_THREADS or 1)")

    p = sub.add_parser("synth", help="generate a synthetic epoch file")
    run_options(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and evaluate one LOSO fold")
    run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loso", help="run every LOSO fold and aggregate")
    run_options(p, parallel=True)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5, help="central difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate one or more metrics CSV files")
    p.add_argument("metrics", nargs="+", help="metrics CSV files")
    p.add_argument("--out", help="also write aggregate.txt and aggregate.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # bad config, malformed input files and inconsistent data
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (PosrError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
