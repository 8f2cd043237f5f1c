"""Accuracy, open-set AUROC and mean (±std) aggregation of fold results."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import MetricsParseError

CSV_FIELDS = ("run_id", "fold", "target_subject", "method", "accuracy", "ossr_auroc", "seed", "epochs")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    fold: int
    target_subject: int
    method: str
    accuracy: float
    ossr_auroc: float | None = None
    seed: int = 0
    epochs: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.ossr_auroc is not None and not 0.0 <= self.ossr_auroc <= 1.0:
            raise ValueError(f"ossr_auroc {self.ossr_auroc} outside [0, 1]")


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def auroc(scores_known, scores_unknown) -> float:
    """P(unknown scores higher than known) + half the tie probability, via the rank-sum statistic."""
    known = np.asarray(scores_known, dtype=np.float64).reshape(-1)
    unknown = np.asarray(scores_unknown, dtype=np.float64).reshape(-1)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("auroc needs at least one known and one unknown score")
    ranks = rankdata(np.concatenate([known, unknown]))
    u = ranks[known.size :].sum() - unknown.size * (unknown.size + 1) / 2.0
    return float(u / (known.size * unknown.size))


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class Aggregate:
    method: str
    mean: float
    std: float
    n: int
    single: bool = False

    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean: float, std: float) -> str:
    """Percent with two decimals, e.g. ``72.83 (±14.22)``."""
    return f"{100.0 * mean:.2f} (±{100.0 * std:.2f})"


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def aggregate_runs(records: Iterable[MetricsRecord]) -> dict[str, Aggregate]:
    """Mean and sample standard deviation of fold accuracies, per method.

    A method with a single record gets std 0 and ``single=True``.
    """
    by_method: dict[str, list[float]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r.accuracy)
    if not by_method:
        raise ValueError("no records to aggregate")
    out = {}
    for method in sorted(by_method):
        accs = by_method[method]
        mean, std = _mean_std(accs)
        if len(accs) == 1:
            warnings.warn(f"{method}: single record, std reported as 0.00", stacklevel=2)
        out[method] = Aggregate(method, mean, std, len(accs), single=len(accs) == 1)
    return out


def aggregate_across_runs(records: Iterable[MetricsRecord]) -> dict[str, Aggregate]:
    """Average folds within each run first, then mean/std over the run means."""
    per_run: dict[tuple[str, str], list[float]] = {}
    for r in records:
        per_run.setdefault((r.method, r.run_id), []).append(r.accuracy)
    by_method: dict[str, list[float]] = {}
    for (method, _), accs in sorted(per_run.items()):
        by_method.setdefault(method, []).append(float(np.mean(accs)))
    out = {}
    for method, means in sorted(by_method.items()):
        mean, std = _mean_std(means)
        out[method] = Aggregate(method, mean, std, len(means), single=len(means) == 1)
    return out


def mean_auroc(records: Iterable[MetricsRecord]) -> dict[str, float]:
    vals: dict[str, list[float]] = {}
    for r in records:
        if r.ossr_auroc is not None:
            vals.setdefault(r.method, []).append(r.ossr_auroc)
    return {m: float(np.mean(v)) for m, v in sorted(vals.items())}


def format_report(records: Sequence[MetricsRecord]) -> str:
    folds = aggregate_runs(records)
    runs = aggregate_across_runs(records)
    aurocs = mean_auroc(records)
    width = max(len("method"), *(len(m) for m in folds))
    lines = [f"{'method':<{width}}  {'folds':>5}  {'accuracy over folds':>20}  {'runs':>4}  {'accuracy over runs':>19}  ossr_auroc"]
    for method, agg in folds.items():
        run = runs[method]
        au = f"{aurocs[method]:.4f}" if method in aurocs else "-"
        lines.append(f"{method:<{width}}  {agg.n:>5}  {agg.formatted():>20}  {run.n:>4}  {run.formatted():>19}  {au}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- CSV


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def metrics_csv_text(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_FIELDS) + "\n")
    for r in records:
        row = [r.run_id, str(r.fold), str(r.target_subject), r.method, _fmt(r.accuracy), _fmt(r.ossr_auroc), str(r.seed), str(r.epochs)]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_metrics_csv(records: Iterable[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv_text(records))


def read_metrics_csv(path) -> list[MetricsRecord]:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_FIELDS:
        raise MetricsParseError(f"header must be {','.join(CSV_FIELDS)}", str(path), 1)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_FIELDS):
            raise MetricsParseError(f"expected {len(CSV_FIELDS)} fields, got {len(row)}", str(path), lineno)
        try:
            rec = MetricsRecord(
                run_id=row[0],
                fold=int(row[1]),
                target_subject=int(row[2]),
                method=row[3],
                accuracy=float(row[4]),
                ossr_auroc=float(row[5]) if row[5] else None,
                seed=int(row[6]),
                epochs=int(row[7]),
            )
        except ValueError as exc:
            raise MetricsParseError(str(exc), str(path), lineno) from None
        records.append(rec)
    return records
