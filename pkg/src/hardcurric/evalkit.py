"""Classification metrics, six-condition evaluation and ablation tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from .data import CONDITIONS, Dataset
from .errors import DomainError, IntegrityError, read_text


def _check(preds, labels):
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DomainError(f"{preds.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DomainError("metrics of an empty prediction set")
    return preds, labels


def weighted_accuracy(preds, labels) -> float:
    """Overall fraction correct."""
    preds, labels = _check(preds, labels)
    return float(np.count_nonzero(preds == labels)) / labels.size


def unweighted_accuracy(preds, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    preds, labels = _check(preds, labels)
    recalls = [np.count_nonzero(preds[labels == c] == c) / np.count_nonzero(labels == c)
               for c in np.unique(labels)]
    return float(sum(recalls) / len(recalls))


def f1_binary(preds, labels, mode: str = "weighted") -> float:
    """Support-weighted F1 over both classes, or the positive-class F1 with ``mode="positive"``.

    A class with no true and no predicted members scores 0.
    """
    preds, labels = _check(preds, labels)
    if not (np.isin(preds, (0, 1)).all() and np.isin(labels, (0, 1)).all()):
        raise DomainError("f1_binary needs labels and predictions in {0, 1}")

    def f1(c):
        tp = np.count_nonzero((preds == c) & (labels == c))
        denom = np.count_nonzero(preds == c) + np.count_nonzero(labels == c)
        return 2.0 * tp / denom if denom else 0.0

    if mode == "positive":
        return f1(1)
    if mode != "weighted":
        raise DomainError(f"unknown F1 mode {mode!r}")
    n = labels.size
    return sum(f1(c) * np.count_nonzero(labels == c) / n for c in (0, 1))


# -------------------------------------------------------------- reports

MULTICLASS = ("WA", "UA")
BINARY = ("Acc", "F1")


@dataclass
class ConditionReport:
    condition: str
    values: dict  # metric name -> value
    count: int


@dataclass
class ReportTable:
    metrics: tuple
    rows: list  # ConditionReport, in CONDITIONS order
    meta: dict = field(default_factory=dict)
    stored_average: dict | None = None  # set when parsed from CSV

    def __post_init__(self):
        conds = tuple(r.condition for r in self.rows)
        if conds != CONDITIONS:
            raise IntegrityError(f"report conditions {conds} differ from {CONDITIONS}")

    @property
    def average(self) -> dict:
        """Unweighted mean over the six conditions."""
        if self.stored_average is not None:
            return dict(self.stored_average)
        return {k: sum(r.values[k] for r in self.rows) / len(self.rows) for k in self.metrics}

    def cell(self, condition: str, metric: str) -> float:
        if condition == "Average":
            return self.average[metric]
        return next(r for r in self.rows if r.condition == condition).values[metric]


def evaluate_conditions(bundle, test: Dataset, binary: bool = False, f1_mode: str = "weighted",
                        meta: dict | None = None) -> ReportTable:
    """Mask the whole test set with each of the six conditions, predict, score.

    ``bundle`` is a ModelBundle or any callable ``(dataset, condition) -> preds``.
    """
    if len(test) == 0:
        raise DomainError("empty test set")
    if callable(bundle):
        predictor = bundle
    else:
        from .trainer import predict_batch
        predictor = lambda ds, c: predict_batch(bundle, ds, c)
    rows = []
    for c in CONDITIONS:
        preds = predictor(test, c)
        if binary:
            vals = {"Acc": weighted_accuracy(preds, test.labels), "F1": f1_binary(preds, test.labels, f1_mode)}
        else:
            vals = {"WA": weighted_accuracy(preds, test.labels), "UA": unweighted_accuracy(preds, test.labels)}
        rows.append(ConditionReport(c, vals, len(test)))
    return ReportTable(BINARY if binary else MULTICLASS, rows, dict(meta or {}))


def delta(a: ReportTable, b: ReportTable, meta: dict | None = None) -> ReportTable:
    """Cellwise ``a - b``; the Average row follows as the mean of the differences."""
    if a.metrics != b.metrics:
        raise DomainError(f"cannot subtract {b.metrics} table from {a.metrics} table")
    rows = [ConditionReport(ra.condition, {k: ra.values[k] - rb.values[k] for k in a.metrics}, ra.count)
            for ra, rb in zip(a.rows, b.rows)]
    return ReportTable(a.metrics, rows, dict(meta or {}))


def _dec(x: float) -> str:
    return str(Decimal(x).quantize(Decimal("0.000001"), rounding=ROUND_HALF_EVEN))


def format_report(table: ReportTable) -> str:
    buf = io.StringIO()
    for k, v in table.meta.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("condition", *table.metrics))
    for r in table.rows:
        w.writerow((r.condition, *(_dec(r.values[k]) for k in table.metrics)))
    avg = table.average
    w.writerow(("Average", *(_dec(avg[k]) for k in table.metrics)))
    return buf.getvalue()


def write_report(table: ReportTable, path) -> None:
    Path(path).write_text(format_report(table))


def parse_report(text: str) -> ReportTable:
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            body.append(line)
    try:
        rows = list(csv.reader(body))
    except csv.Error as e:
        raise IntegrityError(f"report CSV: {e}") from None
    if not rows or rows[0][0] != "condition":
        raise IntegrityError("report CSV is missing its header row")
    metrics = tuple(rows[0][1:])
    if metrics not in (MULTICLASS, BINARY):
        raise IntegrityError(f"unknown report metrics {metrics}")
    avg = [r for r in rows[1:] if r and r[0] == "Average"]
    if len(avg) != 1:
        raise IntegrityError("report CSV needs exactly one Average row")
    try:
        reports = [ConditionReport(r[0], {k: float(v) for k, v in zip(metrics, r[1:])}, 0)
                   for r in rows[1:] if r[0] != "Average"]
        average = {k: float(v) for k, v in zip(metrics, avg[0][1:])}
    except (ValueError, IndexError) as e:
        raise IntegrityError(f"bad report row: {e}") from None
    return ReportTable(metrics, reports, meta, average)


def read_report(path) -> ReportTable:
    return parse_report(read_text(path))


# ------------------------------------------------------------ ablations

VARIANTS = ("full", "no_hdir", "no_hind", "fixed_k", "no_retrieval", "raw_retrieval_features")


@dataclass
class AblationResult:
    tables: dict  # (variant, seed) -> ReportTable
    deltas: dict  # (variant, seed) -> ReportTable of full - variant
    prefix_checksums: dict  # (variant, seed) -> checksum of the pretrained bundle

    def average_wa(self, variant: str, metric: str = "WA") -> list[float]:
        return [t.average[metric] for (v, _), t in sorted(self.tables.items()) if v == variant]


def run_ablations(train: Dataset, test: Dataset, cfg, seeds, variants=VARIANTS) -> AblationResult:
    """Full pipeline for every variant x seed, sharing work that the flags do not touch."""
    from .pipeline import SeedCache, run_pipeline

    seeds = list(seeds)
    if not seeds:
        raise DomainError("run_ablations needs at least one seed")
    tables, sums = {}, {}
    for seed in seeds:
        cache = SeedCache()
        for variant in variants:
            flags = {a: False for a in VARIANTS[1:]}
            if variant != "full":
                flags[variant] = True
            run = run_pipeline(train, test, cfg.replace(seed=seed, **flags), cache)
            tables[(variant, seed)] = run.report
            sums[(variant, seed)] = run.pretrained_checksum
    deltas = {}
    if "full" in variants:
        for (variant, seed), t in tables.items():
            if variant != "full":
                deltas[(variant, seed)] = delta(tables[("full", seed)], t,
                                                {"delta": f"full - {variant}", "seed": seed})
    return AblationResult(tables, deltas, sums)
