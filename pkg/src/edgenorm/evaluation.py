"""Metrics, baselines, and error reporting.

Top-1 accuracy is the share of queries whose best-ranked dictionary
entry shares a concept id with the gold annotation.  Pair metrics are
precision, recall, F1, and accuracy over a confusion matrix.  An edit
distance baseline is included as a sanity comparator for the pair
task, and reports can dump wrong predictions and per-checkpoint
recommendation snapshots for qualitative inspection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ConceptDictionary, EntityRecord, PairRecord
from .errors import CalibrationError, DataError, IntegrityError
from .inference import Normalization, PairDecision, batch_normalize
from . import trainer as _trainer

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class PairMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    counts: ConfusionCounts


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean, 0 when both rates are 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def top1_accuracy(
    predictions: Sequence[Normalization], gold: Sequence[EntityRecord]
) -> float:
    """Share of aligned queries whose top candidate shares a concept id."""
    if len(predictions) != len(gold):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions for {len(gold)} gold records"
        )
    if not gold:
        return 0.0
    correct = sum(
        1 for pred, rec in zip(predictions, gold) if pred.top1.concept_ids & rec.concept_ids
    )
    return correct / len(gold)


def metrics_from_counts(counts: ConfusionCounts) -> PairMetrics:
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    accuracy = (counts.tp + counts.tn) / counts.total if counts.total else 0.0
    return PairMetrics(
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
        accuracy=accuracy,
        counts=counts,
    )


def _check_pair_alignment(
    decisions: Sequence[PairDecision], gold: Sequence[PairRecord]
) -> None:
    if len(decisions) != len(gold):
        raise ValueError(
            f"length mismatch: {len(decisions)} decisions for {len(gold)} gold pairs"
        )
    for d, g in zip(decisions, gold):
        if (d.entity_a, d.entity_b) != (g.entity_a, g.entity_b):
            raise DataError(
                f"decision for {(d.entity_a, d.entity_b)!r} does not line up with gold pair "
                f"{(g.entity_a, g.entity_b)!r}"
            )


def pair_metrics(
    decisions: Sequence[PairDecision], gold: Sequence[PairRecord]
) -> PairMetrics:
    """Confusion-matrix metrics for matched/unmatched verdicts."""
    _check_pair_alignment(decisions, gold)
    tp = fp = fn = tn = 0
    for d, g in zip(decisions, gold):
        if d.matched and g.label:
            tp += 1
        elif d.matched and not g.label:
            fp += 1
        elif not d.matched and g.label:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))


def edit_distance(a: str, b: str) -> int:
    """Unit-cost Levenshtein distance (insert, delete, substitute)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = np.arange(len(b) + 1)
    current = np.empty(len(b) + 1, dtype=previous.dtype)
    for i, ch_a in enumerate(a, start=1):
        current[0] = i
        for j, ch_b in enumerate(b, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ch_a != ch_b),
            )
        previous, current = current, previous
    return int(previous[len(b)])


def calibrate_edit_threshold(pairs: Sequence[PairRecord]) -> int:
    """F1-maximizing distance cutoff: matched when distance <= cutoff.

    The smallest cutoff among ties is returned, mirroring the embedding
    threshold calibration.
    """
    if not pairs:
        raise CalibrationError("no pairs to calibrate on")
    labels = [p.label for p in pairs]
    if all(labels) or not any(labels):
        raise CalibrationError("calibration needs both positive and negative pairs")
    distances = [edit_distance(p.entity_a, p.entity_b) for p in pairs]
    best_f1 = -1.0
    best_cutoff = 0
    for cutoff in sorted(set(distances)):
        tp = fp = fn = tn = 0
        for dist, label in zip(distances, labels):
            matched = dist <= cutoff
            if matched and label:
                tp += 1
            elif matched:
                fp += 1
            elif label:
                fn += 1
            else:
                tn += 1
        metrics = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
        if metrics.f1 > best_f1:
            best_f1 = metrics.f1
            best_cutoff = cutoff
    return best_cutoff


def edit_distance_decisions(
    pairs: Sequence[PairRecord], cutoff: int
) -> list[PairDecision]:
    """Baseline verdicts; score is the negated distance so that the
    usual ``score >= threshold`` reading still holds with ``-cutoff``."""
    decisions = []
    for p in pairs:
        dist = edit_distance(p.entity_a, p.entity_b)
        decisions.append(
            PairDecision(
                entity_a=p.entity_a,
                entity_b=p.entity_b,
                score=float(-dist),
                threshold=float(-cutoff),
                matched=dist <= cutoff,
            )
        )
    return decisions


def error_report(predictions, gold, limit: int):
    """Wrong predictions, preserving input order, truncated to ``limit``.

    For normalization output (paired with gold mentions) the result is
    a list of ``(query, wrong_top1_surface)``.  For pair verdicts the
    result is ``(false_positives, false_negatives)`` with entity tuples.
    """
    if limit < 0:
        raise ValueError("limit must be >= 0")
    if not gold:
        return []
    if isinstance(gold[0], EntityRecord):
        if len(predictions) != len(gold):
            raise ValueError("predictions and gold must align")
        wrong = [
            (pred.query, pred.top1.surface)
            for pred, rec in zip(predictions, gold)
            if not (pred.top1.concept_ids & rec.concept_ids)
        ]
        return wrong[:limit]
    if isinstance(gold[0], PairRecord):
        _check_pair_alignment(predictions, gold)
        fps = [
            (d.entity_a, d.entity_b)
            for d, g in zip(predictions, gold)
            if d.matched and not g.label
        ]
        fns = [
            (d.entity_a, d.entity_b)
            for d, g in zip(predictions, gold)
            if not d.matched and g.label
        ]
        return fps[:limit], fns[:limit]
    raise TypeError(f"cannot build an error report for gold type {type(gold[0]).__name__}")


@dataclass(frozen=True)
class SnapshotCell:
    """Top recommendations for one query under one checkpoint."""

    query: str
    checkpoint_label: str
    entries: tuple[tuple[str, bool], ...]  # (surface, shares a concept id)


def snapshot_recommendations(
    records: Sequence[EntityRecord],
    checkpoints: Sequence[tuple[str, str | Path]],
    dictionary: ConceptDictionary,
    k: int = 5,
) -> list[SnapshotCell]:
    """Rank queries under several checkpoints for side-by-side reading.

    Returns one cell per (query, checkpoint), so exactly
    ``len(records) * len(checkpoints)`` cells.  Each cell holds the top
    ``k`` dictionary surfaces with a correctness marker.  A missing
    checkpoint raises :class:`IntegrityError` before any scoring runs.
    """
    for _, path in checkpoints:
        if not (Path(path) / _trainer.META_FILE).is_file():
            raise IntegrityError(f"{path} is not a checkpoint directory")
    cells: list[SnapshotCell] = []
    for label, path in checkpoints:
        handle, _ = _trainer.restore(path)
        norms = batch_normalize([r.surface for r in records], dictionary, handle, k)
        for rec, norm in zip(records, norms):
            entries = tuple(
                (entry.surface, bool(entry.concept_ids & rec.concept_ids))
                for entry in norm.ranked
            )
            cells.append(SnapshotCell(rec.surface, label, entries))
    ordered = sorted(
        range(len(cells)), key=lambda i: (i % len(records), i // len(records))
    )
    return [cells[i] for i in ordered]


@dataclass
class EvalReport:
    """Container for one evaluation run, renderable as text or JSONL."""

    dataset: str
    top1: float | None = None
    pair: PairMetrics | None = None
    wrong_top1: list[tuple[str, str]] = field(default_factory=list)
    false_positives: list[tuple[str, str]] = field(default_factory=list)
    false_negatives: list[tuple[str, str]] = field(default_factory=list)
    snapshots: list[SnapshotCell] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name, value in (("top1", self.top1),):
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def render_report(report: EvalReport) -> str:
    """Human-readable report; false positives and negatives get their
    own sections so annotation mistakes stand out."""
    lines = [f"dataset: {report.dataset}"]
    if report.top1 is not None:
        lines.append(f"top-1 accuracy: {report.top1:.4f}")
    if report.pair is not None:
        m = report.pair
        lines.append(
            f"precision: {m.precision:.4f}  recall: {m.recall:.4f}  "
            f"f1: {m.f1:.4f}  accuracy: {m.accuracy:.4f}"
        )
        c = m.counts
        lines.append(f"counts: tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
    if report.wrong_top1:
        lines.append("")
        lines.append("wrong top-1 predictions")
        for query, predicted in report.wrong_top1:
            lines.append(f"{query}\t{predicted}")
    if report.false_positives or report.false_negatives:
        lines.append("")
        lines.append("false positive")
        for a, b in report.false_positives:
            lines.append(f"{a}\t{b}")
        lines.append("")
        lines.append("false negative")
        for a, b in report.false_negatives:
            lines.append(f"{a}\t{b}")
    if report.snapshots:
        lines.append("")
        lines.append("recommendation snapshots")
        for cell in report.snapshots:
            marks = ", ".join(
                f"{surface}{'*' if correct else ''}" for surface, correct in cell.entries
            )
            lines.append(f"{cell.query}\t{cell.checkpoint_label}\t{marks}")
    return "\n".join(lines) + "\n"


def write_report_records(path: str | Path, report: EvalReport) -> None:
    """Machine-readable mirror of :func:`render_report`, one JSON per line."""
    rows: list[dict] = [{"type": "dataset", "name": report.dataset}]
    if report.top1 is not None:
        rows.append({"type": "metric", "name": "top1_accuracy", "value": report.top1})
    if report.pair is not None:
        m = report.pair
        for name in ("precision", "recall", "f1", "accuracy"):
            rows.append({"type": "metric", "name": name, "value": getattr(m, name)})
        rows.append(
            {
                "type": "counts",
                "tp": m.counts.tp,
                "fp": m.counts.fp,
                "fn": m.counts.fn,
                "tn": m.counts.tn,
            }
        )
    for query, predicted in report.wrong_top1:
        rows.append({"type": "wrong_top1", "query": query, "predicted": predicted})
    for a, b in report.false_positives:
        rows.append({"type": "false_positive", "entity_a": a, "entity_b": b})
    for a, b in report.false_negatives:
        rows.append({"type": "false_negative", "entity_a": a, "entity_b": b})
    for cell in report.snapshots:
        rows.append(
            {
                "type": "snapshot",
                "query": cell.query,
                "checkpoint": cell.checkpoint_label,
                "entries": [[s, c] for s, c in cell.entries],
            }
        )
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
