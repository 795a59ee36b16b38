"""Accuracy, confusion matrices, per-class metrics, and comparison tables.

Headline accuracy counts rejections as errors, so raising the gate can only
be justified through the coverage / accuracy-on-decided numbers that are
reported alongside it. Reports serialize to ``key<TAB>value`` lines at full
precision (round-trip exact) and pretty-print percentages at 2 decimals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import REJECT, PredictionRecord

__all__ = ["EvaluationReport", "evaluate", "comparison_table", "report_to_lines",
           "report_from_lines", "report_to_text"]


@dataclass
class EvaluationReport:
    class_names: list[str]
    accuracy: float  # percent; rejections count as wrong
    confusion: np.ndarray  # (C, C+1) ints; rows truth, last column REJECT
    precision: np.ndarray  # per class, in [0, 1]
    recall: np.ndarray  # per class, in [0, 1]
    n_total: int
    n_rejected: int
    coverage: float  # percent of records that were decided
    accuracy_on_decided: float  # percent among non-rejected records

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EvaluationReport)
            and self.class_names == other.class_names
            and self.accuracy == other.accuracy
            and np.array_equal(self.confusion, other.confusion)
            and np.array_equal(self.precision, other.precision)
            and np.array_equal(self.recall, other.recall)
            and self.n_total == other.n_total
            and self.n_rejected == other.n_rejected
            and self.coverage == other.coverage
            and self.accuracy_on_decided == other.accuracy_on_decided
        )


def evaluate(
    records: list[PredictionRecord],
    truth: dict[str, str],
    class_names: list[str] | None = None,
) -> EvaluationReport:
    """Score decisions against true labels keyed by image id."""
    if not records:
        raise ValueError("no records to evaluate")
    missing = [r.image_id for r in records if r.image_id not in truth]
    if missing:
        raise ValueError(f"records without truth labels: {missing[:10]}")
    names = class_names if class_names is not None else sorted(set(truth.values()))
    index = {name: i for i, name in enumerate(names)}
    c = len(names)
    confusion = np.zeros((c, c + 1), dtype=np.int64)
    correct = 0
    for r in records:
        t = index[truth[r.image_id]]
        if r.decision == REJECT:
            confusion[t, c] += 1
        else:
            if r.decision not in index:
                raise ValueError(f"decision {r.decision!r} not in class set {names}")
            p = index[r.decision]
            confusion[t, p] += 1
            if p == t:
                correct += 1
    n = len(records)
    n_rejected = int(confusion[:, c].sum())
    decided = n - n_rejected
    diag = np.diag(confusion[:, :c]).astype(np.float64)
    col = confusion[:, :c].sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros(c), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(c), where=row > 0)
    return EvaluationReport(
        class_names=list(names),
        accuracy=100.0 * correct / n,
        confusion=confusion,
        precision=precision,
        recall=recall,
        n_total=n,
        n_rejected=n_rejected,
        coverage=100.0 * decided / n,
        accuracy_on_decided=100.0 * correct / decided if decided else 0.0,
    )


def report_to_lines(report: EvaluationReport) -> list[str]:
    """Machine-readable key<TAB>value lines at full float precision."""
    lines = [f"classes\t{','.join(report.class_names)}"]
    lines.append(f"accuracy\t{report.accuracy!r}")
    lines.append(f"n_total\t{report.n_total}")
    lines.append(f"n_rejected\t{report.n_rejected}")
    lines.append(f"coverage\t{report.coverage!r}")
    lines.append(f"accuracy_on_decided\t{report.accuracy_on_decided!r}")
    for i, name in enumerate(report.class_names):
        row = ",".join(str(int(v)) for v in report.confusion[i])
        lines.append(f"confusion:{name}\t{row}")
    lines.append(f"precision\t{','.join(repr(float(v)) for v in report.precision)}")
    lines.append(f"recall\t{','.join(repr(float(v)) for v in report.recall)}")
    return lines


def report_from_lines(lines: list[str]) -> EvaluationReport:
    fields: dict[str, str] = {}
    confusion_rows: dict[str, str] = {}
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        key, _, value = line.partition("\t")
        if key.startswith("confusion:"):
            confusion_rows[key[len("confusion:") :]] = value
        else:
            fields[key] = value
    names = fields["classes"].split(",")
    confusion = np.array(
        [[int(v) for v in confusion_rows[name].split(",")] for name in names], dtype=np.int64
    )
    return EvaluationReport(
        class_names=names,
        accuracy=float(fields["accuracy"]),
        confusion=confusion,
        precision=np.array([float(v) for v in fields["precision"].split(",")]),
        recall=np.array([float(v) for v in fields["recall"].split(",")]),
        n_total=int(fields["n_total"]),
        n_rejected=int(fields["n_rejected"]),
        coverage=float(fields["coverage"]),
        accuracy_on_decided=float(fields["accuracy_on_decided"]),
    )


def report_to_text(report: EvaluationReport) -> str:
    """Human-readable summary; percentages at 2 decimals."""
    width = max(len(n) for n in report.class_names + [REJECT])
    out = [
        f"accuracy: {report.accuracy:.2f}%  (rejected {report.n_rejected}/{report.n_total};"
        f" coverage {report.coverage:.2f}%, accuracy on decided {report.accuracy_on_decided:.2f}%)"
    ]
    header = " ".join(f"{n:>{width}}" for n in report.class_names + [REJECT])
    corner = "truth/pred"
    out.append(f"{corner:>{width}} {header}")
    for i, name in enumerate(report.class_names):
        row = " ".join(f"{int(v):>{width}}" for v in report.confusion[i])
        out.append(f"{name:>{width}} {row}")
    for i, name in enumerate(report.class_names):
        out.append(
            f"{name:>{width}} precision {100.0 * report.precision[i]:6.2f}%"
            f" recall {100.0 * report.recall[i]:6.2f}%"
        )
    return "\n".join(out)


def comparison_table(
    named_reports: list[tuple[str, dict[str, EvaluationReport]]],
    splits: tuple[str, ...] = ("train", "val", "test"),
) -> tuple[str, list[str]]:
    """Model-by-split accuracy table, plain text plus machine lines.

    Returns (text, lines); lines are ``model<TAB>split<TAB>accuracy`` with
    full precision, one per populated cell.
    """
    if not named_reports:
        raise ValueError("comparison_table needs at least one report set")
    for name, _ in named_reports:
        if not name:
            raise ValueError("empty model name")
    width = max(max(len(n) for n, _ in named_reports), len("model"))
    text = [f"{'model':<{width}} " + " ".join(f"{s:>8}" for s in splits)]
    lines = []
    for name, by_split in named_reports:
        cells = []
        for s in splits:
            report = by_split.get(s)
            if report is None:
                cells.append(f"{'-':>8}")
            else:
                cells.append(f"{report.accuracy:8.2f}")
                lines.append(f"{name}\t{s}\t{report.accuracy!r}")
        text.append(f"{name:<{width}} " + " ".join(cells))
    return "\n".join(text), lines
