"""
Binary confusion matrix and the derived accuracy / precision / recall / F1.

Malignant (label 1) is the positive class. Ratios with a zero denominator are
reported as ``None`` and listed in ``MetricsReport.undefined`` instead of
propagating NaN.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

from .errors import UsageError

CLASS_NAMES = ("benign", "malignant")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with benign treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    def as_rows(self) -> List[List[int]]:
        """Rows are actual class, columns predicted class, benign first."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


def accumulate(cm: ConfusionMatrix, predicted: int, actual: int) -> ConfusionMatrix:
    if predicted not in (0, 1) or actual not in (0, 1):
        raise UsageError(f"labels must be 0 or 1, got predicted={predicted}, actual={actual}")
    if predicted == 1:
        return ConfusionMatrix(cm.tp + (actual == 1), cm.tn, cm.fp + (actual == 0), cm.fn)
    return ConfusionMatrix(cm.tp, cm.tn + (actual == 0), cm.fp, cm.fn + (actual == 1))


def confusion_from_labels(predicted: Iterable[int], actual: Iterable[int]) -> ConfusionMatrix:
    cm = ConfusionMatrix()
    for p, a in zip(predicted, actual):
        cm = accumulate(cm, int(p), int(a))
    return cm


@dataclass
class MetricsReport:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    magnification: Optional[str] = None
    undefined: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


def compute_metrics(cm: ConfusionMatrix, magnification: str | None = None) -> MetricsReport:
    if cm.total == 0:
        raise UsageError("cannot compute metrics from an empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = None
    if precision is not None and recall is not None:
        # harmonic mean of precision and recall
        f1 = _ratio(2 * precision * recall, precision + recall)
    undefined = [name for name, v in
                 (("precision", precision), ("recall", recall), ("f1", f1)) if v is None]
    return MetricsReport(accuracy, precision, recall, f1, magnification, undefined)


def f1_from_precision_recall(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actual\\predicted", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, cm.as_rows()):
            writer.writerow([name, *row])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    (tn, fp), (fn, tp) = [[int(v) for v in row[1:]] for row in rows[1:3]]
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def confusion_svg(cm: ConfusionMatrix, title: str = "") -> str:
    """A 2x2 heatmap as a standalone SVG document."""
    cell, left, top = 110, 110, 60 if title else 40
    rows = cm.as_rows()
    peak = max(max(r) for r in rows) or 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + 2 * cell + 20}" '
        f'height="{top + 2 * cell + 40}" font-family="sans-serif" font-size="14">'
    ]
    if title:
        parts.append(f'<text x="{left + cell}" y="24" text-anchor="middle">{title}</text>')
    for j, name in enumerate(CLASS_NAMES):
        parts.append(f'<text x="{left + j * cell + cell // 2}" y="{top - 8}" text-anchor="middle">{name}</text>')
        parts.append(f'<text x="{left - 8}" y="{top + j * cell + cell // 2}" text-anchor="end">{name}</text>')
    for i, row in enumerate(rows):
        for j, count in enumerate(row):
            shade = int(255 - 200 * count / peak)
            text_color = "white" if shade < 128 else "black"
            x, y = left + j * cell, top + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="black"/>')
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 5}" '
                         f'text-anchor="middle" fill="{text_color}">{count}</text>')
    parts.append(f'<text x="{left + cell}" y="{top + 2 * cell + 28}" text-anchor="middle">predicted</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: MetricsReport, cm: ConfusionMatrix, path, svg: bool = False) -> dict:
    """Write ``metrics.json`` and ``confusion.csv`` (and ``confusion.svg``) into ``path``.

    Returns the paths written, keyed by kind.
    """
    if path is None or str(path) == "":
        raise UsageError("report path must not be empty")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        payload = {**report.to_dict(), "confusion": asdict(cm), "n": cm.total}
        written = {"json": out / "metrics.json", "csv": out / "confusion.csv"}
        written["json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_confusion_csv(cm, written["csv"])
        if svg:
            written["svg"] = out / "confusion.svg"
            written["svg"].write_text(confusion_svg(cm, report.magnification or ""))
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return written
