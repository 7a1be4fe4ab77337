"""Cross-task score standardization and box-plot reporting.

Scores from heterogeneous metrics are standardized per task column with the
population standard deviation (so a two-model column gives z = ±1), averaged
per model into a single index, and summarized as median/IQR/outlier box
statistics rendered to a dependency-free SVG.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ScoreMatrix:
    """models x tasks score grid; missing cells simply absent."""
    cells: dict[tuple[str, str], float] = field(default_factory=dict)
    metrics: dict[str, str] = field(default_factory=dict)  # task -> metric name

    def add(self, model_id: str, task: str, value: float, metric: str = "score"):
        known = self.metrics.setdefault(task, metric)
        if known != metric:
            raise ValueError(f"task {task!r} mixes metrics {known!r} and {metric!r}")
        self.cells[(model_id, task)] = float(value)

    @property
    def models(self) -> list[str]:
        return sorted({m for m, _ in self.cells})

    @property
    def tasks(self) -> list[str]:
        return sorted({t for _, t in self.cells})

    def column(self, task: str) -> dict[str, float]:
        return {m: v for (m, t), v in self.cells.items() if t == task}


@dataclass
class BoxStats:
    median: float
    q1: float
    q3: float
    iqr: float
    outliers: list[float]
    low_fence: float
    high_fence: float


@dataclass
class ZScoreReport:
    zscores: dict[tuple[str, str], float]
    dropped_tasks: list[str]
    model_index: dict[str, float] = field(default_factory=dict)
    model_task_counts: dict[str, int] = field(default_factory=dict)
    model_boxes: dict[str, BoxStats] = field(default_factory=dict)


def zscores(matrix: ScoreMatrix) -> ZScoreReport:
    """Standardize every task column: z = (x - mean) / population std.

    Columns with fewer than two entries or zero variance carry no ranking
    information and are dropped with a warning.
    """
    report = ZScoreReport(zscores={}, dropped_tasks=[])
    for task in matrix.tasks:
        column = matrix.column(task)
        if len(column) < 2:
            log.warning("task %s has %d models; dropped", task, len(column))
            report.dropped_tasks.append(task)
            continue
        values = np.array(list(column.values()), dtype=np.float64)
        std = float(values.std())  # population std
        if std == 0.0:
            log.warning("task %s has zero variance; dropped", task)
            report.dropped_tasks.append(task)
            continue
        mean = float(values.mean())
        for model_id, value in column.items():
            report.zscores[(model_id, task)] = (value - mean) / std
    return report


def aggregate_model_index(report: ZScoreReport) -> ZScoreReport:
    """Mean z per model over its available tasks (the global index)."""
    per_model: dict[str, list[float]] = {}
    for (model_id, _), z in report.zscores.items():
        per_model.setdefault(model_id, []).append(z)
    for model_id in sorted(per_model):
        zs = per_model[model_id]
        report.model_index[model_id] = float(np.mean(zs))
        report.model_task_counts[model_id] = len(zs)
        report.model_boxes[model_id] = box_stats(zs)
    return report


def box_stats(values: list[float]) -> BoxStats:
    """Median, quartiles (linear interpolation between order statistics,
    the spreadsheet-inclusive convention), and 1.5*IQR outlier fences.

    Outliers lie strictly outside the fences.
    """
    if not values:
        raise ValueError("need at least one value")
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = (float(q) for q in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    low = q1 - 1.5 * iqr
    high = q3 + 1.5 * iqr
    outliers = sorted(float(v) for v in arr if v < low or v > high)
    return BoxStats(median=med, q1=q1, q3=q3, iqr=iqr, outliers=outliers,
                    low_fence=low, high_fence=high)


# -- CSV / SVG output ---------------------------------------------------------

def matrix_from_results(results) -> ScoreMatrix:
    matrix = ScoreMatrix()
    for r in results:
        matrix.add(r.model_id, r.task, r.value, metric=r.metric)
    return matrix


def write_zscores_csv(path: str | Path, report: ZScoreReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "task", "z"])
        for (model_id, task) in sorted(report.zscores):
            writer.writerow([model_id, task, f"{report.zscores[(model_id, task)]:.12g}"])


def write_model_index_csv(path: str | Path, report: ZScoreReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "mean_z", "n_tasks"])
        for model_id in sorted(report.model_index):
            writer.writerow([model_id, f"{report.model_index[model_id]:.12g}",
                             report.model_task_counts[model_id]])


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_box_plot(report: ZScoreReport, title: str = "model z-score distribution",
                    width_per_box: int = 90, height: int = 360) -> str:
    """One box (median/IQR/whiskers/outlier dots) per model, as a plain SVG.

    Output bytes depend only on the input values, so golden-file comparisons
    are stable across platforms.
    """
    models = sorted(report.model_boxes)
    if not models:
        raise ValueError("nothing to plot")
    margin_left, margin_top, margin_bottom = 60, 40, 60
    width = margin_left + width_per_box * len(models) + 20
    plot_h = height - margin_top - margin_bottom

    points: list[float] = []
    for m in models:
        b = report.model_boxes[m]
        whisk_lo, whisk_hi = _whiskers(report, m)
        points.extend([whisk_lo, whisk_hi, b.q1, b.q3, b.median, *b.outliers])
    lo, hi = min(points), max(points)
    if hi == lo:
        hi = lo + 1.0
    pad = 0.08 * (hi - lo)
    lo -= pad
    hi += pad

    def y(v: float) -> float:
        return margin_top + (hi - v) / (hi - lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    if lo < 0 < hi:
        zero_y = _fmt(y(0.0))
        parts.append(f'<line x1="{margin_left}" y1="{zero_y}" x2="{width - 20}" '
                     f'y2="{zero_y}" stroke="#bbbbbb" stroke-dasharray="4,3"/>')
    for tick in _ticks(lo, hi):
        ty = _fmt(y(tick))
        parts.append(f'<line x1="{margin_left - 5}" y1="{ty}" x2="{margin_left}" '
                     f'y2="{ty}" stroke="black"/>')
        parts.append(f'<text x="{margin_left - 8}" y="{ty}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10" dy="3">{_fmt(tick)}</text>')

    box_w = width_per_box * 0.5
    for i, m in enumerate(models):
        b = report.model_boxes[m]
        cx = margin_left + width_per_box * (i + 0.5)
        x0, x1 = cx - box_w / 2, cx + box_w / 2
        whisk_lo, whisk_hi = _whiskers(report, m)
        parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(y(whisk_lo))}" x2="{_fmt(cx)}" '
                     f'y2="{_fmt(y(b.q1))}" stroke="black"/>')
        parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(y(b.q3))}" x2="{_fmt(cx)}" '
                     f'y2="{_fmt(y(whisk_hi))}" stroke="black"/>')
        for v, name in ((whisk_lo, "lo"), (whisk_hi, "hi")):
            parts.append(f'<line x1="{_fmt(cx - box_w / 4)}" y1="{_fmt(y(v))}" '
                         f'x2="{_fmt(cx + box_w / 4)}" y2="{_fmt(y(v))}" stroke="black"/>')
        parts.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y(b.q3))}" width="{_fmt(box_w)}" '
                     f'height="{_fmt(y(b.q1) - y(b.q3))}" fill="#9ecae1" stroke="black"/>')
        parts.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(y(b.median))}" x2="{_fmt(x1)}" '
                     f'y2="{_fmt(y(b.median))}" stroke="black" stroke-width="2"/>')
        for v in b.outliers:
            parts.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(y(v))}" r="3" '
                         f'fill="none" stroke="black"/>')
        parts.append(f'<text x="{_fmt(cx)}" y="{height - margin_bottom + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" font-size="10" '
                     f'transform="rotate(30 {_fmt(cx)} {height - margin_bottom + 16})">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _whiskers(report: ZScoreReport, model_id: str) -> tuple[float, float]:
    b = report.model_boxes[model_id]
    inside = [z for (m, _), z in report.zscores.items()
              if m == model_id and b.low_fence <= z <= b.high_fence]
    if not inside:
        return b.q1, b.q3
    return min(inside), max(inside)


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    step = (hi - lo) / (n - 1)
    magnitude = 10 ** math.floor(math.log10(step)) if step > 0 else 1.0
    nice = min(s for s in (1, 2, 2.5, 5, 10) if s * magnitude >= step) * magnitude
    first = math.ceil(lo / nice) * nice
    ticks = []
    t = first
    while t <= hi + 1e-9:
        ticks.append(round(t, 10))
        t += nice
    return ticks
