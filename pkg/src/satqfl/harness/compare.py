"""Side-by-side Avg/Final table across runs, best value per column flagged."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .experiment import METRICS, MetricsReport


class ShapeMismatch(ValueError):
    pass


@dataclass
class Comparison:
    columns: list  # "metric_avg" / "metric_final"
    labels: list
    values: list  # per label, one float per column
    best: list  # per column, set of row indices holding the best value

    def is_best(self, row: int, col: int) -> bool:
        return row in self.best[col]

    def to_markdown(self) -> str:
        head = "| run | " + " | ".join(self.columns) + " |"
        sep = "|---" * (len(self.columns) + 1) + "|"
        lines = [head, sep]
        for i, (lab, vals) in enumerate(zip(self.labels, self.values)):
            cells = []
            for j, v in enumerate(vals):
                s = "nan" if math.isnan(v) else f"{v:.4f}"
                cells.append(f"**{s}**" if self.is_best(i, j) else s)
            lines.append(f"| {lab} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run"] + self.columns + ["best_columns"])
            for i, (lab, vals) in enumerate(zip(self.labels, self.values)):
                best = ";".join(c for j, c in enumerate(self.columns) if self.is_best(i, j))
                w.writerow([lab] + [repr(v) for v in vals] + [best])


def compare_runs(reports, labels=None, tol: float = 1e-12) -> Comparison:
    reports = list(reports)
    if len(reports) < 2:
        raise ShapeMismatch("need at least two reports to compare")
    counts = {r.rounds for r in reports}
    if len(counts) != 1:
        raise ShapeMismatch(f"round counts differ: {sorted(counts)}")
    labels = list(labels) if labels is not None else [r.label or f"run{i}" for i, r in enumerate(reports)]
    columns, higher = [], []
    for name, _, _, hi in METRICS:
        columns += [f"{name}_avg", f"{name}_final"]
        higher += [hi, hi]
    values = []
    for r in reports:
        agg = r.aggregates()
        values.append([x for name, *_ in METRICS for x in agg[name]])
    best = []
    for j, hi in enumerate(higher):
        col = [row[j] for row in values]
        finite = [v for v in col if not math.isnan(v)]
        if not finite:
            best.append(set())
            continue
        target = max(finite) if hi else min(finite)
        best.append({i for i, v in enumerate(col) if not math.isnan(v) and abs(v - target) <= tol})
    return Comparison(columns, labels, values, best)


__all__ = ["Comparison", "MetricsReport", "ShapeMismatch", "compare_runs"]
