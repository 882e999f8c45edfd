"""ROC curves, exact AUC, CDR-staged comparisons and score histograms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluationError

log = logging.getLogger(__name__)

DEFAULT_BINS = 30
STAGES = (0.5, 1.0, 2.0)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise EvaluationError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(f"both classes required; got {n_neg} negative and {n_pos} positive")
    return s, y, n_pos, n_neg


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` vertices, one per distinct score, thresholds descending.

    A sample is called positive when its score is >= the threshold. The first
    vertex is (0, 0) with threshold +inf; tied scores move the curve in a
    single step.
    """
    s, y, n_pos, n_neg = _prepare(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        points.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j
    return points


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg), by exact pair counting."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    neg = np.sort(s[~y])
    pos = s[y]
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((not_above - below).sum())
    return (2 * wins + ties) / (2 * n_pos * n_neg)


def trapezoid_area(points: Sequence[tuple]) -> float:
    area = 0.0
    for (x0, y0, *_), (x1, y1, *_) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


@dataclass
class Comparison:
    name: str
    negative: list
    positive: list
    roc_points: list
    auc: float
    n_neg: int
    n_pos: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "negative_cdrs": self.negative,
            "positive_cdrs": self.positive,
            "n_neg": self.n_neg,
            "n_pos": self.n_pos,
            "auc": self.auc,
            "roc_points": [
                {"fpr": f, "tpr": t, "threshold": None if math.isinf(th) else th}
                for f, t, th in self.roc_points
            ],
        }


@dataclass
class EvalReport:
    score: str
    validation_auc: float | None
    comparisons: list[Comparison] = field(default_factory=list)
    distributions: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def comparison(self, name: str) -> Comparison:
        for c in self.comparisons:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "validation_auc": self.validation_auc,
            "comparisons": [c.to_dict() for c in self.comparisons],
            "distributions": self.distributions,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _cdr_name(c: float) -> str:
    return f"{c:g}"


def export_distributions(records, selection, bins: int = DEFAULT_BINS) -> dict:
    """Per-CDR histogram counts of the selected score over shared, pooled-range bin edges."""
    if bins < 1:
        raise EvaluationError("bins must be >= 1")
    key = (selection.metric, selection.aggregation)
    vals = np.array([r.scores[key] for r in records], dtype=np.float64)
    if vals.size == 0:
        raise EvaluationError("no records to histogram")
    edges = np.histogram_bin_edges(vals, bins=bins)
    counts = {}
    for c in sorted({r.cdr for r in records}):
        v = np.array([r.scores[key] for r in records if r.cdr == c])
        counts[_cdr_name(c)] = np.histogram(v, bins=edges)[0].astype(int).tolist()
    return {"score": f"{key[0]}_{key[1]}", "bin_edges": edges.tolist(), "counts": counts}


def evaluate_staged(records, selection, bins: int = DEFAULT_BINS) -> EvalReport:
    """CDR 0 against all other CDRs and against each stage, on the selected score.

    Stages missing from ``records`` are skipped and noted in ``warnings``.
    """
    key = (selection.metric, selection.aggregation)
    neg = [r.scores[key] for r in records if r.cdr == 0.0]
    if not neg:
        raise EvaluationError("no CDR 0 scans to compare against")
    report = EvalReport(score=f"{key[0]}_{key[1]}", validation_auc=selection.validation_auc)
    groups = [("cdr0_vs_all", [c for c in STAGES])] + [(f"cdr0_vs_{_cdr_name(c)}", [c]) for c in STAGES]
    for name, positives in groups:
        pos = [r.scores[key] for r in records if r.cdr in positives]
        if not pos:
            msg = f"{name}: no scans with CDR in {[_cdr_name(c) for c in positives]}; comparison skipped"
            log.warning(msg)
            report.warnings.append(msg)
            continue
        scores = neg + pos
        labels = [0] * len(neg) + [1] * len(pos)
        report.comparisons.append(
            Comparison(
                name=name,
                negative=[0.0],
                positive=list(positives),
                roc_points=roc_curve(scores, labels),
                auc=auc(scores, labels),
                n_neg=len(neg),
                n_pos=len(pos),
            )
        )
    report.distributions = export_distributions(records, selection, bins)
    return report
