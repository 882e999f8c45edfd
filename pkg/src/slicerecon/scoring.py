"""Per-scan anomaly score bank and validation-time score selection.

Every scan gets 8 scores: {l2, l1, ssim, dice} losses between predicted and
ground-truth next stacks, each averaged and maximized over the scan's
windows. All scores are oriented so that higher means more anomalous.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import FormatError, ScoringError, SelectionError
from .evaluation import auc
from .losses import l1_loss, l2_loss, soft_dice_loss, ssim

# order doubles as the selection tie-break (earlier wins)
METRICS = ("l2", "l1", "ssim", "dice")
AGGREGATIONS = ("average", "maximum")
SCORE_KEYS = tuple((m, a) for m in METRICS for a in AGGREGATIONS)
TABLE_HEADER = ("scan_id", "cdr") + tuple(f"{m}_{a}" for m, a in SCORE_KEYS)


def window_losses(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """The four per-window losses, computed in float64."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    return {
        "l2": float(l2_loss(p, t)),
        "l1": float(l1_loss(p, t)),
        # ssim <= 1 analytically; clamp only removes rounding below zero
        "ssim": max(0.0, 1.0 - float(ssim(p, t))),
        "dice": float(soft_dice_loss(p, t)),
    }


@dataclass
class ScoreRecord:
    scan_id: str
    cdr: float
    scores: dict  # (metric, aggregation) -> float

    def __post_init__(self):
        if set(self.scores) != set(SCORE_KEYS):
            raise ScoringError(f"score record for {self.scan_id} must have exactly the 8 bank entries")
        for k, val in self.scores.items():
            if not math.isfinite(val) or val < 0:
                raise ScoringError(f"score {k} of {self.scan_id} is {val}; scores must be finite and >= 0")

    def get(self, metric: str, aggregation: str) -> float:
        return self.scores[(metric, aggregation)]


def score_scan(
    predictions: Sequence[np.ndarray],
    ground_truths: Sequence[np.ndarray],
    scan_id: str = "",
    cdr: float = 0.0,
) -> ScoreRecord:
    if len(predictions) != len(ground_truths):
        raise ScoringError(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground-truth stacks for {scan_id!r}"
        )
    if not predictions:
        raise ScoringError(f"scan {scan_id!r} has no windows to score")
    per_window = [window_losses(p, t) for p, t in zip(predictions, ground_truths)]
    scores = {}
    for m in METRICS:
        vals = np.array([w[m] for w in per_window])
        scores[(m, "average")] = float(vals.mean())
        scores[(m, "maximum")] = float(vals.max())
    return ScoreRecord(scan_id=scan_id, cdr=float(cdr), scores=scores)


def score_reconstruction(recon, scan_id: str, cdr: float) -> ScoreRecord:
    """Score the ``[(WindowPair, predicted_stack), ...]`` output of reconstruction."""
    return score_scan([p for _, p in recon], [w.target_stack for w, _ in recon], scan_id, cdr)


@dataclass(frozen=True)
class ScoreSelection:
    metric: str
    aggregation: str
    validation_auc: float

    @property
    def column(self) -> str:
        return f"{self.metric}_{self.aggregation}"


def score_aucs(records: Sequence[ScoreRecord], positive_cdrs: Iterable[float] | None = None) -> dict:
    """AUC of every bank entry for CDR 0 (negative) vs ``positive_cdrs`` (default: all others)."""
    pos_set = None if positive_cdrs is None else {float(c) for c in positive_cdrs}
    neg = [r for r in records if r.cdr == 0.0]
    pos = [r for r in records if r.cdr != 0.0 and (pos_set is None or r.cdr in pos_set)]
    if not neg or not pos:
        raise SelectionError(
            f"selection needs both classes; got {len(neg)} healthy and {len(pos)} positive scans"
        )
    labels = [0] * len(neg) + [1] * len(pos)
    return {k: auc([r.scores[k] for r in neg] + [r.scores[k] for r in pos], labels) for k in SCORE_KEYS}


def select_score(records: Sequence[ScoreRecord], positive_cdrs: Iterable[float] | None = None) -> ScoreSelection:
    """Pick the bank entry with the highest validation AUC; ties go to the earlier entry."""
    aucs = score_aucs(records, positive_cdrs)
    best = max(SCORE_KEYS, key=lambda k: (aucs[k], -SCORE_KEYS.index(k)))
    return ScoreSelection(metric=best[0], aggregation=best[1], validation_auc=aucs[best])


# ---------------------------------------------------------------- score tables


def _fmt_cdr(cdr: float) -> str:
    return f"{cdr:g}"


def format_score_table(records: Sequence[ScoreRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in records:
        w.writerow([r.scan_id, _fmt_cdr(r.cdr)] + [repr(r.scores[k]) for k in SCORE_KEYS])
    return buf.getvalue()


def write_score_table(records: Sequence[ScoreRecord], path) -> None:
    Path(path).write_text(format_score_table(records), encoding="utf-8")


def read_score_table(path) -> list[ScoreRecord]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TABLE_HEADER:
        raise FormatError(f"{path}: score table header must be {','.join(TABLE_HEADER)}")
    records = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(TABLE_HEADER):
            raise FormatError(f"{path}:{line_no}: expected {len(TABLE_HEADER)} columns, got {len(row)}")
        try:
            vals = [float(x) for x in row[2:]]
            cdr = float(row[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{line_no}: {exc}") from exc
        records.append(ScoreRecord(row[0], cdr, dict(zip(SCORE_KEYS, vals))))
    return records
