"""Classification metrics and inter-annotator agreement.

Weighted accuracy is the mean of recall and specificity, so a constant
predictor scores exactly 0.5 regardless of class balance.  Agreement is
Krippendorff's alpha for nominal data, computed from the coincidence
matrix so that units with missing ratings contribute what they can.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .datagen import LABELS7
from .errors import ContractError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_binary(arr, name):
    a = np.asarray(arr)
    if a.ndim != 1 or a.size == 0:
        raise ContractError(f"{name} must be a non-empty 1-d array")
    if not np.isin(a, (0, 1)).all():
        raise ContractError(f"{name} must contain only 0 and 1")
    return a.astype(np.int64)


def confusion(y_true, y_pred) -> ConfusionCounts:
    t = _as_binary(y_true, "y_true")
    p = _as_binary(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ContractError(f"length mismatch: {t.shape[0]} labels vs {p.shape[0]} predictions")
    return ConfusionCounts(
        tp=int(((t == 1) & (p == 1)).sum()),
        fp=int(((t == 0) & (p == 1)).sum()),
        tn=int(((t == 0) & (p == 0)).sum()),
        fn=int(((t == 1) & (p == 0)).sum()),
    )


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def weighted_accuracy(c: ConfusionCounts) -> float:
    """Mean of recall and specificity.  Needs both classes present."""
    pos = c.tp + c.fn
    neg = c.tn + c.fp
    if pos == 0 or neg == 0:
        raise ContractError(f"weighted accuracy needs both classes, got {pos} positive / {neg} negative")
    return 0.5 * (c.tp / pos + c.tn / neg)


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def summarize(y_true, y_pred) -> dict:
    c = confusion(y_true, y_pred)
    precision, recall, f1 = prf1(c)
    return {
        "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
        "accuracy": accuracy(c),
        "weighted_accuracy": weighted_accuracy(c),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


# -- agreement ---------------------------------------------------------------


def _clean_units(ratings):
    units = []
    for u in ratings:
        vals = [v for v in u if v is not None]
        if len(vals) >= 2:
            units.append(vals)
    return units


def krippendorff_alpha(ratings, metric: str = "nominal") -> float:
    """ratings: one sequence per unit of category labels, None for missing.

    Units rated by fewer than two annotators drop out.  When every pairable
    value is identical there is no disagreement to expect and the score is
    1.0 by convention (logged, since it usually means a degenerate sample).
    """
    if metric != "nominal":
        raise ContractError(f"only nominal agreement is implemented, got {metric!r}")
    units = _clean_units(ratings)
    if not units:
        raise ContractError("no unit carries two or more ratings")
    cats = sorted({v for u in units for v in u})
    index = {c: i for i, c in enumerate(cats)}
    k = len(cats)

    o = np.zeros((k, k), dtype=np.float64)
    for vals in units:
        m = len(vals)
        w = 1.0 / (m - 1)
        for i, a in enumerate(vals):
            for j, b in enumerate(vals):
                if i != j:
                    o[index[a], index[b]] += w
    n_c = o.sum(axis=1)
    n = o.sum()

    off = ~np.eye(k, dtype=bool)
    d_obs = o[off].sum() / n
    d_exp = (np.outer(n_c, n_c)[off]).sum() / (n * (n - 1.0))
    if d_exp == 0.0:
        log.info("all pairable ratings identical; agreement is 1.0 by convention")
        return 1.0
    return 1.0 - d_obs / d_exp


def simple_agreement(ratings) -> float:
    """Fraction of agreeing rater pairs, averaged over pairable units."""
    units = _clean_units(ratings)
    if not units:
        raise ContractError("no unit carries two or more ratings")
    fracs = []
    for vals in units:
        m = len(vals)
        agree = sum(vals[i] == vals[j] for i in range(m) for j in range(i + 1, m))
        fracs.append(agree / (m * (m - 1) / 2))
    return float(np.mean(fracs))


def load_annotations(path, allowed=LABELS7) -> list[list]:
    """TSV: unit id, then one column per annotator; '-' marks missing."""
    allowed = set(allowed)
    units = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cells = line.split("\t")
            if len(cells) < 3:
                raise DataError(f"{path}:{lineno}: need a unit id and at least two rating columns")
            vals = []
            for cell in cells[1:]:
                cell = cell.strip()
                if cell == "-" or cell == "":
                    vals.append(None)
                elif cell in allowed:
                    vals.append(cell)
                else:
                    raise DataError(f"{path}:{lineno}: unknown annotation level {cell!r}")
            units.append(vals)
    if not units:
        raise DataError(f"{path}: no annotation rows")
    return units


__all__ = [
    "ConfusionCounts", "confusion", "accuracy", "weighted_accuracy", "prf1",
    "summarize", "krippendorff_alpha", "simple_agreement", "load_annotations",
]
