"""Detection metrics. Positives are in-distribution; higher score means more in-distribution.

A sample is accepted at threshold ``delta`` when ``score >= delta``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .scoring import calibrate_threshold

METRIC_COLUMNS = ("tnr95", "auroc", "ver_acc", "aupr_in")


def _pools(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score pools must be nonempty")
    return pos, neg


def tnr_at_tpr(pos, neg, target_tpr: float = 0.95) -> float:
    pos, neg = _pools(pos, neg)
    delta = calibrate_threshold(pos, target_tpr).delta
    return int(np.sum(neg < delta)) / neg.size


def auroc(pos, neg) -> float:
    """P(pos > neg) + P(pos == neg) / 2 via the Mann-Whitney rank sum."""
    pos, neg = _pools(pos, neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    # average ranks are multiples of 1/2, so 2*U is an exact integer
    twice_u = int(round(2.0 * ranks[: pos.size].sum())) - pos.size * (pos.size + 1)
    return twice_u / (2 * pos.size * neg.size)


def _pr_points(pos, neg):
    """(tp, fp) counts at every distinct threshold, thresholds descending."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    sp, sn = np.sort(pos), np.sort(neg)
    tp = pos.size - np.searchsorted(sp, thresholds, side="left")
    fp = neg.size - np.searchsorted(sn, thresholds, side="left")
    return thresholds, tp, fp


def aupr(pos, neg, positive_class: str = "id") -> float:
    """Step-wise area under the precision-recall curve (average precision).

    With ``positive_class="ood"`` the negative pool plays the positive role and
    lower scores count as more positive.
    """
    pos, neg = _pools(pos, neg)
    if positive_class == "ood":
        pos, neg = -neg, -pos
    elif positive_class != "id":
        raise ValueError(f"positive_class must be 'id' or 'ood', not {positive_class!r}")
    _, tp, fp = _pr_points(pos, neg)
    n = pos.size
    terms, prev_tp = [], 0
    for t, f in zip(tp.tolist(), fp.tolist()):
        if t > prev_tp:
            terms.append(((t - prev_tp) / n) * (t / (t + f)))
            prev_tp = t
    return math.fsum(terms)


def verification_accuracy(pos, neg) -> float:
    """Best equal-prior accuracy 0.5 * (TPR + TNR) over thresholds at the pooled scores."""
    pos, neg = _pools(pos, neg)
    thresholds = np.unique(np.concatenate([pos, neg]))
    tp = pos.size - np.searchsorted(np.sort(pos), thresholds, side="left")
    tn = np.searchsorted(np.sort(neg), thresholds, side="left")
    # integer numerator over 2*n_pos*n_neg, so the result is a single correctly rounded division
    best = max(a * neg.size + b * pos.size for a, b in zip(tp.tolist(), tn.tolist()))
    return best / (2 * pos.size * neg.size)


def roc_curve(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) from the strictest threshold to accept-everything, with the (0, 0) origin."""
    pos, neg = _pools(pos, neg)
    _, tp, fp = _pr_points(pos, neg)
    return np.concatenate([[0.0], fp / neg.size]), np.concatenate([[0.0], tp / pos.size])


def pr_curve(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) with ID as the positive class."""
    pos, neg = _pools(pos, neg)
    _, tp, fp = _pr_points(pos, neg)
    return tp / pos.size, tp / (tp + fp)


@dataclass
class ScorePools:
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        self.pos, self.neg = _pools(self.pos, self.neg)

    def metrics(self, target_tpr: float = 0.95) -> dict:
        return {
            "tnr95": tnr_at_tpr(self.pos, self.neg, target_tpr),
            "auroc": auroc(self.pos, self.neg),
            "ver_acc": verification_accuracy(self.pos, self.neg),
            "aupr_in": aupr(self.pos, self.neg, "id"),
        }


def write_metrics_table(path, rows: list[dict]) -> None:
    """One row per (ID, negative) pair; columns follow the results-table order plus pool sizes."""
    cols = ["id_set", "neg_set", "n_pos", "n_neg", *METRIC_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
