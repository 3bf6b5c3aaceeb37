"""Quadratic-time reference implementations of the detection metrics.

Deliberately naive: explicit pairwise comparisons and full threshold sweeps,
using exact rational arithmetic so the fast versions can be compared for
exact equality.
"""

import math
from fractions import Fraction


def auroc(pos, neg):
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            wins += 1 if p > q else Fraction(1, 2) if p == q else 0
    return wins / (len(pos) * len(neg))


def _accepted(scores, delta):
    return sum(1 for s in scores if s >= delta)


def tnr_at_tpr(pos, neg, target=0.95):
    # largest delta whose acceptance rate on pos is still >= target (up to float rounding)
    best = None
    for delta in sorted(set(pos)):
        if _accepted(pos, delta) >= target * len(pos) - 1e-9:
            best = delta
    return Fraction(sum(1 for s in neg if s < best), len(neg))


def aupr_terms(pos, neg):
    """(recall step, precision) at every threshold where recall increases."""
    out, prev_tp = [], 0
    for delta in sorted(set(pos) | set(neg), reverse=True):
        tp, fp = _accepted(pos, delta), _accepted(neg, delta)
        if tp > prev_tp:
            out.append((tp - prev_tp, len(pos), tp, tp + fp))
            prev_tp = tp
    return out


def aupr_exact(pos, neg):
    return sum(Fraction(step, n) * Fraction(tp, total) for step, n, tp, total in aupr_terms(pos, neg))


def aupr(pos, neg):
    """Average precision with per-step float terms summed exactly (math.fsum)."""
    return math.fsum((step / n) * (tp / total) for step, n, tp, total in aupr_terms(pos, neg))


def verification_accuracy(pos, neg):
    best = Fraction(0)
    for delta in set(pos) | set(neg):
        tpr = Fraction(_accepted(pos, delta), len(pos))
        tnr = Fraction(len(neg) - _accepted(neg, delta), len(neg))
        best = max(best, (tpr + tnr) / 2)
    return best
