import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import brute
from dvn.metrics import (
    ScorePools,
    aupr,
    auroc,
    pr_curve,
    roc_curve,
    tnr_at_tpr,
    verification_accuracy,
    write_metrics_table,
)

pools = st.lists(st.integers(-6, 6).map(float), min_size=1, max_size=30)
real_pools = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30)


def test_tnr_hand_computed():
    assert tnr_at_tpr(np.arange(1, 101), [0, 5.5, 7, 50]) == 0.5


def test_tnr_perfect_separation():
    assert tnr_at_tpr([5, 6, 7], [1, 2, 3]) == 1.0


def test_tnr_same_pools_near_five_percent():
    s = np.random.default_rng(0).standard_normal(20000)
    assert abs(tnr_at_tpr(s, s) - 0.05) < 0.002


def test_auroc_examples():
    assert auroc([2, 3], [0, 1]) == 1.0
    assert auroc([1, 3], [2, 0]) == 0.75
    assert auroc([1, 1, 2, 2], [1, 2, 1, 2]) == 0.5


def test_aupr_examples():
    assert aupr([3, 1], [2]) == pytest.approx(5 / 6, abs=1e-15)
    assert aupr([1], [0]) == 1.0
    assert aupr([5, 6], [1, 2]) == 1.0


def test_aupr_ood_orientation_swaps_roles():
    pos, neg = [3.0, 1.0], [2.0]
    assert aupr(pos, neg, "ood") == aupr([-s for s in neg], [-s for s in pos], "id")
    with pytest.raises(ValueError):
        aupr(pos, neg, "both")


def test_verification_accuracy_examples():
    assert verification_accuracy([1, 3], [0, 2]) == 0.75
    assert verification_accuracy([5, 6], [1, 2]) == 1.0


@pytest.mark.parametrize("fn", [auroc, aupr, verification_accuracy, tnr_at_tpr])
def test_empty_pool_rejected(fn):
    with pytest.raises(ValueError):
        fn([], [1.0])
    with pytest.raises(ValueError):
        fn([1.0], [])


@settings(max_examples=200, deadline=None)
@given(pools, pools)
def test_matches_bruteforce_with_ties(pos, neg):
    assert auroc(pos, neg) == float(brute.auroc(pos, neg))
    assert aupr(pos, neg) == brute.aupr(pos, neg)
    assert verification_accuracy(pos, neg) == float(brute.verification_accuracy(pos, neg))
    assert tnr_at_tpr(pos, neg) == float(brute.tnr_at_tpr(pos, neg))


@settings(max_examples=100, deadline=None)
@given(pools, pools)
def test_aupr_close_to_exact_rational(pos, neg):
    assert math.isclose(aupr(pos, neg), float(brute.aupr_exact(pos, neg)), rel_tol=1e-12)


@settings(max_examples=100, deadline=None)
@given(real_pools, real_pools)
def test_monotone_invariance(pos, neg):
    f = lambda s: np.exp(np.asarray(s) / 500.0) * 3.0 + 1.0  # noqa: E731
    # strictly increasing and injective on the sampled range, so ties are preserved
    if len(set(f(pos + neg).tolist())) != len(set(pos + neg)):
        return
    assert auroc(pos, neg) == auroc(f(pos), f(neg))
    assert aupr(pos, neg) == aupr(f(pos), f(neg))
    assert verification_accuracy(pos, neg) == verification_accuracy(f(pos), f(neg))
    assert tnr_at_tpr(pos, neg) == tnr_at_tpr(f(pos), f(neg))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=40, unique=True),
       st.integers(1, 39))
def test_auroc_antisymmetric_without_ties(scores, cut):
    cut = min(cut, len(scores) - 1)
    pos, neg = scores[:cut], scores[cut:]
    assert auroc(pos, neg) + auroc(neg, pos) == 1.0


def test_curves_endpoints():
    fpr, tpr = roc_curve([1, 3], [0, 2])
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
    recall, precision = pr_curve([3, 1], [2])
    assert recall[-1] == 1.0
    assert np.all(np.diff(recall) >= 0)


def test_metrics_table_columns(tmp_path):
    row = {"id_set": "a", "neg_set": "b", "n_pos": 2, "n_neg": 2,
           **ScorePools([1.0, 3.0], [0.0, 2.0]).metrics()}
    path = tmp_path / "m.csv"
    write_metrics_table(path, [row])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id_set", "neg_set", "n_pos", "n_neg", "tnr95", "auroc", "ver_acc", "aupr_in"]
    assert float(rows[1][5]) == 0.75
