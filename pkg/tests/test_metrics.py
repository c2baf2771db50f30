import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmogp.errors import InputError
from fedmogp.metrics import ReliabilityDiagram, accuracy, ece, mse, ood_score


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0.0, 0.0], [1.0, -1.0]) == 1.0
    assert mse([2.0], [0.0]) == 4.0
    with pytest.raises(InputError):
        mse([], [])
    with pytest.raises(InputError):
        mse([1.0], [1.0, 2.0])


def test_accuracy_examples():
    assert accuracy([1.0, -2.0], [1, -1]) == 1.0
    assert accuracy([0.3, -0.2], [1, 1]) == 0.5
    assert accuracy([0.0], [1]) == 1.0
    assert accuracy([0.0], [-1]) == 0.0
    with pytest.raises(InputError):
        accuracy([], [])
    with pytest.raises(InputError):
        accuracy([1.0], [0])


def test_ece_perfectly_calibrated():
    # five samples at confidence 0.8 with four correct, ten at 0.6 with six correct
    p = [0.8] * 5 + [0.4] * 10
    y = [1, 1, 1, 1, -1] + [-1] * 6 + [1] * 4
    d = ece(p, y, 10)
    assert abs(d.ece) <= 1e-12
    assert d.counts.sum() == 15


def test_ece_single_bin():
    d = ece([0.9] * 20, [1] * 20)
    assert d.ece == pytest.approx(0.1, abs=1e-15)
    assert d.counts.tolist() == [0] * 7 + [20] + [0] * 2
    eps = 1e-3
    d = ece([0.5 + eps] * 10, [1, -1] * 5)
    assert d.ece == pytest.approx(eps, abs=1e-12)


def test_ece_boundaries():
    edges = np.linspace(0.5, 1.0, 11)
    d = ece([edges[3], 1.0 - 1e-12, 0.5], [1, 1, 1], 10)
    # an inner edge lands in the lower bin; near-1 confidence in the top bin; 0.5 in the first
    assert d.counts[2] == 1 and d.counts[9] == 1 and d.counts[0] == 1
    with pytest.raises(InputError):
        ece([0.0, 0.5], [1, 1])
    with pytest.raises(InputError):
        ece([1.0], [1])
    with pytest.raises(InputError):
        ece([0.5], [1], n_bins=0)


def test_reliability_json_roundtrip():
    d = ece([0.9, 0.2, 0.55, 0.7], [1, -1, -1, 1], 5)
    doc = json.loads(d.dumps())
    assert set(doc) == {"n_bins", "edges", "confidence", "accuracy", "counts", "ece"}
    back = ReliabilityDiagram.from_dict(doc)
    assert back.ece == d.ece and np.array_equal(back.counts, d.counts)
    np.testing.assert_array_equal(back.confidence, d.confidence)


probs = st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(probs, st.randoms(use_true_random=False), st.integers(1, 20))
def test_ece_permutation_invariant_and_bounded(p, rnd, bins):
    y = [1 if rnd.random() < 0.5 else -1 for _ in p]
    d = ece(p, y, bins)
    assert 0.0 <= d.ece <= 1.0
    assert d.counts.sum() == len(p)
    idx = list(range(len(p)))
    rnd.shuffle(idx)
    d2 = ece([p[i] for i in idx], [y[i] for i in idx], bins)
    assert d2.ece == pytest.approx(d.ece, abs=1e-15)
    assert np.array_equal(d2.counts, d.counts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=20), st.integers(-1000, 1000))
def test_mse_translation(vals, c):
    p = np.array(vals, dtype=float)
    t = p[::-1].copy()
    # integer-valued floats keep the shift exact
    assert mse(p + c, t + c) == mse(p, t)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_accuracy_scale_invariant(means, scale):
    y = np.where(np.arange(len(means)) % 2 == 0, 1, -1)
    m = np.array(means)
    m = np.where(np.abs(m) < 1e-200, 0.0, m)
    assert accuracy(m * scale, y) == accuracy(m, y)


def test_ood_score():
    assert ood_score(0.090909) == 0.090909
    assert np.array_equal(ood_score(np.array([0.1, 2.0])), [0.1, 2.0])
    with pytest.raises(InputError):
        ood_score(-1.0)
