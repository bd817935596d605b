"""Both kernel paths against independent references (scipy, brute force)."""
import numpy as np
import pytest
import scipy.signal
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scafuzz import kernels
from scafuzz._accel import HAVE_NUMBA

pytestmark = pytest.mark.filterwarnings("ignore:some peaks have a prominence of 0")
paths = pytest.mark.parametrize("use_numba", [True, False] if HAVE_NUMBA else [False])


def _scipy_peaks(x, min_sep, prominence, wlen):
    # scipy thins by distance before the prominence test; this package filters
    # by prominence first, so apply the two scipy steps in that order
    p, _ = scipy.signal.find_peaks(x, prominence=prominence, wlen=wlen if wlen >= 2 else None)
    if min_sep > 1 and len(p) > 1:
        keep = np.ones(len(p), bool)
        for j in np.argsort(-x[p], kind="stable"):
            if keep[j]:
                close = np.abs(p - p[j]) < min_sep
                close[j] = False
                keep[close] = False
        p = p[keep]
    return p


signals = hnp.arrays(np.float64, st.integers(0, 300), elements=st.floats(-10, 10, allow_nan=False))


@paths
@given(x=signals, min_sep=st.integers(1, 12), prom=st.floats(0, 3), wlen=st.sampled_from([0, 3, 5, 17, 41]))
def test_find_peaks_matches_scipy(use_numba, x, min_sep, prom, wlen):
    got = kernels.find_peaks(x, min_sep, prom, wlen, use_numba=use_numba)
    want = _scipy_peaks(x, min_sep, prom, wlen)
    if len(np.unique(x)) == len(x):  # ties make scipy's thinning order unspecified
        np.testing.assert_array_equal(got, want)
    else:
        pfree = kernels.find_peaks(x, 1, prom, wlen, use_numba=use_numba)
        want1, _ = scipy.signal.find_peaks(x, prominence=prom, wlen=wlen if wlen >= 2 else None)
        np.testing.assert_array_equal(pfree, want1)


@given(x=hnp.arrays(np.int64, st.integers(0, 200), elements=st.integers(0, 4)), min_sep=st.integers(1, 8))
def test_find_peaks_paths_agree_with_ties(x, min_sep):
    a = kernels.find_peaks(x.astype(float), min_sep, 0.5, 9, use_numba=True)
    b = kernels.find_peaks(x.astype(float), min_sep, 0.5, 9, use_numba=False)
    np.testing.assert_array_equal(a, b)


@paths
def test_find_peaks_trivial(use_numba):
    assert len(kernels.find_peaks(np.ones(50), use_numba=use_numba)) == 0
    tri = np.r_[np.arange(10), np.arange(10, -1, -1)].astype(float)
    np.testing.assert_array_equal(kernels.find_peaks(tri, use_numba=use_numba), [10])
    # equal peaks closer than min_sep: the earlier one is kept
    twin = np.array([0, 3, 0, 3, 0], float)
    np.testing.assert_array_equal(kernels.find_peaks(twin, 3, use_numba=use_numba), [1])


def _brute_knn(train, labels, q, k, n_labels):
    out = []
    for row in q:
        d = ((train - row) ** 2).sum(axis=1)
        nn = np.lexsort((np.arange(len(d)), d))[:k]
        votes = np.bincount(labels[nn], minlength=n_labels)
        best = np.flatnonzero(votes == votes.max())
        # ties between classes go to the class of the nearest neighbour among them
        out.append(next(labels[i] for i in nn if labels[i] in best))
    return np.array(out)


@paths
@given(
    seed=st.integers(0, 2**32 - 1),
    k=st.sampled_from([1, 3, 5]),
    n=st.integers(5, 80),
    dim=st.integers(1, 24),
    n_labels=st.integers(2, 6),
    integer=st.booleans(),
)
def test_knn_matches_brute_force(use_numba, seed, k, n, dim, n_labels, integer):
    rng = np.random.default_rng(seed)
    if integer:  # many exact distance ties
        train = rng.integers(0, 3, (n, dim)).astype(float)
        q = rng.integers(0, 3, (40, dim)).astype(float)
    else:
        train = rng.standard_normal((n, dim))
        q = rng.standard_normal((40, dim))
    labels = rng.integers(0, n_labels, n)
    got = kernels.knn_predict(train, labels, q, k, n_labels, use_numba=use_numba)
    np.testing.assert_array_equal(got, _brute_knn(train, labels, q, k, n_labels))


def test_knn_training_point_is_its_own_neighbour():
    train = np.array([[0.0, 0.0], [5.0, 5.0]])
    labels = np.array([0, 1])
    np.testing.assert_array_equal(kernels.knn_predict(train, labels, train, 1, 2), [0, 1])
