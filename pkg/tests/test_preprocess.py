import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scafuzz.device import PowerTrace, add_noise, default_device, execute, synthesize_trace
from scafuzz.pipeline import Preprocessing, random_inputs
from scafuzz.preprocess import (
    TraceBatch,
    dedup_filter,
    default_threshold,
    mean_trace,
    mse,
    sweep_trace,
    sweep_weights,
)


def T(*xs):
    return PowerTrace(np.array(xs, dtype=np.float64))


def test_mean_examples():
    assert mean_trace([T(1, 2, 3)] * 4) == T(1, 2, 3)
    np.testing.assert_array_equal(mean_trace([T(0, 2), T(2, 0)]).samples, [1, 1])
    with pytest.raises(ValueError):
        mean_trace([])
    with pytest.raises(ValueError):
        mean_trace([T(0, 1), T(0, 1, 2)])
    with pytest.raises(ValueError):
        TraceBatch((T(0),), aligned=False)


def test_sweep_examples():
    assert sweep_trace([T(3, 4)], 0.3) == T(3, 4)
    assert sweep_trace([T(0), T(1), T(7)], 1.0) == T(7)
    np.testing.assert_array_equal(sweep_trace([T(0), T(4)], 0.5).samples, [2])
    for a in (0.0, 1.5):
        with pytest.raises(ValueError):
            sweep_trace([T(0)], a)


@given(st.integers(1, 20), st.floats(0.01, 1.0))
def test_sweep_weights_match_recursion(n, alpha):
    # oracle: the running-average recursion itself
    rng = np.random.default_rng(n)
    xs = rng.standard_normal((n, 5)).astype(np.float32).astype(np.float64)
    s = xs[0]
    for x in xs[1:]:
        s = alpha * x + (1 - alpha) * s
    w = sweep_weights(n, alpha)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w @ xs, s, atol=1e-9)


batches = st.integers(1, 8).flatmap(
    lambda n: hnp.arrays(np.float32, (n, 16), elements=st.floats(-100, 100, width=32))
)


@given(batches, st.floats(-4, 4), st.floats(0.05, 1.0))
def test_linearity(m, c, alpha):
    ts = [PowerTrace(r) for r in m]
    scaled = [PowerTrace(np.float32(c) * r) for r in m]
    for f in (mean_trace, lambda b: sweep_trace(b, alpha)):
        np.testing.assert_allclose(f(scaled).samples, np.float32(c) * f(ts).samples, rtol=1e-4, atol=1e-3)


# values on a 1/1024 grid: squares of differences never underflow to zero
grid = st.integers(-51200, 51200).map(lambda i: i / 1024)


@given(hnp.arrays(np.float64, 12, elements=grid), hnp.arrays(np.float64, 12, elements=grid))
def test_mse_axioms(a, b):
    assert mse(a, a) == 0
    assert mse(a, b) == mse(b, a) >= 0
    assert (mse(a, b) == 0) == bool(np.array_equal(np.float64(a), np.float64(b)))


def test_mse_examples():
    assert mse(T(0, 0), T(2, 2)) == 4
    with pytest.raises(ValueError):
        mse(T(0), T(0, 1))


def test_variance_of_mean_and_expected_mse():
    rng = np.random.default_rng(0)
    noisy = rng.normal(0, 1, (1000, 10, 50))
    # variance of a mean of 10 i.i.d. unit Gaussians is 1/10
    v = noisy.mean(axis=1).var()
    assert abs(v - 0.1) / 0.1 < 0.2
    m = np.mean([mse(noisy[i, 0], noisy[i, 1]) for i in range(1000)])
    assert abs(m - 2.0) / 2.0 < 0.1
    d = default_device(1.0)
    clean = np.zeros(64)
    means = [mean_trace([add_noise(d, clean, 100 * t + c) for c in range(10)]).samples.var() for t in range(200)]
    assert abs(np.mean(means) - 0.1) / 0.1 < 0.2


def test_dedup_examples():
    r = dedup_filter([T(1, 2)] * 5, 0.1)
    assert r.representatives == [0] and r.excluded == {1: 0, 2: 0, 3: 0, 4: 0}
    r = dedup_filter([T(0, 0), T(10, 10)], 0.1)
    assert r.representatives == [0, 1] and r.excluded == {}
    assert dedup_filter([T(0, 0), T(0, 0, 0)], 1e9).representatives == [0, 1]
    with pytest.raises(ValueError):
        dedup_filter([T(0)], 0)


def test_dedup_three_paths_no_misclustering(v1):
    sigma = 0.05
    d = default_device(sigma)
    ins = random_inputs(3, 11)
    recs = [execute(v1, x) for x in ins]
    assert len({r.block_ids for r in recs}) == 3
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, 100)
    traces = [synthesize_trace(d, recs[k], i) for i, k in enumerate(labels)]
    res = dedup_filter(traces, default_threshold(sigma))
    assert len(res.representatives) == 3
    for i, rep in res.excluded.items():
        assert labels[i] == labels[rep]


def test_default_threshold_scales_with_averaging():
    p = Preprocessing(10, 1)
    assert default_threshold(0.2) == pytest.approx(4 * 0.04)
    assert default_threshold(0.2, p.weights()) == pytest.approx(4 * 0.04 / 10)
    assert default_threshold(0.0) > 0


def test_preprocessing_weights_apply(rng):
    p = Preprocessing(3, 4, 0.3)
    caps = [PowerTrace(rng.standard_normal(20)) for _ in range(p.captures)]
    want = p.weights() @ np.stack([c.samples.astype(np.float64) for c in caps])
    np.testing.assert_allclose(p.apply(caps).samples, want, atol=1e-5)
