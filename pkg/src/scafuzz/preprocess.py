"""Noise reduction over repeated measurements of one input, and duplicate filtering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .device import PowerTrace

DEFAULT_ALPHA = 0.3


@dataclass(frozen=True)
class TraceBatch:
    """Repeated, aligned captures of the same input."""

    traces: tuple[PowerTrace, ...]
    aligned: bool = True

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        if not self.traces:
            raise ValueError("empty trace batch")
        if not self.aligned:
            raise ValueError("batch is not aligned; realignment is not supported")
        if len({len(t) for t in self.traces}) != 1:
            raise ValueError("traces in a batch must have equal length")
        if len({t.samples_per_cycle for t in self.traces}) != 1:
            raise ValueError("traces in a batch must share samples_per_cycle")

    def __len__(self):
        return len(self.traces)

    def matrix(self) -> np.ndarray:
        return np.stack([t.samples.astype(np.float64) for t in self.traces])


def _as_batch(batch):
    return batch if isinstance(batch, TraceBatch) else TraceBatch(tuple(batch))


def mean_trace(batch) -> PowerTrace:
    batch = _as_batch(batch)
    first = batch.traces[0]
    return PowerTrace(batch.matrix().mean(axis=0), first.samples_per_cycle, first.seed)


def sweep_weights(n, alpha=DEFAULT_ALPHA) -> np.ndarray:
    """Weight of each of ``n`` traces in the final running average."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    w = alpha * (1 - alpha) ** np.arange(n - 1, -1, -1, dtype=np.float64)
    w[0] = (1 - alpha) ** (n - 1)
    return w


def sweep_trace(batch, alpha=DEFAULT_ALPHA) -> PowerTrace:
    """Exponential running average, later captures weigh more."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    batch = _as_batch(batch)
    s = batch.traces[0].samples.astype(np.float64)
    for t in batch.traces[1:]:
        s = alpha * t.samples.astype(np.float64) + (1 - alpha) * s
    first = batch.traces[0]
    return PowerTrace(s, first.samples_per_cycle, first.seed)


def mse(a, b) -> float:
    x = a.samples if isinstance(a, PowerTrace) else np.asarray(a)
    y = b.samples if isinstance(b, PowerTrace) else np.asarray(b)
    if len(x) != len(y):
        raise ValueError(f"cannot compare traces of {len(x)} and {len(y)} samples")
    if len(x) == 0:
        return 0.0
    d = x.astype(np.float64) - y.astype(np.float64)
    return float(np.mean(d * d))


class DedupResult(NamedTuple):
    representatives: list[int]
    excluded: dict[int, int]  # trace index -> index of its representative


class DedupFilter:
    """Incremental form of :func:`dedup_filter` for traces arriving one at a time."""

    def __init__(self, threshold):
        if not threshold > 0:
            raise ValueError(f"MSE threshold must be positive, got {threshold}")
        self.threshold = float(threshold)
        self._reps: dict[int, list[tuple[int, np.ndarray]]] = {}
        self.count = 0

    def add(self, trace) -> int | None:
        """Register the next trace; returns the index of the earlier trace it duplicates."""
        x = trace.samples if isinstance(trace, PowerTrace) else np.asarray(trace)
        idx = self.count
        self.count += 1
        bucket = self._reps.setdefault(len(x), [])
        for rep, y in bucket:
            if mse(x, y) < self.threshold:
                return rep
        bucket.append((idx, x))
        return None


def dedup_filter(traces: Sequence, threshold) -> DedupResult:
    """Greedy single pass: each trace joins the first representative within ``threshold``."""
    f = DedupFilter(threshold)
    reps, excluded = [], {}
    for i, t in enumerate(traces):
        hit = f.add(t)
        if hit is None:
            reps.append(i)
        else:
            excluded[i] = hit
    return DedupResult(reps, excluded)


def default_threshold(noise_sigma, weights=None) -> float:
    """Four times the per-sample noise variance left after averaging with ``weights``.

    Twice the expected MSE between two captures of the same path.
    """
    var = noise_sigma**2 * (1.0 if weights is None else float(np.sum(np.square(weights))))
    return max(4.0 * var, 1e-12)
