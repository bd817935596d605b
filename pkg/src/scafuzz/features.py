"""Feature extraction from power traces.

Branch detection and distance classification are k-nearest-neighbour votes
over fixed-length windows; basic blocks are described by four statistics of
the trace slice between two detected branches.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .device import PowerTrace
from .kernels import find_peaks, knn_predict

log = logging.getLogger(__name__)


class LabelKind(enum.IntEnum):
    BRANCH = 0  # labels 0 = no branch, 1 = branch
    DISTANCE = 1  # labels are skipped-instruction counts


@dataclass(frozen=True)
class TraceWindow:
    start_sample: int
    length_samples: int
    samples: np.ndarray

    @classmethod
    def cut(cls, trace, start, length):
        x = trace.samples if isinstance(trace, PowerTrace) else np.asarray(trace)
        if start < 0 or start + length > len(x):
            raise IndexError(f"window [{start}, {start + length}) outside trace of {len(x)} samples")
        return cls(int(start), int(length), x[start : start + length])


def _windows(x, starts, length):
    starts = np.asarray(starts, dtype=np.int64)
    if len(starts) == 0:
        return np.empty((0, length))
    idx = starts[:, None] + np.arange(length)
    return np.asarray(x, dtype=np.float64)[idx]


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    """Standardised training windows of a kNN classifier.

    ``labels`` holds indices into ``classes``; ``classes`` holds the label
    values the caller sees (0/1 for branch detection, distances otherwise).
    """

    label_kind: LabelKind
    k: int
    mean: np.ndarray
    scale: np.ndarray
    points: np.ndarray
    labels: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be a positive odd integer, got {self.k}")
        if self.points.ndim != 2 or self.points.shape[1] != len(self.mean) or len(self.scale) != len(self.mean):
            raise ValueError("inconsistent model arrays")
        if len(self.labels) != len(self.points):
            raise ValueError("one label per training point required")
        missing = set(range(len(self.classes))) - set(np.unique(self.labels).tolist())
        if missing:
            raise ValueError(f"no training points for classes {sorted(self.classes[list(missing)].tolist())}")

    @property
    def window(self) -> int:
        return len(self.mean)

    def standardize(self, windows):
        return (np.asarray(windows, dtype=np.float64) - self.mean) / self.scale

    def predict(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64).reshape(-1, self.window)
        if len(windows) == 0:
            return np.empty(0, dtype=self.classes.dtype)
        idx = knn_predict(self.points, self.labels, self.standardize(windows), self.k, len(self.classes))
        return self.classes[idx]

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return (
            self.label_kind == other.label_kind
            and self.k == other.k
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("mean", "scale", "points", "labels", "classes")
            )
        )

    __hash__ = None


def train_classifier_arrays(X, y, k=3, label_kind=LabelKind.BRANCH, classes=None, scaling="pooled") -> ClassifierModel:
    """kNN model from a window matrix.

    Every sample position is centred on its training mean. ``scaling="pooled"``
    divides all positions by one common standard deviation; ``"sample"`` uses
    each position's own. Pooled keeps positions that carry only noise from
    drowning the ones that carry the label.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training windows must form a non-empty 2-D array")
    if len(y) != len(X):
        raise ValueError("one label per training window required")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k must be a positive odd integer, got {k}")
    if len(X) < k:
        raise ValueError(f"need at least k={k} training windows, got {len(X)}")
    if classes is None:
        classes = (0, 1) if label_kind == LabelKind.BRANCH else np.unique(y)
    classes = np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64)
    unknown = set(np.unique(y).tolist()) - set(classes.tolist())
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} are not declared classes")
    mean = X.mean(axis=0)
    if scaling == "pooled":
        scale = np.full(X.shape[1], (X - mean).std())
    elif scaling == "sample":
        scale = X.std(axis=0)
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    scale[scale == 0] = 1.0
    lab = np.searchsorted(classes, y)
    return ClassifierModel(LabelKind(label_kind), int(k), mean, scale, (X - mean) / scale, lab, classes)


def train_classifier(
    labeled: Sequence[tuple[TraceWindow, int]], k=3, label_kind=LabelKind.BRANCH, classes=None, scaling="pooled"
):
    """Build a kNN model from labelled windows."""
    if not labeled:
        raise ValueError("no training windows")
    lengths = {w.length_samples for w, _ in labeled}
    if len(lengths) != 1:
        raise ValueError(f"training windows differ in length: {sorted(lengths)}")
    X = np.stack([np.asarray(w.samples, dtype=np.float64) for w, _ in labeled])
    y = [lab for _, lab in labeled]
    return train_classifier_arrays(X, y, k, label_kind, classes, scaling)


# --------------------------------------------------------------------------
# model file: "KNNM", u8 kind, u16 k, u32 window, u32 classes, u64 points,
# i64[classes], f64[window] mean, f64[window] scale, f64[points*window], i64[points]
# --------------------------------------------------------------------------
MODEL_MAGIC = b"KNNM"
_MODEL_HEADER = struct.Struct("<4sBHIIQ")


def model_to_bytes(model: ClassifierModel) -> bytes:
    head = _MODEL_HEADER.pack(
        MODEL_MAGIC, int(model.label_kind), model.k, model.window, len(model.classes), len(model.points)
    )
    return b"".join(
        [
            head,
            model.classes.astype("<i8").tobytes(),
            model.mean.astype("<f8").tobytes(),
            model.scale.astype("<f8").tobytes(),
            model.points.astype("<f8").tobytes(),
            model.labels.astype("<i8").tobytes(),
        ]
    )


def model_from_bytes(buf: bytes) -> ClassifierModel:
    if len(buf) < _MODEL_HEADER.size:
        raise ValueError("truncated model file")
    magic, kind, k, w, nc, n = _MODEL_HEADER.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise ValueError(f"not a model file (magic {magic!r})")
    want = _MODEL_HEADER.size + 8 * (nc + 2 * w + n * w + n)
    if len(buf) != want:
        raise ValueError(f"model file should hold {want} bytes, found {len(buf)}")
    off = _MODEL_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
        off += 8 * count
        return arr

    classes = take("<i8", nc).astype(np.int64)
    mean = take("<f8", w).astype(np.float64)
    scale = take("<f8", w).astype(np.float64)
    points = take("<f8", n * w).astype(np.float64).reshape(n, w)
    labels = take("<i8", n).astype(np.int64)
    return ClassifierModel(LabelKind(kind), k, mean, scale, points, labels, classes)


def write_model(path, model: ClassifierModel):
    Path(path).write_bytes(model_to_bytes(model))


def read_model(path) -> ClassifierModel:
    return model_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# peaks and branch candidates
# --------------------------------------------------------------------------


def detect_peaks(trace, min_separation=1, prominence=0.0, wlen=0) -> np.ndarray:
    if min_separation < 1:
        raise ValueError("min_separation must be >= 1")
    x = trace.samples if isinstance(trace, PowerTrace) else trace
    return find_peaks(x, min_separation, prominence, wlen)


@dataclass(frozen=True)
class PeakParams:
    min_separation: int
    prominence: float
    apex_offset: int = 1  # sample of a cycle that holds its peak
    wlen: int = 0

    @classmethod
    def for_device(cls, device):
        spc = device.samples_per_cycle
        return cls(max(spc - 1, 1), device.peak_prominence(), 1, 2 * spc + 1)


def branch_candidates(trace, samples_per_cycle, window, params: PeakParams, exhaustive=False) -> np.ndarray:
    """Candidate window starts: detected clock peaks moved back to their cycle start.

    The acquisition trigger is derived from the device clock, so cycle
    boundaries sit at multiples of ``samples_per_cycle``; peaks are snapped to
    that grid. ``exhaustive`` skips peak detection and returns every cycle start.
    """
    n = len(trace)
    if exhaustive:
        starts = np.arange(0, n - window + 1, samples_per_cycle)
    else:
        peaks = detect_peaks(trace, params.min_separation, params.prominence, params.wlen)
        starts = np.unique(np.round((peaks - params.apex_offset) / samples_per_cycle).astype(np.int64))
        starts = starts * samples_per_cycle
    return starts[(starts >= 0) & (starts + window <= n)]


def detect_branches(trace, model: ClassifierModel, candidates) -> np.ndarray:
    """Starts of candidate windows classified as branches, overlaps resolved to the earlier one."""
    if model.label_kind != LabelKind.BRANCH:
        raise ValueError("detect_branches needs a branch/no-branch model")
    x = trace.samples if isinstance(trace, PowerTrace) else np.asarray(trace)
    w = model.window
    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    ok = (cand >= 0) & (cand + w <= len(x))
    if not ok.all():
        log.warning("skipping %d candidate windows outside the trace", int((~ok).sum()))
        cand = cand[ok]
    hits = cand[model.predict(_windows(x, cand, w)) == 1]
    out = []
    for s in hits:
        if not out or s >= out[-1] + w:
            out.append(int(s))
    return np.asarray(out, dtype=np.int64)


def classify_distances(trace, locations, model: ClassifierModel) -> np.ndarray:
    if model.label_kind != LabelKind.DISTANCE:
        raise ValueError("classify_distances needs a distance model")
    x = trace.samples if isinstance(trace, PowerTrace) else np.asarray(trace)
    loc = np.asarray(locations, dtype=np.int64)
    if len(loc) and (loc.min() < 0 or loc.max() + model.window > len(x)):
        raise IndexError("branch window outside the trace")
    return model.predict(_windows(x, loc, model.window))


# --------------------------------------------------------------------------
# fingerprints
# --------------------------------------------------------------------------


def segments(n_samples, locations, window) -> list[tuple[int, int]]:
    """Slices before, between and after the branch windows."""
    out = []
    pos = 0
    for s in locations:
        s = int(s)
        if s < pos:
            raise ValueError("branch locations must be sorted and non-overlapping")
        out.append((pos, s))
        pos = s + window
    if pos > n_samples:
        raise ValueError("branch window runs past the end of the trace")
    out.append((pos, n_samples))
    return out


@dataclass(frozen=True)
class Fingerprint:
    length: int
    peaks: int
    mean: float
    skewness: float

    @property
    def valid(self) -> bool:
        return self.length > 0

    def vector(self):
        return np.array([self.length, self.peaks, self.mean, self.skewness], dtype=np.float64)


def fingerprint(samples, params: PeakParams) -> Fingerprint:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        return Fingerprint(0, 0, 0.0, 0.0)
    peaks = len(detect_peaks(x, params.min_separation, params.prominence, params.wlen))
    mu = x.mean()
    d = x - mu
    m2 = np.mean(d * d)
    # Fisher skewness g1 = m3 / m2^1.5 (biased moments); flat slices count as symmetric
    g1 = float(np.mean(d * d * d) / m2**1.5) if m2 > 1e-24 else 0.0
    return Fingerprint(len(x), peaks, float(mu), g1)


def fingerprint_blocks(trace, locations, window, params: PeakParams) -> list[Fingerprint]:
    """Raw fingerprints of every slice; turn them into keys with :class:`FeatureScaler`."""
    x = trace.samples if isinstance(trace, PowerTrace) else np.asarray(trace)
    return [fingerprint(x[a:b], params) for a, b in segments(len(x), locations, window)]


@dataclass(frozen=True)
class FeatureScaler:
    """z-score statistics of the four fingerprint features over one analysis run."""

    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    @classmethod
    def fit(cls, prints: Sequence[Fingerprint]):
        good = [p.vector() for p in prints if p.valid]
        if not good:
            return cls((0.0,) * 4, (1.0,) * 4)
        v = np.stack(good)
        sd = v.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(tuple(map(float, v.mean(axis=0))), tuple(map(float, sd)))

    def z(self, p: Fingerprint) -> np.ndarray:
        return (p.vector() - np.asarray(self.mean)) / np.asarray(self.std)

    def key(self, p: Fingerprint, mode="separated", decimals=2):
        """Quantised fingerprint used for equality.

        separated: exact length and peak count, z-scored mean and skewness
        rounded to ``decimals``. summed: the rounded sum of all four z-scores.
        """
        if not p.valid:
            return None
        z = self.z(p)
        if mode == "separated":
            return (p.length, p.peaks, _q(z[2], decimals), _q(z[3], decimals))
        if mode == "summed":
            return _q(z.sum(), decimals)
        raise ValueError(f"unknown fingerprint mode {mode!r}")


@dataclass(frozen=True)
class NoiseProfile:
    """Spread of the fingerprint features between captures of the same slice.

    For a slice of L samples the standard deviation of P_peaks is modelled as
    ``peaks * sqrt(L)``; those of P_mean and P_skewness as ``mean / sqrt(L)``
    and ``skewness / sqrt(L)``. P_length is exact.
    """

    peaks: float = 0.0
    mean: float = 0.0
    skewness: float = 0.0

    def sd(self, length) -> np.ndarray:
        r = np.sqrt(max(length, 1))
        return np.array([0.0, self.peaks * r, self.mean / r, self.skewness / r])


class FingerprintCodebook:
    """Tolerance quantiser: maps each fingerprint to the id of a prototype.

    Prototypes are taken in the order fingerprints are offered to
    :meth:`build`; a fingerprint joins the nearest prototype whose features all
    lie within ``width`` noise deviations, otherwise it founds a new one. The
    id is a function of the fingerprint, so equality of ids is an equivalence
    relation. With a zero noise profile only identical fingerprints share an id.
    """

    def __init__(self, scaler: FeatureScaler, mode="separated", noise=NoiseProfile(), width=4.0):
        if mode not in ("separated", "summed"):
            raise ValueError(f"unknown fingerprint mode {mode!r}")
        self.scaler = scaler
        self.mode = mode
        self.noise = noise
        self.width = float(width)
        self._protos: dict = {}
        self._count = 0

    @classmethod
    def build(cls, prints, scaler, mode="separated", noise=NoiseProfile(), width=4.0):
        book = cls(scaler, mode, noise, width)
        for p in prints:
            book.code(p, grow=True)
        return book

    def _features(self, p):
        if self.mode == "separated":
            return p.length, np.array([p.peaks, p.mean, p.skewness]), self.width * self.noise.sd(p.length)[1:]
        z_sd = self.noise.sd(p.length) / np.asarray(self.scaler.std)
        return None, np.array([self.scaler.z(p).sum()]), np.array([self.width * np.sqrt(np.sum(z_sd**2))])

    def code(self, p: Fingerprint, grow=False) -> int | None:
        if not p.valid:
            return None
        bucket, f, tol = self._features(p)
        protos = self._protos.setdefault(bucket, [])
        best, best_d = None, np.inf
        for cid, g in protos:
            diff = np.abs(f - g)
            if np.all(diff <= tol):
                d = float(np.sum((diff / np.where(tol > 0, tol, 1.0)) ** 2))
                if d < best_d:
                    best, best_d = cid, d
        if best is None and grow:
            best = self._count
            self._count += 1
            protos.append((best, f))
        return best

    def __len__(self):
        return self._count


def _q(v, decimals):
    # +0.0 folds negative zero so keys compare and print consistently
    return float(np.round(v, decimals)) + 0.0


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def confusion(predictions, truth):
    p = np.asarray(predictions).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions vs {t.shape} truth labels")
    tp = int(np.sum(p & t))
    tn = int(np.sum(~p & ~t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return tp, tn, fp, fn


def mcc_from_counts(tp, tn, fp, fn) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(float(den)))


def evaluate_mcc(predictions, truth) -> float:
    return mcc_from_counts(*confusion(predictions, truth))
