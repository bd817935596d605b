"""End-to-end fuzzing-feedback session on simulated traces.

acquire -> duplicate filter -> preprocessing -> features -> reconstruction
-> scoring. Everything random is drawn from explicit seeds, so a session is
a pure function of its arguments.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cfg as cfgmod
from .device import BODY_KINDS, DeviceModel, ExecutionRecord, add_noise, execute, render, theoretical_scores, timeline
from .features import (
    ClassifierModel,
    FeatureScaler,
    FingerprintCodebook,
    LabelKind,
    NoiseProfile,
    PeakParams,
    branch_candidates,
    classify_distances,
    detect_branches,
    evaluate_mcc,
    fingerprint_blocks,
    segments,
    train_classifier_arrays,
)
from .preprocess import DEFAULT_ALPHA, DedupFilter, default_threshold, mean_trace, sweep_trace, sweep_weights
from .scoring import ReportRow, evaluate, score_keys, vote_keys
from .targets import DISTANCE_CLASSES, INPUT_WIDTH

log = logging.getLogger(__name__)

METHODS = ("RI", "RII-separate", "RII-summed")
VOTES = ("majority", "single")
DEFAULT_CELLS = ((1, 1), (10, 1), (1, 10), (10, 10))


def derive_seed(*parts) -> int:
    """64-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def random_inputs(n, seed, width=INPUT_WIDTH) -> list[bytes]:
    rng = np.random.default_rng(seed)
    return [bytes(row) for row in rng.integers(0, 256, size=(n, width), dtype=np.uint8)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Models:
    branch: ClassifierModel
    distance: ClassifierModel


def _training_record(rng, n_branches, samples_per_cycle, classes):
    bodies = tuple(tuple(rng.choice(BODY_KINDS, size=int(rng.integers(2, 12)))) for _ in range(n_branches + 1))
    dists = rng.choice(np.asarray(classes), size=n_branches)
    spans = timeline(bodies, n_branches, samples_per_cycle)
    return ExecutionRecord(
        tuple(range(n_branches + 1)), tuple((0, int(d)) for d in dists), spans, bodies, samples_per_cycle
    )


def training_windows(device: DeviceModel, n_branches=3000, seed=7, classes=DISTANCE_CLASSES, neg_ratio=1.0):
    """Labelled windows from a random straight-line program run on the training device.

    Returns (branch windows, branch labels, distance windows, distance labels).
    Negatives are branch-length windows at every other clock cycle start,
    subsampled to ``neg_ratio`` times the number of positives.
    """
    rng = np.random.default_rng(seed)
    rec = _training_record(rng, n_branches, device.samples_per_cycle, classes)
    x = add_noise(device, render(device, rec), derive_seed(seed, 1)).samples.astype(np.float64)
    w = device.branch_window
    pos = np.array([a for a, _ in rec.branch_spans], dtype=np.int64)
    starts = np.arange(0, len(x) - w + 1, device.samples_per_cycle)
    neg = np.setdiff1d(starts, pos)
    neg = np.sort(rng.choice(neg, size=min(len(neg), int(round(neg_ratio * len(pos)))), replace=False))
    idx = np.arange(w)
    Xd = x[pos[:, None] + idx]
    yd = np.array([d for _, d in rec.branches], dtype=np.int64)
    Xb = np.concatenate([Xd, x[neg[:, None] + idx]])
    yb = np.r_[np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)]
    return Xb, yb, Xd, yd


def train_models(
    device, k=3, n_branches=1500, seed=7, scaling="pooled", classes=DISTANCE_CLASSES, neg_ratio=3.0
) -> Models:
    """Branch detector and distance classifier trained on the same (simulated) device.

    Real traces hold far more non-branch cycles than branches, so the detector
    sees ``neg_ratio`` negatives per positive.
    """
    Xb, yb, Xd, yd = training_windows(device, n_branches, seed, classes, neg_ratio)
    present = set(yd.tolist())
    if present != set(classes):
        raise ValueError(f"training run misses distance classes {sorted(set(classes) - present)}")
    return Models(
        train_classifier_arrays(Xb, yb, k, LabelKind.BRANCH, (0, 1), scaling),
        train_classifier_arrays(Xd, yd, k, LabelKind.DISTANCE, classes, scaling),
    )


def held_out_quality(device, models: Models, n_branches=1000, seed=11, exhaustive=False):
    """(branch-detection MCC over all candidate windows, distance accuracy on true branch windows)."""
    rng = np.random.default_rng(seed)
    rec = _training_record(rng, n_branches, device.samples_per_cycle, models.distance.classes)
    trace = add_noise(device, render(device, rec), derive_seed(seed, 1))
    params = PeakParams.for_device(device)
    cand = branch_candidates(trace, device.samples_per_cycle, device.branch_window, params, exhaustive)
    truth_starts = np.array([a for a, _ in rec.branch_spans])
    pred = models.branch.predict(trace.samples[cand[:, None] + np.arange(device.branch_window)])
    truth = np.isin(cand, truth_starts)
    # true branches that never became a candidate count as misses
    missed = int(np.sum(~np.isin(truth_starts, cand)))
    mcc = evaluate_mcc(np.r_[pred, np.zeros(missed, int)], np.r_[truth, np.ones(missed, bool)])
    d = classify_distances(trace, truth_starts, models.distance)
    acc = float(np.mean(d == np.array([x for _, x in rec.branches])))
    return mcc, acc


# --------------------------------------------------------------------------
# acquisition and preprocessing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Preprocessing:
    """Average ``mean_count`` captures per step, then sweep over ``sweep_count`` such means."""

    mean_count: int = 1
    sweep_count: int = 1
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.mean_count < 1 or self.sweep_count < 1:
            raise ValueError("mean_count and sweep_count must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def captures(self) -> int:
        return self.mean_count * self.sweep_count

    def weights(self) -> np.ndarray:
        """Weight of every capture in the preprocessed trace."""
        return np.repeat(sweep_weights(self.sweep_count, self.alpha), self.mean_count) / self.mean_count

    def apply(self, captures):
        if len(captures) != self.captures:
            raise ValueError(f"expected {self.captures} captures, got {len(captures)}")
        m = self.mean_count
        means = [mean_trace(captures[i : i + m]) if m > 1 else captures[i] for i in range(0, len(captures), m)]
        return sweep_trace(means, self.alpha) if len(means) > 1 else means[0]


def acquire(device, record, prep: Preprocessing, seed, clean=None):
    """One preprocessed trace built from ``prep.captures`` noisy captures of ``record``."""
    if clean is None:
        clean = render(device, record)
    caps = [add_noise(device, clean, derive_seed(seed, c)) for c in range(prep.captures)]
    return prep.apply(caps)


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Features:
    locations: np.ndarray
    distances: np.ndarray
    segment_lengths: tuple[int, ...]
    prints: tuple
    n_samples: int

    def ri_table(self, input_id=0):
        return cfgmod.reconstruct_ri(self.locations, self.distances, self.segment_lengths, input_id)

    def rii_table(self, input_id=0):
        return cfgmod.reconstruct_rii(self.prints, input_id)


def extract(trace, device: DeviceModel, models: Models, params: PeakParams | None = None, exhaustive=False):
    params = params or PeakParams.for_device(device)
    w = device.branch_window
    cand = branch_candidates(trace, device.samples_per_cycle, w, params, exhaustive)
    loc = detect_branches(trace, models.branch, cand)
    dist = classify_distances(trace, loc, models.distance)
    spi = device.samples_per_instruction
    seg = tuple(int(round((b - a) / spi)) for a, b in segments(len(trace), loc, w))
    prints = tuple(fingerprint_blocks(trace, loc, w, params))
    return Features(loc, dist, seg, prints, len(trace))


# --------------------------------------------------------------------------
# session
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionSpec:
    device: DeviceModel
    models: Models
    prep: Preprocessing = Preprocessing()
    groups: int = 1
    noise_seed: int = 2
    exhaustive: bool = False
    dedup: bool = True
    dedup_threshold: float | None = None


@dataclass
class InputAnalysis:
    input_id: int
    duplicate_of: int | None
    features: list = field(default_factory=list)  # one Features per group
    error: str = ""


def _analyze_one(args):
    spec, program, input_id, data = args
    rec = execute(program, data, spec.device.samples_per_cycle)
    clean = render(spec.device, rec)
    out = []
    traces = []
    for g in range(spec.groups):
        tr = acquire(spec.device, rec, spec.prep, derive_seed(spec.noise_seed, input_id, g), clean)
        traces.append(tr)
        out.append(extract(tr, spec.device, spec.models, exhaustive=spec.exhaustive))
    return out, traces[0].samples


def worker_count(workers=None) -> int:
    if workers is None:
        workers = int(os.environ.get("SCAFUZZ_WORKERS", "1"))
    return max(1, int(workers))


def analyze_session(spec: SessionSpec, program, inputs: Sequence[bytes], workers=None) -> list[InputAnalysis]:
    """Features for every input (and every vote group); duplicates are marked, not analysed further."""
    jobs = [(spec, program, i, d) for i, d in enumerate(inputs)]
    n = worker_count(workers)
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n) as ex:
            results = list(ex.map(_analyze_one, jobs, chunksize=max(1, len(jobs) // (4 * n))))
    else:
        results = [_analyze_one(j) for j in jobs]
    thr = spec.dedup_threshold
    if thr is None:
        thr = default_threshold(spec.device.noise_sigma, spec.prep.weights())
    filt = DedupFilter(thr)
    out = []
    for i, (feats, first) in enumerate(results):
        dup = filt.add(first) if spec.dedup else None
        out.append(InputAnalysis(i, dup, feats))
    return out


def _split_method(method):
    if method == "RI":
        return cfgmod.RI, None
    if method in ("RII-separate", "RII-summed"):
        return cfgmod.RII, "separated" if method.endswith("separate") else "summed"
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def session_scaler(analyses: Sequence[InputAnalysis]) -> FeatureScaler:
    """z-score statistics over every slice of the session (all inputs, all vote groups)."""
    return FeatureScaler.fit(_session_prints(analyses))


def _session_prints(analyses):
    return [p for a in analyses if a.duplicate_of is None for f in a.features for p in f.prints]


@dataclass(frozen=True)
class Quantization:
    """How RII fingerprints are made comparable.

    ``round``: z-scores rounded to ``decimals``. ``tolerance``: a session
    codebook joins fingerprints within ``width`` noise deviations (see
    :class:`~scafuzz.features.FingerprintCodebook`).
    """

    kind: str = "tolerance"
    decimals: int = 2
    width: float = 8.0

    def __post_init__(self):
        if self.kind not in ("round", "tolerance"):
            raise ValueError(f"unknown quantization {self.kind!r}")


def calibrate_noise_profile(device, models, prep=Preprocessing(), seed=13, repeats=12, n_blocks=40) -> NoiseProfile:
    """Measure fingerprint spread on repeated captures of a random program on the training device."""
    if device.noise_sigma == 0:
        return NoiseProfile()
    rng = np.random.default_rng(seed)
    bodies = tuple(tuple(rng.choice(BODY_KINDS, size=int(rng.integers(10, 111)))) for _ in range(n_blocks))
    dists = rng.choice(np.asarray(models.distance.classes), size=n_blocks - 1)
    spans = timeline(bodies, n_blocks - 1, device.samples_per_cycle)
    rec = ExecutionRecord(
        tuple(range(n_blocks)), tuple((0, int(d)) for d in dists), spans, bodies, device.samples_per_cycle
    )
    clean = render(device, rec)
    truth = [a for a, _ in rec.branch_spans]
    runs = []
    for r in range(repeats):
        f = extract(acquire(device, rec, prep, derive_seed(seed, r), clean), device, models)
        if f.locations.tolist() == truth:
            runs.append([(p.peaks, p.mean, p.skewness) for p in f.prints])
    if len(runs) < 2:
        raise RuntimeError("noise calibration failed: branch detection too unreliable at this noise level")
    v = np.asarray(runs)  # (runs, slices, 3)
    sd = v.std(axis=0, ddof=1)
    L = np.array([b - a for a, b in rec.block_spans], dtype=np.float64)
    return NoiseProfile(
        float(np.sqrt(np.mean(sd[:, 0] ** 2 / L))),
        float(np.sqrt(np.mean(sd[:, 1] ** 2 * L))),
        float(np.sqrt(np.mean(sd[:, 2] ** 2 * L))),
    )


def rii_quantizer(analyses, mode, quant: Quantization, noise=NoiseProfile(), scaler=None):
    scaler = scaler or session_scaler(analyses)
    if quant.kind == "round":
        return lambda p: scaler.key(p, mode, quant.decimals)
    book = FingerprintCodebook.build(_session_prints(analyses), scaler, mode, noise, quant.width)
    return book.code


def session_scores(
    analyses: Sequence[InputAnalysis], method="RI", vote="single", quant=Quantization(), noise=NoiseProfile(), scaler=None
):
    """Result trace for one reconstruction method; Ω is updated strictly in input order."""
    kind, mode = _split_method(method)
    if vote not in VOTES:
        raise ValueError(f"unknown vote mode {vote!r}")
    quantize = rii_quantizer(analyses, mode, quant, noise, scaler) if kind == cfgmod.RII else None
    omega = frozenset()
    scores = []
    for a in analyses:
        if a.duplicate_of is not None:
            scores.append(0)
            continue
        feats = a.features if vote == "majority" else a.features[:1]
        cands = []
        for f in feats:
            table = f.ri_table(a.input_id) if kind == cfgmod.RI else f.rii_table(a.input_id)
            keys, _ = cfgmod.transition_keys(table, quantize)
            cands.append(keys)
        if len(cands) == 1:
            s, omega = score_keys(cands[0], omega)
        else:
            s, omega, _ = vote_keys(cands, omega)
        scores.append(s)
    return scores


def run_session(
    program, inputs, spec: SessionSpec, method="RI", vote="single", quant=Quantization(), workers=None
) -> tuple[list[int], list[int]]:
    """(scores, oracle scores) for one configuration."""
    analyses = analyze_session(spec, program, inputs, workers)
    noise = NoiseProfile()
    if _split_method(method)[0] == cfgmod.RII and quant.kind == "tolerance":
        noise = calibrate_noise_profile(spec.device, spec.models, spec.prep)
    return session_scores(analyses, method, vote, quant, noise), theoretical_scores(program, inputs)


def report_grid(
    program,
    inputs,
    device,
    models,
    cells=DEFAULT_CELLS,
    methods=METHODS,
    votes=VOTES,
    groups=5,
    alpha=DEFAULT_ALPHA,
    noise_seed=2,
    quant=Quantization(),
    workers=None,
    exhaustive=False,
) -> tuple[list[ReportRow], list[int]]:
    """One row per (preprocessing cell, method, vote mode); failures are recorded per cell."""
    oracle = theoretical_scores(program, inputs)
    rows = []
    for m, s in cells:
        try:
            prep = Preprocessing(m, s, alpha)
            spec = SessionSpec(device, models, prep, groups, noise_seed, exhaustive)
            analyses = analyze_session(spec, program, inputs, workers)
            scaler = session_scaler(analyses)
            noise = NoiseProfile()
            if quant.kind == "tolerance" and any(meth != "RI" for meth in methods):
                noise = calibrate_noise_profile(device, models, prep)
        except Exception as exc:  # noqa: BLE001 - a failed cell must not sink the grid
            log.exception("grid cell mean=%d sweep=%d failed", m, s)
            rows += [ReportRow(meth, m, s, v, None, None, None, str(exc)) for meth in methods for v in votes]
            continue
        for meth in methods:
            for v in votes:
                try:
                    res = session_scores(analyses, meth, v, quant, noise, scaler)
                    met = evaluate(res, oracle)
                    rows.append(ReportRow(meth, m, s, v, met.mse, met.correlation, met.crucial_errors))
                except Exception as exc:  # noqa: BLE001
                    log.exception("grid cell %s mean=%d sweep=%d vote=%s failed", meth, m, s, v)
                    rows.append(ReportRow(meth, m, s, v, None, None, None, str(exc)))
    return rows, oracle


def detected_transitions(program, device, models, runs=100, prep=Preprocessing(), seed=2020):
    """Unique CFG-RI transitions found in each of ``runs`` single-input sessions."""
    counts = []
    for r in range(runs):
        data = random_inputs(1, derive_seed(seed, r), program.input_width)[0]
        rec = execute(program, data, device.samples_per_cycle)
        f = extract(acquire(device, rec, prep, derive_seed(seed, r, 1)), device, models)
        keys, _ = cfgmod.transition_keys(f.ri_table())
        counts.append(len(set(keys)))
    return counts
