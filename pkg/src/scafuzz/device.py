"""Instruction-level power simulator for the model microcontroller.

A trace sample is the sum of four parts: a constant baseline, the template of
the instruction executing at that clock cycle, a data-dependent ramp inside
branch windows whose height encodes the branch distance, and white Gaussian
noise.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SAMPLES_PER_CYCLE = 8
BRANCH_CYCLES = 3
MASTER_SEED = 0x5CA
DISTANCE_RANGE = (10, 150)


class Kind(enum.Enum):
    ALU = "ALU"
    LOAD = "LOAD"
    STORE = "STORE"
    MUL = "MUL"
    NOP = "NOP"
    BRANCH = "BRANCH"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class InstructionClass:
    kind: Kind
    cycles: int
    complexity: float

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError(f"{self.kind}: cycles must be >= 1, got {self.cycles}")
        if self.complexity < 0:
            raise ValueError(f"{self.kind}: complexity must be >= 0")


# Every non-branch class takes one cycle so sample counts convert exactly to
# instruction counts.
ISA: Mapping[Kind, InstructionClass] = {
    Kind.ALU: InstructionClass(Kind.ALU, 1, 1.0),
    Kind.LOAD: InstructionClass(Kind.LOAD, 1, 1.3),
    Kind.STORE: InstructionClass(Kind.STORE, 1, 1.2),
    Kind.MUL: InstructionClass(Kind.MUL, 1, 1.8),
    Kind.NOP: InstructionClass(Kind.NOP, 1, 0.4),
    Kind.BRANCH: InstructionClass(Kind.BRANCH, BRANCH_CYCLES, 1.5),
}
BODY_KINDS = (Kind.ALU, Kind.LOAD, Kind.STORE, Kind.MUL, Kind.NOP)

# (apex, shelf, pre-edge) per cycle; the generator jitters these by a few percent.
_CYCLE_SHAPES = {
    Kind.NOP: [(0.45, 0.04, 0.02)],
    Kind.ALU: [(0.75, 0.14, 0.05)],
    Kind.LOAD: [(0.85, 0.30, 0.08)],
    Kind.STORE: [(0.80, 0.22, 0.12)],
    Kind.MUL: [(1.05, 0.38, 0.10)],
    Kind.BRANCH: [(1.10, 0.55, 0.15), (0.60, -0.12, 0.00), (0.70, 0.02, -0.05)],
}


def _cycle_template(rng, apex, shelf, pre, spc, complexity):
    j = np.arange(spc, dtype=np.float64)
    apex = apex * (1.0 + 0.05 * rng.uniform(-1, 1)) * (0.85 + 0.1 * complexity)
    shelf = shelf * (1.0 + 0.05 * rng.uniform(-1, 1))
    tau = rng.uniform(0.6, 1.2) * spc / 8
    c = shelf + (apex - shelf) * np.exp(-(j - 1) / tau)
    c[0] = pre
    # small class-specific ripple after the clock edge
    ripple = 0.03 * rng.standard_normal(spc)
    ripple[:3] = 0.0
    return c + ripple


def generate_templates(samples_per_cycle=DEFAULT_SAMPLES_PER_CYCLE, master_seed=MASTER_SEED, isa=ISA):
    rng = np.random.default_rng(master_seed)
    templates = {}
    for kind in Kind:
        cls = isa[kind]
        shapes = _CYCLE_SHAPES[kind]
        cycles = [
            _cycle_template(rng, *shapes[c % len(shapes)], samples_per_cycle, cls.complexity)
            for c in range(cls.cycles)
        ]
        templates[kind] = np.concatenate(cycles)
    return templates


@dataclass(frozen=True, eq=False)
class DeviceModel:
    """Power model of the simulated device. Immutable; use :meth:`with_noise`."""

    samples_per_cycle: int = DEFAULT_SAMPLES_PER_CYCLE
    baseline: float = 1.0
    distance_gain: float = 3.0
    noise_sigma: float = 0.0
    templates: Mapping[Kind, np.ndarray] = field(default_factory=dict)
    isa: Mapping[Kind, InstructionClass] = field(default_factory=lambda: dict(ISA))
    distance_range: tuple[int, int] = DISTANCE_RANGE

    def __post_init__(self):
        if self.samples_per_cycle < 1:
            raise ValueError("samples_per_cycle must be positive")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.templates:
            object.__setattr__(self, "templates", generate_templates(self.samples_per_cycle, isa=self.isa))
        for kind, tpl in self.templates.items():
            want = self.isa[kind].cycles * self.samples_per_cycle
            if len(tpl) != want:
                raise ValueError(f"template for {kind} has {len(tpl)} samples, expected {want}")
            tpl.setflags(write=False)
        lo, hi = self.distance_range
        if not 0 <= lo < hi:
            raise ValueError(f"bad distance range {self.distance_range}")

    @property
    def branch_window(self) -> int:
        return self.isa[Kind.BRANCH].cycles * self.samples_per_cycle

    @property
    def samples_per_instruction(self) -> int:
        cycles = {self.isa[k].cycles for k in BODY_KINDS}
        if len(cycles) != 1:
            raise ValueError("non-branch instruction classes must share one cycle count")
        return cycles.pop() * self.samples_per_cycle

    def encode(self, distance):
        lo, hi = self.distance_range
        return (np.asarray(distance, dtype=np.float64) - lo) / (hi - lo)

    def distance_ramp(self) -> np.ndarray:
        """Per-sample shape of the data-dependent component (1 at the window start, 0 at its end)."""
        w = self.branch_window
        return 1.0 - np.arange(w) / (w - 1)

    def branch_signal(self, distance) -> np.ndarray:
        """Noise-free branch window without the baseline."""
        return self.templates[Kind.BRANCH] + self.distance_gain * self.encode(distance) * self.distance_ramp()

    def signal_power(self) -> float:
        """Variance of the branch template; the reference for SNR figures."""
        return float(np.var(self.templates[Kind.BRANCH]))

    def snr_db(self) -> float:
        if self.noise_sigma == 0:
            return float("inf")
        return 10 * np.log10(self.signal_power() / self.noise_sigma**2)

    def with_noise(self, sigma) -> "DeviceModel":
        return replace(self, noise_sigma=float(sigma))

    def with_snr(self, snr_db) -> "DeviceModel":
        return self.with_noise(np.sqrt(self.signal_power() / 10 ** (snr_db / 10)))

    def peak_prominence(self) -> float:
        """Half the smallest clock-peak prominence among the templates."""
        proms = []
        spc = self.samples_per_cycle
        for tpl in self.templates.values():
            for c in range(0, len(tpl), spc):
                cyc = tpl[c : c + spc]
                proms.append(cyc[1] - max(cyc[0], cyc[2:].max()))
        return 0.5 * float(min(proms))


def default_device(noise_sigma=0.0, **kw) -> DeviceModel:
    return DeviceModel(noise_sigma=noise_sigma, **kw)


@dataclass(frozen=True)
class ExecutionRecord:
    """Ground truth of one program run.

    ``sample_spans`` alternates block, branch, block, ... and tiles the trace.
    ``branches`` holds (address of the branch, skipped instructions).
    """

    block_ids: tuple[int, ...]
    branches: tuple[tuple[int, int], ...]
    sample_spans: tuple[tuple[int, int], ...]
    bodies: tuple[tuple[Kind, ...], ...]
    samples_per_cycle: int = DEFAULT_SAMPLES_PER_CYCLE

    def __post_init__(self):
        if len(self.branches) != max(len(self.block_ids) - 1, 0):
            raise ValueError("an execution record needs exactly one branch between consecutive blocks")

    @property
    def n_samples(self) -> int:
        return self.sample_spans[-1][1] if self.sample_spans else 0

    @property
    def block_spans(self):
        return self.sample_spans[0::2]

    @property
    def branch_spans(self):
        return self.sample_spans[1::2]

    @property
    def transitions(self):
        return list(zip(self.block_ids[:-1], self.block_ids[1:]))


def timeline(bodies, branch_count, samples_per_cycle=DEFAULT_SAMPLES_PER_CYCLE, isa=ISA):
    spans = []
    pos = 0
    branch_len = isa[Kind.BRANCH].cycles * samples_per_cycle
    for i, body in enumerate(bodies):
        n = sum(isa[k].cycles for k in body) * samples_per_cycle
        spans.append((pos, pos + n))
        pos += n
        if i < branch_count:
            spans.append((pos, pos + branch_len))
            pos += branch_len
    return tuple(spans)


def execute(program, data, samples_per_cycle=DEFAULT_SAMPLES_PER_CYCLE) -> ExecutionRecord:
    """Walk ``program`` on the input bytes and return the ground-truth path."""
    path, branches = program.walk(data)
    bodies = tuple(program.blocks[b].instructions for b in path)
    spans = timeline(bodies, len(branches), samples_per_cycle)
    return ExecutionRecord(tuple(path), tuple(branches), spans, bodies, samples_per_cycle)


@dataclass(frozen=True, eq=False)
class PowerTrace:
    samples: np.ndarray
    samples_per_cycle: int = DEFAULT_SAMPLES_PER_CYCLE
    seed: int = 0

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.float32)
        if s.ndim != 1:
            raise ValueError("trace samples must be one-dimensional")
        if not np.all(np.isfinite(s)):
            raise ValueError("trace contains non-finite samples")
        if self.samples_per_cycle < 1:
            raise ValueError("samples_per_cycle must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"trace seed must fit in an unsigned 64-bit field, got {self.seed}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, PowerTrace):
            return NotImplemented
        return (
            self.samples_per_cycle == other.samples_per_cycle
            and self.seed == other.seed
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def render(device: DeviceModel, record: ExecutionRecord) -> np.ndarray:
    """Deterministic part of the trace (float64, baseline included)."""
    if record.samples_per_cycle != device.samples_per_cycle:
        raise ValueError(
            f"record timed at {record.samples_per_cycle} samples/cycle, device uses {device.samples_per_cycle}"
        )
    parts = []
    for i, body in enumerate(record.bodies):
        missing = {k for k in body if k not in device.templates}
        if missing:
            raise KeyError(f"device has no template for {sorted(map(str, missing))}")
        if body:
            parts.append(np.concatenate([device.templates[k] for k in body]))
        if i < len(record.branches):
            if Kind.BRANCH not in device.templates:
                raise KeyError("device has no template for BRANCH")
            parts.append(device.branch_signal(record.branches[i][1]))
    clean = np.concatenate(parts) if parts else np.empty(0)
    return clean + device.baseline


def add_noise(device, clean, seed) -> PowerTrace:
    noisy = clean
    if device.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noisy = clean + rng.normal(0.0, device.noise_sigma, clean.shape)
    return PowerTrace(noisy, device.samples_per_cycle, int(seed))


def synthesize_trace(device: DeviceModel, record: ExecutionRecord, seed: int) -> PowerTrace:
    return add_noise(device, render(device, record), seed)


def theoretical_scores(program, inputs: Sequence[bytes]) -> list[int]:
    """Number of block transitions each input adds to the set seen so far."""
    seen = set()
    scores = []
    for data in inputs:
        path, _ = program.walk(data)
        new = set(zip(path[:-1], path[1:])) - seen
        seen |= new
        scores.append(len(new))
    return scores


# --------------------------------------------------------------------------
# trace file: "PTRC", u16 version, u16 samples/cycle, u64 seed, u64 count, f32[count]
# --------------------------------------------------------------------------
TRACE_MAGIC = b"PTRC"
TRACE_VERSION = 1
_TRACE_HEADER = struct.Struct("<4sHHQQ")


def trace_to_bytes(trace: PowerTrace) -> bytes:
    head = _TRACE_HEADER.pack(
        TRACE_MAGIC, TRACE_VERSION, trace.samples_per_cycle, trace.seed & 0xFFFFFFFFFFFFFFFF, len(trace)
    )
    return head + trace.samples.astype("<f4").tobytes()


def trace_from_bytes(buf: bytes) -> PowerTrace:
    if len(buf) < _TRACE_HEADER.size:
        raise ValueError("truncated trace file")
    magic, version, spc, seed, count = _TRACE_HEADER.unpack_from(buf)
    if magic != TRACE_MAGIC:
        raise ValueError(f"not a trace file (magic {magic!r})")
    if version != TRACE_VERSION:
        raise ValueError(f"unsupported trace format version {version}")
    body = buf[_TRACE_HEADER.size :]
    if len(body) != 4 * count:
        raise ValueError(f"trace file declares {count} samples but holds {len(body) // 4}")
    return PowerTrace(np.frombuffer(body, dtype="<f4").astype(np.float32), spc, seed)


def write_trace(path, trace: PowerTrace):
    Path(path).write_bytes(trace_to_bytes(trace))


def read_trace(path) -> PowerTrace:
    return trace_from_bytes(Path(path).read_bytes())
