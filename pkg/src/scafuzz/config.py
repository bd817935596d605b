"""Run configuration shared by the command-line tools, stored as JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .device import DeviceModel
from .pipeline import (
    DEFAULT_CELLS,
    METHODS,
    VOTES,
    Preprocessing,
    Quantization,
    SessionSpec,
    random_inputs,
    train_models,
)
from .targets import aes_target, generate_synthetic_program


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # device
    noise_sigma: float | None = None
    snr_db: float | None = 10.0
    samples_per_cycle: int = 8
    distance_gain: float = 3.0
    # target
    target: str = "synthetic"
    version: int = 1
    program_seed: int = 42
    # inputs
    n_inputs: int = 100
    input_seed: int = 1
    # preprocessing and scoring
    mean_count: int = 10
    sweep_count: int = 1
    alpha: float = 0.3
    groups: int = 5
    method: str = "RI"
    vote: str = "single"
    quantization: str = "tolerance"
    decimals: int = 2
    width: float = 8.0
    dedup: bool = True
    dedup_threshold: float | None = None
    exhaustive_candidates: bool = False
    # classifiers
    k: int = 3
    train_branches: int = 1500
    train_seed: int = 7
    neg_ratio: float = 3.0
    scaling: str = "pooled"
    # randomness of the measurements
    noise_seed: int = 2
    # grid report
    cells: list = field(default_factory=lambda: [list(c) for c in DEFAULT_CELLS])
    methods: list = field(default_factory=lambda: list(METHODS))
    votes: list = field(default_factory=lambda: list(VOTES))
    aes_runs: int = 100
    # outputs
    output: str | None = None
    workers: int | None = None

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.noise_sigma is None or self.noise_sigma >= 0, "noise_sigma must be >= 0")
        need(self.noise_sigma is not None or self.snr_db is not None, "set noise_sigma or snr_db")
        need(self.samples_per_cycle >= 2, "samples_per_cycle must be >= 2")
        need(self.target in ("synthetic", "aes"), f"target must be 'synthetic' or 'aes', got {self.target!r}")
        need(self.version in range(1, 6), f"version must be 1..5, got {self.version}")
        need(self.n_inputs >= 1, "n_inputs must be >= 1")
        need(self.mean_count >= 1 and self.sweep_count >= 1, "mean_count and sweep_count must be >= 1")
        need(0 < self.alpha <= 1, "alpha must lie in (0, 1]")
        need(self.groups >= 1, "groups must be >= 1")
        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(self.vote in VOTES, f"vote must be one of {VOTES}")
        need(self.k >= 1 and self.k % 2 == 1, f"k must be a positive odd integer, got {self.k}")
        need(self.train_branches >= 50, "train_branches must be >= 50")
        need(self.neg_ratio > 0, "neg_ratio must be positive")
        need(self.scaling in ("pooled", "sample"), "scaling must be 'pooled' or 'sample'")
        need(self.quantization in ("round", "tolerance"), "quantization must be 'round' or 'tolerance'")
        need(0 <= self.decimals <= 12, "decimals must lie in 0..12")
        need(self.width > 0, "width must be positive")
        need(self.dedup_threshold is None or self.dedup_threshold > 0, "dedup_threshold must be positive")
        need(self.aes_runs >= 1, "aes_runs must be >= 1")
        need(all(len(c) == 2 and min(c) >= 1 for c in self.cells), "cells are [mean_count, sweep_count] pairs")
        need(all(m in METHODS for m in self.methods), f"methods must be drawn from {METHODS}")
        need(all(v in VOTES for v in self.votes), f"votes must be drawn from {VOTES}")
        need(self.workers is None or self.workers >= 1, "workers must be >= 1")
        return self

    # -- builders ----------------------------------------------------------

    def device(self) -> DeviceModel:
        dev = DeviceModel(samples_per_cycle=self.samples_per_cycle, distance_gain=self.distance_gain)
        if self.noise_sigma is not None:
            return dev.with_noise(self.noise_sigma)
        return dev.with_snr(self.snr_db)

    def program(self):
        if self.target == "aes":
            return aes_target()
        return generate_synthetic_program(self.version, self.program_seed)

    def inputs(self, width):
        return random_inputs(self.n_inputs, self.input_seed, width)

    def preprocessing(self) -> Preprocessing:
        return Preprocessing(self.mean_count, self.sweep_count, self.alpha)

    def quant(self) -> Quantization:
        return Quantization(self.quantization, self.decimals, self.width)

    def train(self, device=None):
        return train_models(
            device or self.device(), self.k, self.train_branches, self.train_seed, self.scaling, neg_ratio=self.neg_ratio
        )

    def session(self, device, models, groups=None) -> SessionSpec:
        if groups is None:
            groups = self.groups if self.vote == "majority" else 1
        return SessionSpec(
            device,
            models,
            self.preprocessing(),
            groups,
            self.noise_seed,
            self.exhaustive_candidates,
            self.dedup,
            self.dedup_threshold,
        )

    # -- file form -----------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**data).validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())
