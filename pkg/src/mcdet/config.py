"""Declarative run configuration with strict validation.

A config file is a single JSON object with one section per pipeline stage.
Every key must be known; unknown keys are rejected up front so typos never
silently fall back to defaults. CLI flags override individual values after
the file is loaded.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import GridSpec, LevelSpec
from .metrics import DEFAULT_FP_RATES


@dataclass
class SynthSection:
    scans: int = 5
    objects: int = 3
    decoys: int = 2


@dataclass
class SimSection:
    passes: int = 10
    object_prob_mean: float = 0.9
    object_prob_std: float = 0.03
    decoy_prob_mean: float = 0.62
    decoy_prob_std: float = 0.05
    decoy_extra_noise: float = 0.18
    background_fp_rate: float = 6.0


@dataclass
class TrainSection:
    loss: str = "ce"
    epochs: int = 50
    learning_rate: float = 1e-4
    mc_integration_samples: int = 10
    neg_pos_ratio: int = 3
    smooth_l1_weight: float = 1.0
    dropout: float = 0.1
    channels: int = 8


@dataclass
class InferSection:
    passes: int = 10
    mc: bool = True


@dataclass
class AggregateSection:
    prob_floor: float = 0.1
    nms_iou: float = 0.1


@dataclass
class EvalSection:
    fp_rates: list = field(default_factory=lambda: list(DEFAULT_FP_RATES))
    unc_threshold: float | None = None


@dataclass
class SweepSection:
    prob_grid: list = field(default_factory=lambda: [round(0.1 * i, 2) for i in range(1, 10)])
    unc_grid: list = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(2, 13)])


@dataclass
class GridSection:
    dims: int = 2
    image_size: list = field(default_factory=lambda: [64, 64])
    levels: list = field(
        default_factory=lambda: [
            {"stride": 8, "base_size": [8.0, 8.0]},
            {"stride": 16, "base_size": [16.0, 16.0]},
        ]
    )
    num_classes: int = 2

    def to_grid(self) -> GridSpec:
        return GridSpec(
            dims=self.dims,
            image_size=tuple(self.image_size),
            levels=tuple(
                LevelSpec(int(lv["stride"]), tuple(float(b) for b in lv["base_size"]))
                for lv in self.levels
            ),
            num_classes=self.num_classes,
        )


@dataclass
class RunConfig:
    seed: int | None = None
    grid: GridSection = field(default_factory=GridSection)
    synth: SynthSection = field(default_factory=SynthSection)
    sim: SimSection = field(default_factory=SimSection)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferSection = field(default_factory=InferSection)
    aggregate: AggregateSection = field(default_factory=AggregateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)


def _fill_section(section, data: dict, path: str) -> None:
    known = {f.name: f for f in fields(section)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {path}{key!r}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"config section {path}{key!r} must be an object")
            _fill_section(current, value, f"{path}{key}.")
        else:
            setattr(section, key, value)


def load_config(path: str | Path | None) -> RunConfig:
    """Build a RunConfig from an optional JSON file; defaults otherwise."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        _fill_section(cfg, data, "")
    # surface invalid values now, before any stage runs
    cfg.grid.to_grid()
    return cfg
