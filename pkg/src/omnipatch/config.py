"""Hyperparameter containers.

Defaults mirror the published implementation table (k=5, p=0.2, gamma=0.7,
beta=0.3, 10+10 epochs, 150 batches of 2, 2048x1024 input, ViT downscale 0.75
and the auxiliary coefficients).  Values the source leaves open (EOT ranges,
optimizer, step size) are marked where they are defined.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigurationError

DIVERGENCES = ("js", "kl")
OPTIMIZERS = ("signed_gradient", "adaptive")
STRATEGIES = ("sensitive", "center", "random")


def _finite_nonneg(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
        raise ConfigurationError(f"{name} must be a finite nonnegative number, got {value!r}")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.7
    beta: float = 0.3
    lambda_attn: float = 1e-1
    lambda_boundary: float = 2e-1
    lambda_tv: float = 1e-4
    lambda_align: float = 1e-1
    js_threshold: str = "mean"
    # "batch" thresholds against the mean over the whole batch, "image" per image
    js_threshold_scope: str = "batch"
    divergence: str = "js"
    # None means every layer
    attn_layers: tuple[int, ...] | None = None
    # False: the CNN-side gradient is treated as a constant inside the alignment term
    align_second_order: bool = True

    def __post_init__(self):
        for name in ("gamma", "beta", "lambda_attn", "lambda_boundary", "lambda_tv", "lambda_align"):
            _finite_nonneg(name, getattr(self, name))
        if self.gamma > 1 or self.beta > 1:
            raise ConfigurationError("gamma and beta must lie in [0, 1]")
        if self.js_threshold != "mean":
            raise ConfigurationError(f"unsupported js_threshold {self.js_threshold!r}")
        if self.js_threshold_scope not in ("batch", "image"):
            raise ConfigurationError("js_threshold_scope must be 'batch' or 'image'")
        if self.divergence not in DIVERGENCES:
            raise ConfigurationError(f"divergence must be one of {DIVERGENCES}")
        if self.attn_layers is not None:
            object.__setattr__(self, "attn_layers", tuple(int(i) for i in self.attn_layers))


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batches_per_epoch: int = 150
    batch_size: int = 2
    attack_iterations: int = 7
    optimizer: str = "signed_gradient"
    # not given by the source; one 8-bit level per signed step
    step_size: float = 1 / 255
    seed: int = 0
    patch_size: int = 200
    init_mode: str = "uniform_random"
    placement_strategy: str = "sensitive"

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigurationError("epoch counts must be nonnegative")
        if self.stage1_epochs + self.stage2_epochs == 0:
            raise ConfigurationError("schedule must contain at least one epoch")
        for name in ("batches_per_epoch", "batch_size", "attack_iterations", "patch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        _finite_nonneg("step_size", self.step_size)
        if self.init_mode not in ("uniform_random", "gray"):
            raise ConfigurationError("init_mode must be 'uniform_random' or 'gray'")
        if self.placement_strategy not in STRATEGIES:
            raise ConfigurationError(f"placement_strategy must be one of {STRATEGIES}")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    @property
    def steps_per_epoch(self) -> int:
        return self.batches_per_epoch * self.attack_iterations

    def stage_of(self, epoch: int) -> str:
        return "stage1" if epoch < self.stage1_epochs else "stage2"


def _as_range(name, value) -> tuple[float, float]:
    """A scalar r means the symmetric range [-r, r]."""
    if isinstance(value, (int, float)):
        lo, hi = -float(value), float(value)
    else:
        lo, hi = (float(v) for v in value)
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
        raise ConfigurationError(f"{name} must be an ordered finite range, got {value!r}")
    return lo, hi


@dataclass(frozen=True)
class EotParams:
    # ranges are assumptions: the source names the transform families only
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range_deg: tuple[float, float] = (-10.0, 10.0)
    translation_y_px: tuple[float, float] = (-10.0, 10.0)
    translation_x_px: tuple[float, float] = (-10.0, 10.0)
    enabled: bool = True

    def __post_init__(self):
        for name in ("scale_range", "rotation_range_deg", "translation_y_px", "translation_x_px"):
            value = getattr(self, name)
            if name == "scale_range" and isinstance(value, (int, float)):
                value = (value, value)
            object.__setattr__(self, name, _as_range(name, value))
        if not self.scale_range[0] > 0:
            raise ConfigurationError(f"scale_range must be positive, got {self.scale_range}")

    @classmethod
    def identity(cls) -> "EotParams":
        return cls(enabled=False)


@dataclass(frozen=True)
class PlacementConfig:
    dilation_k: int = 5
    sample_fraction: float = 0.2
    label_source: str = "predicted"
    # True restores strict 1/B averaging of per-image class entropies
    strict_average: bool = False

    def __post_init__(self):
        if self.dilation_k < 1 or self.dilation_k % 2 == 0:
            raise ConfigurationError("dilation_k must be an odd positive integer")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigurationError("sample_fraction must lie in (0, 1]")
        if self.label_source not in ("predicted", "ground_truth"):
            raise ConfigurationError("label_source must be 'predicted' or 'ground_truth'")


def to_dict(obj) -> dict:
    """Plain-dict view of a (possibly nested) dataclass, tuples as lists."""

    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return convert(obj)


def config_hash(*objs) -> str:
    blob = json.dumps([to_dict(o) for o in objs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def from_dict(cls, data: dict | None, *, path: str = ""):
    """Build a flat config dataclass from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigurationError(f"unknown keys{where}: {', '.join(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


__all__: Sequence[str] = (
    "LossConfig",
    "TrainSchedule",
    "EotParams",
    "PlacementConfig",
    "to_dict",
    "from_dict",
    "config_hash",
)
