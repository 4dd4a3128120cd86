"""Run configuration: every tunable constant in one place, YAML in and out.

The dataclasses below are the single source of defaults. A config file only
needs the keys it wants to override; unknown keys are rejected so typos fail
loudly instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .io import atomic_write_text
from .visibility import RvsParams


@dataclass(frozen=True)
class PsoConfig:
    """Particle swarm settings for the failure-recovery search."""

    n_particles: int = 32
    n_iters: int = 20
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    rot_range_deg: float = 15.0
    trans_range_mm: float = 50.0

    def __post_init__(self):
        if self.n_particles < 1 or self.n_iters < 0:
            raise ValueError("swarm needs at least one particle")
        for name in ("inertia", "cognitive", "social", "rot_range_deg", "trans_range_mm"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class TrackConfig:
    """Per-frame pose tracking constants."""

    rvs: RvsParams = field(default_factory=RvsParams)
    sigma_t_sq: float = 75.0
    sigma_s_sq: float = 0.04
    max_inner_iters: int = 20
    step_tol: float = 1e-6
    rot_fail_rad: float = float(np.pi / 4.0)
    trans_fail_mm: float = 100.0
    occlusion_fail_frac: float = 0.5
    use_temporal: bool = True
    use_pso: bool = True
    pso: PsoConfig = field(default_factory=PsoConfig)

    def __post_init__(self):
        for name in (
            "sigma_t_sq",
            "sigma_s_sq",
            "step_tol",
            "rot_fail_rad",
            "trans_fail_mm",
            "occlusion_fail_frac",
        ):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be at least 1")


@dataclass(frozen=True)
class PipelineConfig:
    """End-to-end run settings: tracking, identity adaptation, determinism."""

    track: TrackConfig = field(default_factory=TrackConfig)
    adapt: bool = True
    adapt_stride: int = 5
    n_id: int = 28
    n_exp: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.adapt_stride < 1:
            raise ValueError("adapt_stride must be at least 1")
        if self.n_id < 1 or self.n_exp < 1:
            raise ValueError("model ranks must be positive")


_NESTED = {
    (PipelineConfig, "track"): TrackConfig,
    (TrackConfig, "pso"): PsoConfig,
    (TrackConfig, "rvs"): RvsParams,
}


def _from_dict(cls, doc):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        sub = _NESTED.get((cls, f.name))
        if sub is not None:
            value = _from_dict(sub, value)
        elif f.name == "occlusion_range_mm":
            value = tuple(float(x) for x in value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(doc):
    return _from_dict(PipelineConfig, doc)


def config_to_dict(config):
    doc = dataclasses.asdict(config)
    doc["track"]["rvs"]["occlusion_range_mm"] = list(
        doc["track"]["rvs"]["occlusion_range_mm"]
    )
    return doc


def load_config(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return config_from_dict(doc)


def save_config(path, config):
    atomic_write_text(path, yaml.safe_dump(config_to_dict(config), sort_keys=True))
