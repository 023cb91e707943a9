"""Experiment configuration: TOML parsing into the typed stage configs.

A config file carries [scene], [rig], [degrade], [restore], [coarse],
[train], and [eval] tables; all keys are optional and fall back to the
desk-scale defaults below. Unknown keys fail loudly rather than silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field as dc_field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .training import CoarseConfig, TrainConfig

DEGRADATION_TASKS = ("sr", "deblur", "denoise", "mixed", "nerf_like")


@dataclass
class SceneConfig:
    type: str = "object"         # object (hemisphere rig) | forward
    name: str = "two_primitive"
    seed: int = 0
    use_specular: bool = True


@dataclass
class RigConfig:
    train_views: int = 20
    test_views: int = 5
    resolution: int = 64


@dataclass
class DegradeConfig:
    task: str = "mixed"          # one of DEGRADATION_TASKS
    sr_factor: int = 2
    motion_kernel_size: int = 13
    noise_preset: str = "gain8"
    per_view_kernel: bool = True
    # nerf_like: iterations of the clean-fit whose renders become the input
    nerf_like_iterations: int = 800
    stages: list = dc_field(default_factory=list)   # explicit override


@dataclass
class RestoreConfig:
    inconsistency: float = 1.0   # RMS warp amplitude in pixels
    per_view: int = 1            # restorations drawn per view


@dataclass
class EvalConfig:
    latent_samples: int = 3
    png_previews: bool = True


@dataclass
class ExperimentConfig:
    scene: SceneConfig = dc_field(default_factory=SceneConfig)
    rig: RigConfig = dc_field(default_factory=RigConfig)
    degrade: DegradeConfig = dc_field(default_factory=DegradeConfig)
    restore: RestoreConfig = dc_field(default_factory=RestoreConfig)
    coarse: CoarseConfig = dc_field(default_factory=CoarseConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.scene.type not in ("object", "forward"):
            raise ValueError(f"unknown scene type {self.scene.type!r}")
        if self.degrade.task not in DEGRADATION_TASKS:
            raise ValueError(f"unknown degradation task {self.degrade.task!r}")
        if self.rig.train_views < 1 or self.rig.test_views < 1:
            raise ValueError("rig needs at least one train and one test view")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *sections: str) -> str:
        """Stable digest of the named sections, for stage caching."""
        doc = {s: dataclasses.asdict(getattr(self, s)) for s in sections}
        blob = json.dumps(doc, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, table: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(table) - known
    if bad:
        raise ValueError(f"unknown keys in [{where}]: {sorted(bad)}")
    kwargs = dict(table)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) \
                and f.type == "tuple":
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    tables = {
        "scene": SceneConfig, "rig": RigConfig, "degrade": DegradeConfig,
        "restore": RestoreConfig, "coarse": CoarseConfig, "train": TrainConfig,
        "eval": EvalConfig,
    }
    bad = set(doc) - set(tables)
    if bad:
        raise ValueError(f"unknown config tables: {sorted(bad)}")
    kwargs = {}
    for name, cls in tables.items():
        table = dict(doc.get(name, {}))
        if name in ("coarse", "train"):
            for key in ("background", "bounds"):
                if key in table and isinstance(table[key], list):
                    table[key] = tuple(tuple(v) if isinstance(v, list) else v
                                       for v in table[key]) \
                        if key == "bounds" else tuple(table[key])
        kwargs[name] = _build(cls, table, name)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))
