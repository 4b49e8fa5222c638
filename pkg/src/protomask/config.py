"""Run configuration: one JSON file, overridden by flags, overridden by PROTOMASK_SEED."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from .losses import LossWeights
from .model import BackboneConfig
from .training import ScheduleConfig

SEED_ENV = "PROTOMASK_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class SegmentationConfig:
    method: str = "toy"  # toy | contour | external
    rows: int = 2
    cols: int = 2
    jitter: int = 0
    jitter_seed: int = 0
    full_frame: bool = False
    threshold: float = 0.001
    dilation: int = 3
    contours: Optional[str] = None  # directory of <image_id>.png contour maps
    external: Optional[str] = None  # existing mask archive to ingest
    size_threshold: float = 0.01

    def __post_init__(self):
        if self.method not in ("toy", "contour", "external"):
            raise ConfigError(f"unknown segmentation method {self.method!r}")


@dataclass
class ModelSection:
    prototypes_per_class: int = 10
    eps: float = 1e-4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


@dataclass
class MetricSection:
    activity_eps: float = 1e-3
    percentile: float = 95.0
    top_k: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    view_count: Union[int, str] = "auto"
    view_resolution: tuple[int, int] = (32, 32)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    metrics: MetricSection = field(default_factory=MetricSection)

    def __post_init__(self):
        self.view_resolution = tuple(self.view_resolution)
        if self.view_count != "auto" and (not isinstance(self.view_count, int) or self.view_count < 1):
            raise ConfigError(f"view_count must be 'auto' or a positive integer, got {self.view_count!r}")
        if tuple(self.model.backbone.input_resolution) != self.view_resolution:
            self.model.backbone.input_resolution = self.view_resolution
        self.schedule.seed = self.seed

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "segmentation": SegmentationConfig,
    "schedule": ScheduleConfig,
    "loss_weights": LossWeights,
    "metrics": MetricSection,
}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    unknown = set(data) - {f for f in RunConfig.__dataclass_fields__}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        kwargs = {}
        for key, cls in _SECTIONS.items():
            if key in data:
                kwargs[key] = cls(**data.pop(key))
        if "model" in data:
            model = dict(data.pop("model"))
            backbone = BackboneConfig(**model.pop("backbone", {}))
            kwargs["model"] = ModelSection(backbone=backbone, **model)
        return RunConfig(**data, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """Read ``path`` (if any), apply flat ``section.key`` overrides, then the seed env var."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return config_from_dict(data)
