"""Pipeline configuration: one YAML (or JSON) file, flags override it."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .labels import YEAR_WINDOW
from .models import ModelConfig, TASKS
from .splits import DEFAULT_BIN_EDGES, DEFAULT_FRACTIONS
from .synthdata import SceneSpec


class ConfigFileError(ValueError):
    pass


@dataclass
class Paths:
    scenes: str | None = None  # scenes.json listing SceneMeta entries
    customers: str | None = None
    buildings: str | None = None
    counties: str | None = None
    nl_raster: str | None = None


@dataclass
class RegionConfig:
    bounds: tuple[float, float, float, float] | None = None  # lon/lat; defaults to the synthetic bounds
    tile_size_m: float = 250.0
    resolution_m: float = 0.5
    projection: str | None = None
    resampling: str = "bilinear"


@dataclass
class SplitConfig:
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    bin_edges: tuple[int, ...] = DEFAULT_BIN_EDGES
    alpha: float = 0.05
    max_chi2: float | None = None


@dataclass
class NLConfig:
    noise_level: float = 2.0
    psf_radius: float = 0.75
    cell_tiles: int = 10


@dataclass
class BaselineConfig:
    calibration_split: str = "val"
    eval_split: str = "test_out"


@dataclass
class PipelineConfig:
    seed: int = 0
    workdir: str = "work"
    limit_tiles: int | None = None
    paths: Paths = field(default_factory=Paths)
    region: RegionConfig = field(default_factory=RegionConfig)
    years: tuple[int, int] = YEAR_WINDOW
    split: SplitConfig = field(default_factory=SplitConfig)
    regression_eligibility: str = "n_total"
    model_defaults: dict = field(default_factory=dict)
    models: dict[str, dict] = field(default_factory=dict)
    synth: dict | None = None
    nl: NLConfig = field(default_factory=NLConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    tasks: tuple[str, ...] = tuple(TASKS)
    base_dir: str = "."  # directory relative input paths resolve against

    def scene_spec(self) -> SceneSpec | None:
        if self.synth is None:
            return None
        d = dict(self.synth)
        d["seed"] = self.seed
        return SceneSpec.from_dict(d)

    def model_config(self, task_id: str) -> ModelConfig:
        d = {**self.model_defaults, **self.models.get(task_id, {})}
        d["seed"] = self.seed
        return ModelConfig.from_dict(d)

    def region_bounds(self) -> tuple[float, float, float, float]:
        if self.region.bounds is not None:
            return tuple(self.region.bounds)
        spec = self.scene_spec()
        if spec is None:
            raise ConfigFileError("region.bounds is required when no synth section is configured")
        return spec.bounds

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    # hashing -----------------------------------------------------------
    def section_for(self, stage: str) -> Any:
        """The configuration that determines a stage's outputs (upstream excluded)."""
        common = {"seed": self.seed, "limit_tiles": self.limit_tiles}
        if stage == "synth":
            return {**common, "synth": self.synth, "nl": asdict(self.nl)}
        if stage == "tile":
            return {**common, "region": asdict(self.region), "bounds": self.region_bounds(),
                    "scenes": self.paths.scenes}
        if stage == "label":
            return {**common, "years": list(self.years), "customers": self.paths.customers,
                    "buildings": self.paths.buildings, "counties": self.paths.counties}
        if stage == "split":
            return {**common, "split": asdict(self.split)}
        if stage.startswith("train:"):
            task = stage.split(":", 1)[1]
            return {**common, "model": self.model_config(task).to_dict(),
                    "regression_eligibility": self.regression_eligibility}
        if stage.startswith("evaluate:"):
            return {**common, "regression_eligibility": self.regression_eligibility}
        if stage == "baseline":
            return {**common, "baseline": asdict(self.baseline), "nl_raster": self.paths.nl_raster}
        if stage == "report":
            return common
        raise KeyError(stage)


UPSTREAM = {
    "synth": (),
    "tile": ("synth",),
    "label": ("tile", "synth"),
    "split": ("label",),
}


def upstream_of(stage: str) -> tuple[str, ...]:
    if stage in UPSTREAM:
        return UPSTREAM[stage]
    if stage.startswith("train:"):
        return ("split",)
    if stage.startswith("evaluate:"):
        _, task, _split = stage.split(":")
        return (f"train:{task}",)
    if stage == "baseline":
        return ("split", "synth")
    if stage == "report":
        return ()
    raise KeyError(stage)


def canonical_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def config_hash(cfg: PipelineConfig, stage: str) -> str:
    """Hash of a stage's own section chained with its upstream stages' hashes."""
    ups = {u: config_hash(cfg, u) for u in upstream_of(stage)}
    return canonical_hash({"stage": stage, "section": cfg.section_for(stage), "upstream": ups})


def _build(cls, data: Mapping | None):
    data = dict(data or {})
    known = cls.__dataclass_fields__
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigFileError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(d: Mapping, base_dir: str | Path = ".") -> PipelineConfig:
    d = copy.deepcopy(dict(d))
    nested = {
        "paths": Paths, "region": RegionConfig, "split": SplitConfig,
        "nl": NLConfig, "baseline": BaselineConfig,
    }
    kwargs: dict[str, Any] = {}
    for key, value in d.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value)
        elif key in PipelineConfig.__dataclass_fields__ and key != "base_dir":
            kwargs[key] = value
        else:
            raise ConfigFileError(f"unknown config key {key!r}")
    for key in ("years", "tasks"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    cfg = PipelineConfig(**kwargs, base_dir=str(base_dir))
    unknown_tasks = (set(cfg.models) | set(cfg.tasks)) - set(TASKS)
    if unknown_tasks:
        raise ConfigFileError(f"unknown task ids: {sorted(unknown_tasks)}")
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent.resolve())
