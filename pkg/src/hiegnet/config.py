"""Run configuration: one JSON document, one dataclass per section.

Unknown keys anywhere raise ``ConfigError``. Missing keys take the dataclass
defaults, so ``{}`` is a complete config.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .baseline import ForestSpec
from .hetgraph import GraphConfig
from .model import ModelSpec
from .synthdata import SynthConfig
from .training import SEARCH_SPACE, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    graphs: list = field(default_factory=list)       # serialized graph files; empty -> <out>/graphs
    test_graphs: list = field(default_factory=list)  # between mode only; empty -> last graph
    nodes_csv: list = field(default_factory=list)    # build-graph inputs; empty -> <out>/slides/*/nodes.csv
    split: str = "within"
    test_fraction: float = 0.15
    n_slides: int = 1

    def __post_init__(self):
        if self.split not in ("within", "between"):
            raise ConfigError(f"data.split must be 'within' or 'between', got {self.split!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if self.n_slides < 1:
            raise ConfigError("data.n_slides must be >= 1")


@dataclass
class FeatureConfig:
    node_types: list = field(default_factory=lambda: ["g", "m", "t"])
    scaling: str = "minmax"
    # raster inside each slide directory used for LBP; RGB .ppm is reduced to luminance
    texture_channel: str = "gray.pgm"

    def __post_init__(self):
        if not self.texture_channel.endswith((".pgm", ".ppm")):
            raise ConfigError("features.texture_channel must name a .pgm or .ppm file")
        if "g" not in self.node_types:
            raise ConfigError("features.node_types must include 'g'")
        if self.scaling != "minmax":
            raise ConfigError("features.scaling supports only 'minmax'")


@dataclass
class SearchConfig:
    space: dict = field(default_factory=lambda: copy.deepcopy(SEARCH_SPACE))
    k: int = 4

    def __post_init__(self):
        allowed = {f.name for f in fields(ModelSpec)} | {"remove_groups"}
        bad = set(self.space) - allowed
        if bad:
            raise ConfigError(f"search.space has unknown axes {sorted(bad)}")
        for key, vals in self.space.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"search.space.{key} must be a non-empty list")
        if self.k < 2:
            raise ConfigError("search.k must be >= 2")


@dataclass
class OutputConfig:
    dir: str = "runs/default"


SECTIONS = {
    "data": DataConfig,
    "graph": GraphConfig,
    "features": FeatureConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "search": SearchConfig,
    "synth": SynthConfig,
    "baseline": ForestSpec,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    baseline: ForestSpec = field(default_factory=ForestSpec)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def model_spec(self) -> ModelSpec:
        types = tuple(self.features.node_types)
        return ModelSpec.from_dict({**self.model.to_dict(), "node_types": types,
                                    "in_dims": {t: self.model.in_dims[t] for t in types}})


def _build(name: str, cls, d) -> object:
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    bad = sorted(set(d) - known)
    if bad:
        raise ConfigError(f"unknown key(s) in {name!r}: {bad}")
    kw = dict(d)
    # JSON has no tuples; the dataclasses expect them for these fields
    for key in ("priors", "t_rate", "t_radius_um", "m_radius_um", "cluster_radius_um", "texture_sigma",
                "texture_contrast"):
        if key in kw and cls is SynthConfig and isinstance(kw[key], list):
            kw[key] = tuple(tuple(v) if isinstance(v, list) else v for v in kw[key])
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    bad = sorted(set(d) - set(SECTIONS))
    if bad:
        raise ConfigError(f"unknown section(s): {bad}; allowed: {sorted(SECTIONS)}")
    return RunConfig(**{k: _build(k, SECTIONS[k], d.get(k, {})) for k in SECTIONS})


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return from_dict(d)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def defaults_table() -> list[tuple[str, str, object]]:
    """(section, key, default) rows for documentation."""
    d = RunConfig().to_dict()
    return [(s, k, v) for s in SECTIONS for k, v in d[s].items()]
