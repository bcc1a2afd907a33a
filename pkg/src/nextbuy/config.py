"""YAML run configuration shared by the CLI and the API server."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .autoencoder import AeTrainConfig
from .datamodel import SyntheticConfig
from .errors import ConfigError
from .evaluation import K_DEFAULT
from .seqmodel import SeqTrainConfig
from .serving.pipeline import PipelineConfig

SECTIONS = ("seed", "synthetic", "autoencoder", "seqnbt", "pipeline", "evaluation")


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    autoencoder: AeTrainConfig = field(default_factory=AeTrainConfig)
    seqnbt: SeqTrainConfig = field(default_factory=SeqTrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    K_values: tuple[int, ...] = K_DEFAULT
    L_values: tuple[int, ...] = (3, 5, 7, 10)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same configuration with every random stream derived from ``seed``."""
        return RunConfig(
            SyntheticConfig(**{**self.synthetic.__dict__, "seed": seed}),
            AeTrainConfig(**{**self.autoencoder.__dict__, "seed": seed}),
            SeqTrainConfig(**{**self.seqnbt.__dict__, "seed": seed}),
            self.pipeline,
            self.K_values,
            self.L_values,
        )


def _build(cls, data: Any, section: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls.from_mapping(data) if hasattr(cls, "from_mapping") else cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section!r} settings: {exc}") from None


def parse_config(data: Mapping | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    ev = data.get("evaluation") or {}
    cfg = RunConfig(
        _build(SyntheticConfig, data.get("synthetic"), "synthetic"),
        _build(AeTrainConfig, data.get("autoencoder"), "autoencoder"),
        _build(SeqTrainConfig, data.get("seqnbt"), "seqnbt"),
        _build(PipelineConfig, data.get("pipeline"), "pipeline"),
        tuple(int(k) for k in ev.get("K_values", K_DEFAULT)),
        tuple(int(v) for v in ev.get("L_values", (3, 5, 7, 10))),
    )
    if "seed" in data:
        cfg = cfg.with_seed(int(data["seed"]))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError("config file must contain a mapping")
    return parse_config(data)
