"""Pipeline configuration and its file/environment loading."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from anyword.embedopt import OptimizerConfig
from anyword.evalharness import StabilityThresholds

ENV_URI = "ANYWORD_BACKEND_URI"


@dataclass(frozen=True)
class PipelineConfig:
    denoiser: str = "toy"  # "toy" or tcp://host:port
    segmentor: str = "mock"  # "mock" or tcp://host:port
    parser: str = "builtin"
    encoder: str = "toy"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule_steps: int = 50
    threshold: float = 0.7
    normalization: str = "minmax"
    seed: int = 0
    use_pl: bool = True
    use_r1: bool = True
    use_r2: bool = True
    use_segmentor: bool = True
    fresh_negatives: bool = False
    segment_predicates: bool = False
    segmentor_select: str = "score"
    mock_tolerance: float = 0.05
    fast: bool = False
    adapter: str | None = None
    cache_dir: str | None = None
    workers: int = 1
    open_vocab_template: str = "a photo of {labels}"
    stability: StabilityThresholds = field(default_factory=StabilityThresholds)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.normalization not in ("raw", "minmax"):
            raise ValueError("normalization must be 'raw' or 'minmax'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def effective_steps(self, adapter_installed: bool = False) -> int:
        if not self.use_pl:
            return 0
        if self.fast or adapter_installed:
            return self.optimizer.fast_steps
        return self.optimizer.steps

    def replace(self, **changes) -> PipelineConfig:
        opt = {k[4:]: changes.pop(k) for k in list(changes) if k.startswith("opt_")}
        cfg = dataclasses.replace(self, **changes)
        if opt:
            cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, **opt))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PipelineConfig:
        data = dict(data)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(data.get("optimizer"), Mapping):
            data["optimizer"] = OptimizerConfig(**data["optimizer"])
        if isinstance(data.get("stability"), Mapping):
            data["stability"] = StabilityThresholds(**data["stability"])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_env(self, env: Mapping[str, str] | None = None) -> PipelineConfig:
        """Apply ``ANYWORD_BACKEND_URI``.

        A bare URI replaces the denoiser endpoint; ``denoiser=URI,segmentor=URI``
        sets either or both.
        """
        env = os.environ if env is None else env
        raw = env.get(ENV_URI, "").strip()
        if not raw:
            return self
        if "=" not in raw:
            return dataclasses.replace(self, denoiser=raw)
        changes = {}
        for part in raw.split(","):
            key, _, uri = part.partition("=")
            key = key.strip()
            if key not in ("denoiser", "segmentor"):
                raise ValueError(f"{ENV_URI}: unknown backend {key!r}")
            changes[key] = uri.strip()
        return dataclasses.replace(self, **changes)
