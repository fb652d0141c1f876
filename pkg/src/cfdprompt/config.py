"""Run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

# Fields that change neither requests nor results; kept out of the digest.
_UNDIGESTED = {"parallelism", "record_workers", "cache_dir", "api_base", "fail_fast"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    num_cots: int = 30              # M, CoTs sampled with the original knowledge
    num_clusters: int = 5           # N
    num_entities: int = 5           # T
    cots_per_variant: int = 5       # P
    similarity_threshold: float = 0.8   # s
    infonce_temperature: float = 0.07   # τ, diagnostics only
    cot_temperature: float = 0.7
    extraction_temperature: float = 0.0
    max_tokens: int = 512
    parallelism: int = 4
    record_workers: int = 1
    retries: int = 3
    backoff: float = 1.0
    backoff_factor: float = 2.0
    seed: int = 0
    template_version: int = 1
    api_base: str | None = None
    chat_model: str = "gpt-3.5-turbo"
    embedding_model: str | None = None
    cache_dir: str | None = None
    fail_fast: bool = False

    def __post_init__(self):
        if not self.num_cots >= self.num_clusters >= 1:
            raise ConfigError("need num_cots >= num_clusters >= 1")
        if self.num_entities < 2:
            raise ConfigError("num_entities must be at least 2")
        if self.cots_per_variant < 1:
            raise ConfigError("cots_per_variant must be at least 1")
        if not -1.0 < self.similarity_threshold < 1.0:
            raise ConfigError("similarity_threshold must lie in (-1, 1)")
        if self.parallelism < 1 or self.record_workers < 1:
            raise ConfigError("parallelism and record_workers must be at least 1")
        if self.infonce_temperature <= 0:
            raise ConfigError("infonce_temperature must be positive")

    def digest(self) -> str:
        payload = {k: v for k, v in dataclasses.asdict(self).items() if k not in _UNDIGESTED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None = None, env: Mapping[str, str] | None = None) -> "PipelineConfig":
        """Read a JSON config, then apply ``CFD_*`` environment overrides."""
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        env = os.environ if env is None else env
        for key, field_name in (("CFD_API_BASE", "api_base"), ("CFD_CHAT_MODEL", "chat_model"),
                                ("CFD_EMBED_MODEL", "embedding_model")):
            if env.get(key):
                data[field_name] = env[key]
        return cls.from_mapping(data)
