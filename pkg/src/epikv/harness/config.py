"""Experiment configuration: JSON or ``key = value`` files plus CLI overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from ..scoring import ScorerKind

EMBED_URL_ENV = "EPIKV_EMBED_URL"
STANDARD_BLOCK_SIZES = (128, 512, 1024, 2048)  # block sizes the sweeps use


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    n_layers: int = 4
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    vocab: int = 4096
    model_seed: int = 7
    # cache
    m: int = 64
    m_block: int = 128
    episodes: int = 4
    alpha: Optional[float] = 1.1  # None -> uniform per-layer budgets
    w_embed: int = 4
    prompt_window: int = 8
    scorer: str = "patched"
    agg: str = "max"
    # embedding: "builtin" or an http(s) URL of an /embed endpoint
    embedder: str = "builtin"
    embed_dim: int = 256
    # seeds
    corpus_seed: int = 1
    cluster_seed: int = 0
    calibration_seed: int = 0
    # data: a JSONL conversation, or a synthetic one when empty
    corpus: str = ""
    topics: int = 4
    turns_per_topic: int = 30
    queries_per_topic: int = 10
    interleave_queries: bool = False
    profile: str = ""  # stored sensitivity.json to reuse
    # outputs
    output_dir: str = "epikv-out"
    max_new: int = 10
    overlap_queries: int = 4  # queries scored against the exact-question oracle

    def __post_init__(self):
        positive = ("n_layers", "n_q_heads", "n_kv_heads", "d_head", "vocab", "m", "m_block", "episodes",
                    "w_embed", "prompt_window", "embed_dim", "topics", "turns_per_topic", "queries_per_topic")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("max_new", "overlap_queries", "model_seed", "corpus_seed", "cluster_seed", "calibration_seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
        if self.alpha is not None and (not isinstance(self.alpha, (int, float)) or self.alpha < 0):
            raise ConfigError(f"alpha must be >= 0 or null, got {self.alpha!r}")
        try:
            ScorerKind(self.scorer)
        except ValueError:
            choices = ", ".join(k.value for k in ScorerKind)
            raise ConfigError(f"unknown scorer {self.scorer!r} (choose from {choices})") from None
        if self.agg not in ("avg", "max"):
            raise ConfigError(f"agg must be 'avg' or 'max', got {self.agg!r}")
        if self.embedder != "builtin" and not self.embedder.startswith(("http://", "https://")):
            raise ConfigError(f"embedder must be 'builtin' or an http(s) URL, got {self.embedder!r}")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)
        if isinstance(values.get("alpha"), str) and values["alpha"].lower() in ("none", "null", "uniform"):
            values["alpha"] = None
        return cls(**values)

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        changes = {k: v for k, v in overrides.items() if v is not None}
        return self.from_mapping({**self.as_dict(), **changes})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_embedder(self) -> str:
        return os.environ.get(EMBED_URL_ENV) or self.embedder

    def check_paths(self) -> None:
        for name in ("corpus", "profile"):
            value = getattr(self, name)
            if value and not Path(value).is_file():
                raise ConfigError(f"{name} file not found: {value}")


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    data = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        data[key.replace("-", "_")] = _parse_scalar(value)
    return data


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return ExperimentConfig.from_mapping(parse_config_text(path.read_text()))
