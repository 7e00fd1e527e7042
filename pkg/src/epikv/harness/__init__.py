"""Experiment harness: configuration, synthetic corpora, embedding client, runner and CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .corpus import synth_corpus
from .embed_client import EmbeddingError, ExternalEmbedder
from .metrics import MetricsReport, jaccard, overlap_vs_oracle
from .runner import run

__all__ = [
    "ConfigError",
    "EmbeddingError",
    "ExperimentConfig",
    "ExternalEmbedder",
    "MetricsReport",
    "jaccard",
    "load_config",
    "overlap_vs_oracle",
    "run",
    "synth_corpus",
]
