"""Episodic KV-cache management for long conversational question answering.

A conversation is split into segments, clustered into episodes and prefilled
block by block into one bounded cache per episode. At query time each query is
routed to the closest episode and answered from that cache alone.
"""

from .allocation import BudgetAllocation, SensitivityProfile, allocate, measure_sensitivity
from .blockprefill import BlockPrefillConfig, BoundViolationError, PrefillReport, block_prefill
from .clustering import EpisodeModel, HashEmbedder, cluster_history
from .dialogue import ConversationHistory, Query, QuerySet, parse_conversation
from .episodic import BuildConfig, EpisodicCacheSet, build, build_baseline, serve
from .kvcache import EpisodicCache
from .scoring import ScorerKind
from .toymodel import Model, ModelConfig, init_model

__all__ = [
    "BlockPrefillConfig",
    "BoundViolationError",
    "BudgetAllocation",
    "BuildConfig",
    "ConversationHistory",
    "EpisodeModel",
    "EpisodicCache",
    "EpisodicCacheSet",
    "HashEmbedder",
    "Model",
    "ModelConfig",
    "PrefillReport",
    "Query",
    "QuerySet",
    "ScorerKind",
    "SensitivityProfile",
    "allocate",
    "block_prefill",
    "build",
    "build_baseline",
    "cluster_history",
    "init_model",
    "measure_sensitivity",
    "parse_conversation",
    "serve",
]
