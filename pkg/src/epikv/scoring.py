"""Token-importance scorers.

Attention scorers aggregate the weights that a patched prompt's tokens put
on each resident context token (mean or max over prompt rows), then reduce
the query heads of a group onto their kv-head by max. The remaining
scorers are static retention (sink + recent) and key-anchor dissimilarity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .dialogue import DEFAULT_VOCAB, tokenize
from .kvcache import LayerCache
from .numerics import cosine_rows
from .toymodel import ForwardTrace

Aggregation = Literal["avg", "max"]

SNAPKV_WINDOW = 64
STREAMING_SINK = 128
KVZIP_INSTRUCTION = "Repeat the part of the previous context exactly"
INFINIPOT_INSTRUCTION = "Summarize the previous context highlighting the most important parts."


class ScorerKind(str, enum.Enum):
    PATCHED = "patched"
    STREAMING = "streaming"
    SNAPKV = "snapkv"
    KVZIP = "kvzip"
    INFINIPOT = "infinipot"
    KEYDIFF = "keydiff"

    @property
    def uses_prompt(self) -> bool:
        return self not in (ScorerKind.STREAMING, ScorerKind.KEYDIFF)


class PromptOrigin(str, enum.Enum):
    MEDOID = "medoid"
    EXACT_QUESTION = "exact_question"
    SIMILARITY_RANKED = "similarity_ranked"
    SNAPKV_WINDOW = "snapkv_window"
    KVZIP_REPEAT = "kvzip_repeat"
    INFINIPOT_GENERIC = "infinipot_generic"


@dataclass(frozen=True)
class PatchedPrompt:
    tokens: tuple[int, ...]
    origin: PromptOrigin

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("a patched prompt needs at least one token")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TokenScoreMap:
    """``scores[l][h]`` is aligned with ``positions[l][h]`` (the live cache positions)."""

    positions: list[list[np.ndarray]]
    scores: list[list[np.ndarray]]

    def as_dict(self, layer: int, head: int) -> dict[int, float]:
        return dict(zip(self.positions[layer][head].tolist(), self.scores[layer][head].tolist()))


def aggregate_prompt_rows(grid: np.ndarray, agg: Aggregation = "max") -> np.ndarray:
    """Collapse a (p, n) prompt -> context weight grid into one score per context token."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D weight grid, got shape {grid.shape}")
    if grid.shape[0] == 0:
        raise ValueError("empty prompt: no rows to aggregate")
    if agg == "avg":
        return grid.mean(axis=0)
    if agg == "max":
        return grid.max(axis=0)
    raise ValueError(f"unknown aggregation {agg!r}")


def score_grids(
    grids: Sequence[Sequence[np.ndarray]],
    positions: Sequence[Sequence[np.ndarray]],
    group_size: int,
    agg: Aggregation = "max",
) -> TokenScoreMap:
    """Score context tokens from per-(layer, query-head) grids.

    ``grids[l][h]`` has one column per entry of ``positions[l][h // group_size]``.
    """
    out_pos, out_scores = [], []
    for layer_grids, layer_pos in zip(grids, positions):
        if len(layer_grids) != group_size * len(layer_pos):
            raise ValueError("grid count does not match kv-heads x group size")
        head_scores = []
        for g, pos in enumerate(layer_pos):
            group = []
            for grid in layer_grids[g * group_size:(g + 1) * group_size]:
                if np.shape(grid)[-1] != pos.size:
                    raise ValueError(f"grid has {np.shape(grid)[-1]} columns for {pos.size} positions")
                group.append(aggregate_prompt_rows(grid, agg))
            head_scores.append(np.max(group, axis=0) if pos.size else np.zeros(0))
        out_pos.append([np.asarray(p) for p in layer_pos])
        out_scores.append(head_scores)
    return TokenScoreMap(out_pos, out_scores)


def score_with_prompt(trace: ForwardTrace, group_size: int, agg: Aggregation = "max") -> TokenScoreMap:
    """Scores from a prompt forward run against the resident cache.

    Only the resident (context) columns are scored; the prompt's own
    columns are dropped.
    """
    if trace.attention is None:
        raise ValueError("trace was computed without attention weights")
    grids, positions = [], []
    for layer, layer_attn in enumerate(trace.attention):
        n_past = trace.n_past[layer]
        grids.append([grid[:, :n_past[h // group_size]] for h, grid in enumerate(layer_attn)])
        positions.append([ctx[:n] for ctx, n in zip(trace.context_positions[layer], n_past)])
    return score_grids(grids, positions, group_size, agg)


def streaming_retention(n: int, budget: int, sink: int = STREAMING_SINK) -> frozenset[int]:
    """First ``sink`` positions plus the most recent ``budget - sink``."""
    if sink > budget:
        raise ValueError(f"sink={sink} exceeds budget={budget}")
    if n <= budget:
        return frozenset(range(n))
    return frozenset(range(sink)) | frozenset(range(n - (budget - sink), n))


def streaming_scores(caches: Sequence[LayerCache]) -> TokenScoreMap:
    """Recency scores (the position itself); sinks are handled by pinning."""
    positions = [[p for p in c.positions] for c in caches]
    return TokenScoreMap(positions, [[p.astype(np.float64) for p in layer] for layer in positions])


def snapkv_prompt(block_tokens: Sequence[int], window: int = SNAPKV_WINDOW) -> PatchedPrompt:
    block = list(block_tokens)
    if not block:
        raise ValueError("empty block")
    return PatchedPrompt(tuple(block[-window:]), PromptOrigin.SNAPKV_WINDOW)


def kvzip_prompt(block_tokens: Sequence[int], vocab: int = DEFAULT_VOCAB) -> PatchedPrompt:
    block = list(block_tokens)
    if not block:
        raise ValueError("empty block")
    return PatchedPrompt(tuple(tokenize(KVZIP_INSTRUCTION, vocab)) + tuple(block), PromptOrigin.KVZIP_REPEAT)


def infinipot_prompt(vocab: int = DEFAULT_VOCAB) -> PatchedPrompt:
    return PatchedPrompt(tuple(tokenize(INFINIPOT_INSTRUCTION, vocab)), PromptOrigin.INFINIPOT_GENERIC)


def keydiff_head_scores(keys: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Negative cosine of each key to the mean key; 0 where the anchor (or key) vanishes."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        return np.zeros(0)
    anchor = keys.mean(axis=0)
    scale = max(float(np.linalg.norm(keys, axis=1).max()), 1.0)
    if np.linalg.norm(anchor) <= eps * scale:
        return np.zeros(keys.shape[0])
    cos = cosine_rows(keys, np.broadcast_to(anchor, keys.shape))
    return np.where(np.isnan(cos), 0.0, -cos)


def keydiff_scores(caches: Sequence[LayerCache]) -> TokenScoreMap:
    positions = [[p for p in c.positions] for c in caches]
    scores = [[keydiff_head_scores(k) for k in c.keys] for c in caches]
    return TokenScoreMap(positions, scores)
