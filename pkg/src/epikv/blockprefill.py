"""Bounded prefill: encode the context block by block and evict back to budget after each block."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np

from .clustering import Embedder, embed_all
from .dialogue import DEFAULT_VOCAB, ConversationHistory, render_utterances
from .kvcache import EpisodicCache, LayerCache, OccupancyLog, count_entries, empty_caches, evict_to_budget
from .numerics import cosine_rows
from .scoring import (
    STREAMING_SINK,
    Aggregation,
    PatchedPrompt,
    PromptOrigin,
    ScorerKind,
    infinipot_prompt,
    keydiff_scores,
    kvzip_prompt,
    score_with_prompt,
    snapkv_prompt,
    streaming_scores,
)
from .toymodel import Model

if TYPE_CHECKING:
    from .allocation import BudgetAllocation

PromptProvider = Callable[[int, np.ndarray], PatchedPrompt]


class PrefillConfigError(ValueError):
    pass


class BoundViolationError(RuntimeError):
    pass


@dataclass
class BlockPrefillConfig:
    budget: int  # M, entries per kv-head
    block_size: int  # M_block
    scorer: ScorerKind = ScorerKind.PATCHED
    agg: Aggregation = "max"
    allocation: Optional["BudgetAllocation"] = None
    prompt: Optional[PatchedPrompt] = None  # fixed prompt for the patched scorer
    prompt_provider: Optional[PromptProvider] = None  # (episode_id, block tokens) -> prompt
    sink: int = STREAMING_SINK  # streaming only; clamped to each layer's budget
    vocab: int = DEFAULT_VOCAB

    def __post_init__(self):
        self.scorer = ScorerKind(self.scorer)
        if self.budget < 1:
            raise PrefillConfigError("budget M must be >= 1")
        if self.block_size < 1:
            raise PrefillConfigError("block_size M_block must be >= 1")
        if self.agg not in ("avg", "max"):
            raise PrefillConfigError(f"unknown aggregation {self.agg!r}")
        if self.sink < 0:
            raise PrefillConfigError("sink must be >= 0")

    def layer_budgets(self, n_layers: int) -> list[int]:
        if self.allocation is None:
            return [self.budget] * n_layers
        budgets = list(self.allocation.budgets)
        if len(budgets) != n_layers:
            raise PrefillConfigError(f"allocation has {len(budgets)} layers, model has {n_layers}")
        if sum(budgets) != n_layers * self.budget:
            raise PrefillConfigError(f"allocation sums to {sum(budgets)}, expected L*M = {n_layers * self.budget}")
        return budgets

    def prompt_for(self, episode_id: int, block: np.ndarray) -> Optional[PatchedPrompt]:
        if self.prompt_provider is not None:
            return self.prompt_provider(episode_id, block)
        if self.scorer is ScorerKind.PATCHED:
            if self.prompt is None:
                raise PrefillConfigError("patched scorer needs a prompt or prompt_provider")
            return self.prompt
        if self.scorer is ScorerKind.SNAPKV:
            return snapkv_prompt(block)
        if self.scorer is ScorerKind.KVZIP:
            return kvzip_prompt(block, self.vocab)
        if self.scorer is ScorerKind.INFINIPOT:
            return infinipot_prompt(self.vocab)
        return None


@dataclass
class PrefillReport:
    cache: EpisodicCache
    occupancy: OccupancyLog
    blocks_processed: int
    evictions_per_block: list[int]
    budgets: list[int]
    block_size: int
    n_kv_heads: int
    prompt_lengths: list[int] = field(default_factory=list)

    def peak_per_layer(self) -> list[int]:
        return self.occupancy.peak_per_layer(len(self.budgets))

    def bound_per_layer(self) -> list[int]:
        return [self.n_kv_heads * (m + self.block_size) for m in self.budgets]

    def violations(self) -> list[tuple[int, int, int]]:
        """(step, layer, entries) samples over the per-layer bound."""
        bound = self.bound_per_layer()
        return [(s.step, s.layer, s.entries) for s in self.occupancy.samples if s.entries > bound[s.layer]]

    def assert_bounded(self) -> None:
        bad = self.violations()
        if bad:
            raise BoundViolationError(f"{len(bad)} occupancy samples exceed H_kv*(M_l+M_block): {bad[:5]}")

    def to_json(self) -> dict:
        return {
            "episode_id": self.cache.episode_id,
            "blocks_processed": self.blocks_processed,
            "block_size": self.block_size,
            "budgets": self.budgets,
            "bound_per_layer": self.bound_per_layer(),
            "peak_per_layer": self.peak_per_layer(),
            "final_entries": self.cache.entry_counts(),
            "evictions_per_block": self.evictions_per_block,
            "occupancy": [dataclasses.asdict(s) for s in self.occupancy.samples],
            "retained": [[sorted(s) for s in layer] for layer in self.cache.retained_sets()],
        }


def _score_block(model: Model, caches: list[LayerCache], config: BlockPrefillConfig, prompt, prompt_start: int):
    cfg = model.config
    if config.scorer is ScorerKind.STREAMING:
        return streaming_scores(caches)
    if config.scorer is ScorerKind.KEYDIFF:
        return keydiff_scores(caches)
    positions = np.arange(prompt_start, prompt_start + len(prompt))
    # read-only against the cache: the prompt's own K/V are dropped with the trace
    trace = model.forward(np.asarray(prompt.tokens), past_cache=caches, positions=positions, need_hidden=False)
    return score_with_prompt(trace, cfg.group_size, config.agg)


def block_prefill(
    model: Model,
    tokens: Sequence[int] | np.ndarray,
    config: BlockPrefillConfig,
    episode_id: int = 0,
    positions: Optional[Sequence[int] | np.ndarray] = None,
) -> PrefillReport:
    """Prefill ``tokens`` in blocks of ``config.block_size`` under the layer budgets.

    Per block: forward against the resident cache, append, score with the
    scorer (forwarding the patched prompt read-only if it uses one), evict
    every layer to its budget. Occupancy is sampled after each append and
    each eviction. ``positions`` lets callers feed non-contiguous positions.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise PrefillConfigError("empty context")
    if positions is None:
        positions = np.arange(tokens.size, dtype=np.int64)
    else:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != tokens.shape:
            raise PrefillConfigError("positions must match tokens")
    budgets = config.layer_budgets(cfg.n_layers)
    caches = empty_caches(cfg.n_layers, cfg.n_kv_heads, cfg.d_head, budgets)
    log = OccupancyLog()
    evictions: list[int] = []
    prompt_lengths: list[int] = []
    n_blocks = math.ceil(tokens.size / config.block_size)
    for b in range(n_blocks):
        sl = slice(b * config.block_size, (b + 1) * config.block_size)
        block, block_pos = tokens[sl], positions[sl]
        trace = model.forward(block, past_cache=caches, positions=block_pos, need_weights=False, need_hidden=False)
        caches = [c.append(trace.positions, k, v) for c, k, v in zip(caches, trace.keys, trace.values)]
        before = count_entries(caches)[1]
        prompt_resident = [0] * cfg.n_layers
        if any(c.entries > c.capacity for c in caches):
            prompt = config.prompt_for(episode_id, block) if config.scorer.uses_prompt else None
            if prompt is not None:
                prompt_resident = [cfg.n_kv_heads * len(prompt)] * cfg.n_layers
                prompt_lengths.append(len(prompt))
            score_map = _score_block(model, caches, config, prompt, int(block_pos[-1]) + 1)
            log.record(caches, "append", prompt_resident)
            new_caches = []
            for layer, cache in enumerate(caches):
                pins = ()
                if config.scorer is ScorerKind.STREAMING:
                    sink = min(config.sink, cache.budget)
                    pins = range(sink)
                new_caches.append(evict_to_budget(cache, score_map.scores[layer], pins))
            caches = new_caches
        else:
            log.record(caches, "append", prompt_resident)
        evictions.append(before - count_entries(caches)[1])
        log.record(caches, "evict")
    provenance = {
        "scorer": config.scorer.value,
        "agg": config.agg,
        "budget": config.budget,
        "block_size": config.block_size,
        "layer_budgets": budgets,
        "context_length": int(tokens.size),
        "next_position": int(positions[-1]) + 1,
    }
    return PrefillReport(
        cache=EpisodicCache(episode_id, caches, provenance),
        occupancy=log,
        blocks_processed=n_blocks,
        evictions_per_block=evictions,
        budgets=budgets,
        block_size=config.block_size,
        n_kv_heads=cfg.n_kv_heads,
        prompt_lengths=prompt_lengths,
    )


def exact_question_prefill(
    model: Model,
    context: Sequence[int] | np.ndarray,
    config: BlockPrefillConfig,
    query_tokens: Sequence[int],
    episode_id: int = 0,
) -> PrefillReport:
    """Oracle run that uses the true future query as every block's patched prompt."""
    query = tuple(int(t) for t in query_tokens)
    if not query:
        raise PrefillConfigError("exact-question prefill needs a non-empty query")
    prompt = PatchedPrompt(query, PromptOrigin.EXACT_QUESTION)
    oracle_cfg = dataclasses.replace(
        config, scorer=ScorerKind.PATCHED, prompt=prompt, prompt_provider=None
    )
    return block_prefill(model, context, oracle_cfg, episode_id)


def utterance_similarities(history: ConversationHistory, query: str, embedder: Embedder) -> np.ndarray:
    embs = embed_all(embedder, [u.text for u in history.utterances])
    q = embed_all(embedder, [query])[0]
    sims = cosine_rows(embs, np.broadcast_to(q, embs.shape))
    return np.where(np.isnan(sims), 0.0, sims)


def similarity_ranked_prompt(
    history: ConversationHistory,
    query: str,
    embedder: Embedder,
    fraction: float,
    which: str = "top",
    vocab: int = DEFAULT_VOCAB,
) -> PatchedPrompt:
    """Prompt made of the ceil(fraction * N_u) utterances most (or least) similar to ``query``.

    Selected utterances are concatenated in conversation order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if which not in ("top", "bottom"):
        raise ValueError("which must be 'top' or 'bottom'")
    sims = utterance_similarities(history, query, embedder)
    # stable sorts: lower turn index wins ties at either end
    order = np.argsort(-sims if which == "top" else sims, kind="stable")
    count = max(1, math.ceil(fraction * len(history) - 1e-9))
    picked = order[:count]
    utts = [history.utterances[i] for i in sorted(picked.tolist())]
    rendered = render_utterances(utts, vocab)
    return PatchedPrompt(tuple(rendered.tokens.tolist()), PromptOrigin.SIMILARITY_RANKED)
