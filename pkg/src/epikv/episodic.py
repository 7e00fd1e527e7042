"""Episodic cache pipeline.

Offline, the history is clustered into episodes and compressed once per
episode, with that episode's medoid utterances as the patched prompt; every
cache goes to an on-disk store. Online, each query is embedded, matched to
the nearest centroid, and answered from that episode's cache, which is
loaded only when the match changes.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .allocation import BudgetAllocation, SensitivityProfile, allocate, calibration_tokens, measure_sensitivity
from .blockprefill import BlockPrefillConfig, PrefillReport, block_prefill
from .clustering import (
    DEFAULT_PROMPT_WINDOW,
    DEFAULT_WINDOW,
    Embedder,
    EpisodeModel,
    cluster_history,
    embed_all,
    segment_history,
)
from .dialogue import DEFAULT_VOCAB, ConversationHistory, render_history_tokens, separator_token, tokenize
from .kvcache import EpisodicCache, UnknownEpisodeError, episode_filename, load, persist, read_manifest, write_manifest
from .numerics import cosine_rows
from .scoring import STREAMING_SINK, Aggregation, ScorerKind
from .toymodel import Model, greedy_decode

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BuildConfig:
    block_size: int = 128
    agg: Aggregation = "max"
    w_embed: int = DEFAULT_WINDOW
    prompt_window: int = DEFAULT_PROMPT_WINDOW
    cluster_seed: int = 0
    calibration_seed: int = 0
    calibration_length: Optional[int] = None  # defaults to 4 * M
    calibration_sink: int = STREAMING_SINK
    profile: Optional[SensitivityProfile] = None  # reuse a stored profile instead of measuring
    vocab: int = DEFAULT_VOCAB
    parallel: bool = False  # prefill all episodes at once; holds E caches in memory instead of one


def calibration_sink(budget: int, sink: int = STREAMING_SINK) -> int:
    """Sink count for the calibration mask, kept below the budget so a recent window remains."""
    return min(sink, budget // 2)


def budget_allocation(
    model: Model,
    budget: int,
    alpha: Optional[float],
    config: BuildConfig = BuildConfig(),
) -> tuple[BudgetAllocation, Optional[SensitivityProfile]]:
    """Layer budgets for a run: uniform when ``alpha`` is None, otherwise sensitivity-driven."""
    n_layers = model.config.n_layers
    if alpha is None:
        return BudgetAllocation.uniform(n_layers, budget), None
    profile = config.profile
    if profile is None:
        length = config.calibration_length or 4 * budget
        tokens = calibration_tokens(max(length, 2), config.calibration_seed, config.vocab)
        sink = calibration_sink(budget, config.calibration_sink)
        profile = measure_sensitivity(model, tokens, budget, sink, input_id=f"synthetic:{config.calibration_seed}:{length}")
    if profile.n_layers != n_layers:
        raise ValueError(f"profile has {profile.n_layers} layers, model has {n_layers}")
    return allocate(profile, budget, alpha), profile


@dataclass
class RouteRecord:
    turn: int
    episode: int
    switched: bool
    load_bytes: int


@dataclass
class SessionState:
    """Per-conversation residency: at most one episode cache is held at a time."""

    resident_id: Optional[int] = None
    resident: Optional[EpisodicCache] = None
    switches: int = 0
    loads: int = 0
    load_bytes: int = 0
    log: list[RouteRecord] = field(default_factory=list)

    @property
    def turns(self) -> int:
        return len(self.log)

    def switch_series(self) -> list[int]:
        """Cumulative switch count after each served turn."""
        total, out = 0, []
        for rec in self.log:
            total += rec.switched
            out.append(total)
        return out


@dataclass
class Answer:
    tokens: list[int]
    episode: int
    switched: bool
    load_bytes: int


@dataclass
class EpisodicCacheSet:
    model: Model
    store: Path
    episode_ids: tuple[int, ...]
    centroids: np.ndarray  # (E, d)
    allocation: BudgetAllocation
    embedder: Embedder
    next_position: int  # first position after the history
    manifest: dict
    episode_model: Optional[EpisodeModel] = None  # present right after a build
    reports: list[PrefillReport] = field(default_factory=list)
    profile: Optional[SensitivityProfile] = None

    @property
    def n_episodes(self) -> int:
        return len(self.episode_ids)

    @classmethod
    def open(cls, store: str | Path, model: Model, embedder: Embedder) -> "EpisodicCacheSet":
        """Reattach to a persisted store via its manifest."""
        store = Path(store)
        manifest = read_manifest(store)
        if manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {manifest.get('version')!r}")
        episodes = manifest["episodes"]
        centroids = np.array([ep["centroid"] for ep in episodes], dtype=np.float64)
        if centroids.shape[1] != embedder.dim:
            raise ValueError(f"store centroids have dim {centroids.shape[1]}, embedder has {embedder.dim}")
        return cls(
            model=model,
            store=store,
            episode_ids=tuple(int(ep["id"]) for ep in episodes),
            centroids=centroids,
            allocation=BudgetAllocation.from_json(manifest["allocation"]),
            embedder=embedder,
            next_position=int(manifest["next_position"]),
            manifest=manifest,
        )

    def match(self, query: str) -> int:
        """Episode whose centroid is most cosine-similar to the query; lowest id on ties."""
        q = embed_all(self.embedder, [query])[0]
        sims = cosine_rows(self.centroids, np.broadcast_to(q, self.centroids.shape))
        sims = np.where(np.isnan(sims), -np.inf, sims)
        return self.episode_ids[int(np.argmax(sims))]

    def load(self, episode_id: int) -> EpisodicCache:
        if episode_id not in self.episode_ids:
            raise UnknownEpisodeError(f"episode {episode_id} is not part of this set")
        return load(self.store, episode_id)

    def file_size(self, episode_id: int) -> int:
        return (self.store / episode_filename(episode_id)).stat().st_size


def _episode_prefill_config(
    budget: int, allocation: Optional[BudgetAllocation], config: BuildConfig, prompt
) -> BlockPrefillConfig:
    return BlockPrefillConfig(
        budget=budget,
        block_size=config.block_size,
        scorer=ScorerKind.PATCHED,
        agg=config.agg,
        allocation=allocation,
        prompt=prompt,
        vocab=config.vocab,
    )


def build(
    model: Model,
    history: ConversationHistory,
    n_episodes: int,
    budget: int,
    alpha: Optional[float],
    store: str | Path,
    embedder: Embedder,
    config: BuildConfig = BuildConfig(),
) -> EpisodicCacheSet:
    """Cluster, allocate, then compress and persist one cache per episode.

    Episodes are prefilled one after another, so only one cache is under
    construction at a time, unless ``config.parallel`` is set.
    """
    store = Path(store)
    episodes = cluster_history(
        history, n_episodes, embedder, config.w_embed, config.prompt_window, config.cluster_seed, config.vocab
    )
    allocation, profile = budget_allocation(model, budget, alpha, config)
    tokens = render_history_tokens(history, config.vocab).tokens

    def prefill(ep):
        cfg = _episode_prefill_config(budget, allocation, config, ep.prompt)
        return block_prefill(model, tokens, cfg, episode_id=ep.episode_id)

    if config.parallel:
        with ThreadPoolExecutor(max_workers=len(episodes.episodes)) as pool:
            built = list(pool.map(prefill, episodes.episodes))
    else:
        built = map(prefill, episodes.episodes)  # lazy: one episode under construction at a time
    reports, records = [], []
    for ep, report in zip(episodes.episodes, built):
        report.assert_bounded()
        size = persist(report.cache, store)
        log.info("episode %d: %d entries, %d bytes", ep.episode_id, sum(report.cache.entry_counts()), size)
        reports.append(report)
        records.append(
            {
                "id": ep.episode_id,
                "centroid": ep.centroid.tolist(),
                "members": list(ep.members),
                "medoid_segment": ep.medoid_segment,
                "medoid_turns": list(ep.prompt_turns),
                "prompt_text": ep.prompt_text,
                "prompt_tokens": len(ep.prompt),
                "entries": report.cache.entry_counts(),
                "bytes": size,
            }
        )
    return _finish_store(model, store, records, reports, allocation, profile, embedder, budget, config, tokens.size, episodes)


def build_baseline(
    model: Model,
    history: ConversationHistory,
    budget: int,
    alpha: Optional[float],
    store: str | Path,
    embedder: Embedder,
    scorer: ScorerKind | str,
    config: BuildConfig = BuildConfig(),
) -> EpisodicCacheSet:
    """One shared cache compressed with a non-episodic scorer, stored as episode 1.

    Its centroid is the mean of all segment embeddings, so every query
    routes to it.
    """
    scorer = ScorerKind(scorer)
    store = Path(store)
    allocation, profile = budget_allocation(model, budget, alpha, config)
    tokens = render_history_tokens(history, config.vocab).tokens
    cfg = BlockPrefillConfig(
        budget=budget, block_size=config.block_size, scorer=scorer, agg=config.agg, allocation=allocation, vocab=config.vocab
    )
    report = block_prefill(model, tokens, cfg, episode_id=1)
    report.assert_bounded()
    size = persist(report.cache, store)
    segments = segment_history(history, config.w_embed)
    centroid = embed_all(embedder, [s.text for s in segments]).mean(axis=0)
    record = {
        "id": 1,
        "centroid": centroid.tolist(),
        "members": [s.index for s in segments],
        "medoid_segment": None,
        "medoid_turns": None,
        "prompt_text": None,
        "prompt_tokens": 0,
        "entries": report.cache.entry_counts(),
        "bytes": size,
    }
    return _finish_store(model, store, [record], [report], allocation, profile, embedder, budget, config, tokens.size, None)


def _finish_store(model, store, records, reports, allocation, profile, embedder, budget, config, n_tokens, episodes):
    next_position = int(n_tokens)
    manifest = {
        "version": MANIFEST_VERSION,
        "episodes": records,
        "scorer": reports[0].cache.provenance["scorer"],
        "allocation": allocation.to_json(),
        "budget": budget,
        "block_size": config.block_size,
        "context_length": int(n_tokens),
        "next_position": next_position,
        "embed_dim": int(embedder.dim),
        "model_seed": int(model.config.seed),
        "sensitivity": profile.to_json() if profile is not None else None,
    }
    write_manifest(store, manifest)
    return EpisodicCacheSet(
        model=model,
        store=store,
        episode_ids=tuple(int(r["id"]) for r in records),
        centroids=np.array([r["centroid"] for r in records], dtype=np.float64),
        allocation=allocation,
        embedder=embedder,
        next_position=next_position,
        manifest=manifest,
        episode_model=episodes,
        reports=reports,
        profile=profile,
    )


def route(query: str, cache_set: EpisodicCacheSet, state: SessionState) -> int:
    """Match ``query`` and make its episode resident, loading only on a switch.

    The first query of a session counts as a switch since nothing is
    resident yet.
    """
    episode = cache_set.match(query)
    switched = episode != state.resident_id
    load_bytes = 0
    if switched:
        state.resident = cache_set.load(episode)
        state.resident_id = episode
        load_bytes = cache_set.file_size(episode)
        state.switches += 1
        state.loads += 1
        state.load_bytes += load_bytes
    state.log.append(RouteRecord(state.turns, episode, switched, load_bytes))
    return episode


def query_tokens(query: str, vocab: int = DEFAULT_VOCAB) -> list[int]:
    """A query continues the history after one turn separator."""
    return [separator_token(vocab)] + tokenize(query, vocab)


def answer(query: str, cache_set: EpisodicCacheSet, state: SessionState, max_new: int = 10) -> Answer:
    episode = route(query, cache_set, state)
    rec = state.log[-1]
    tokens = greedy_decode(
        cache_set.model, state.resident.layers, query_tokens(query), max_new, start_position=cache_set.next_position
    )
    return Answer(tokens, episode, rec.switched, rec.load_bytes)


def serve(queries: Sequence[str], cache_set: EpisodicCacheSet, max_new: int = 10) -> tuple[list[Answer], SessionState]:
    state = SessionState()
    return [answer(q, cache_set, state, max_new) for q in queries], state


def selected_tokens(history: ConversationHistory, episodes: EpisodeModel, episode_id: int, vocab: int = DEFAULT_VOCAB):
    """Tokens (and their original positions) of the segments belonging to one episode."""
    rendered = render_history_tokens(history, vocab)
    turns = {t for seg in episodes.segments_of(episode_id) for t in seg.turns}
    keep = np.isin(rendered.turn_of_token, sorted(turns))
    positions = np.flatnonzero(keep)
    return rendered.tokens[positions], positions


def rag_like_build(
    model: Model,
    history: ConversationHistory,
    n_episodes: int,
    budget: int,
    query: str,
    embedder: Embedder,
    config: BuildConfig = BuildConfig(),
) -> PrefillReport:
    """Compress only the segments of the episode matched by ``query``.

    The chosen tokens keep their original positions and go through the same
    bounded prefill, scored by that episode's medoid prompt.
    """
    episodes = cluster_history(
        history, n_episodes, embedder, config.w_embed, config.prompt_window, config.cluster_seed, config.vocab
    )
    q = embed_all(embedder, [query])[0]
    sims = cosine_rows(episodes.centroids, np.broadcast_to(q, episodes.centroids.shape))
    episode_id = int(np.argmax(np.where(np.isnan(sims), -np.inf, sims))) + 1
    tokens, positions = selected_tokens(history, episodes, episode_id, config.vocab)
    cfg = _episode_prefill_config(budget, None, config, episodes.episode(episode_id).prompt)
    report = block_prefill(model, tokens, cfg, episode_id=episode_id, positions=positions)
    report.assert_bounded()
    return report
