"""End-to-end experiment: build the cache store, serve the queries, emit metrics."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional

from ..allocation import SensitivityProfile
from ..blockprefill import BlockPrefillConfig, BoundViolationError, exact_question_prefill
from ..clustering import Embedder, HashEmbedder
from ..dialogue import ConversationHistory, QuerySet, parse_conversation, render_history_tokens, tokenize
from ..episodic import BuildConfig, EpisodicCacheSet, build, build_baseline, serve
from ..scoring import ScorerKind
from ..toymodel import Model, ModelConfig, init_model
from .config import ExperimentConfig
from .corpus import synth_corpus
from .embed_client import ExternalEmbedder
from .metrics import MetricsReport, occupancy_csv, overlap_vs_oracle, routes_csv

log = logging.getLogger(__name__)

REPORT_FILE = "report.json"
TIMINGS_FILE = "timings.json"
OCCUPANCY_FILE = "occupancy.csv"
ROUTES_FILE = "routes.csv"
RETAINED_FILE = "retained.json"
STORE_DIR = "store"


def make_model(cfg: ExperimentConfig) -> Model:
    return init_model(
        ModelConfig(
            n_layers=cfg.n_layers,
            n_q_heads=cfg.n_q_heads,
            n_kv_heads=cfg.n_kv_heads,
            d_head=cfg.d_head,
            vocab=cfg.vocab,
            seed=cfg.model_seed,
        )
    )


def make_embedder(cfg: ExperimentConfig) -> Embedder:
    source = cfg.resolved_embedder()
    if source == "builtin":
        return HashEmbedder(cfg.embed_dim)
    return ExternalEmbedder(source)


def load_corpus(cfg: ExperimentConfig) -> tuple[ConversationHistory, QuerySet]:
    if cfg.corpus:
        return parse_conversation(Path(cfg.corpus).read_text(encoding="utf-8"))
    conv = synth_corpus(
        cfg.topics, cfg.turns_per_topic, cfg.queries_per_topic, cfg.corpus_seed, interleave_queries=cfg.interleave_queries
    )
    return conv.history, conv.queries


def build_config(cfg: ExperimentConfig) -> BuildConfig:
    profile = SensitivityProfile.load(cfg.profile) if cfg.profile else None
    return BuildConfig(
        block_size=cfg.m_block,
        agg=cfg.agg,
        w_embed=cfg.w_embed,
        prompt_window=cfg.prompt_window,
        cluster_seed=cfg.cluster_seed,
        calibration_seed=cfg.calibration_seed,
        profile=profile,
        vocab=cfg.vocab,
    )


def _retained_json(sets) -> list[list[list[int]]]:
    return [[sorted(head) for head in layer] for layer in sets]


def run(cfg: ExperimentConfig, output_dir: Optional[str | Path] = None) -> MetricsReport:
    """Run one experiment and write its artifacts into ``output_dir``.

    Raises BoundViolationError if any occupancy sample exceeds the bound.
    """
    cfg.check_paths()
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    clock = time.perf_counter

    t0 = clock()
    model = make_model(cfg)
    embedder = make_embedder(cfg)
    history, queries = load_corpus(cfg)
    if len(queries) == 0:
        raise ValueError("the conversation has no queries to serve")
    bcfg = build_config(cfg)
    timings["setup"] = clock() - t0

    t0 = clock()
    scorer = ScorerKind(cfg.scorer)
    store = out / STORE_DIR
    if scorer is ScorerKind.PATCHED:
        cache_set = build(model, history, cfg.episodes, cfg.m, cfg.alpha, store, embedder, bcfg)
    else:
        cache_set = build_baseline(model, history, cfg.m, cfg.alpha, store, embedder, scorer, bcfg)
    timings["build"] = clock() - t0

    t0 = clock()
    answers, state = serve([q.text for q in queries], cache_set, cfg.max_new)
    timings["serve"] = clock() - t0

    t0 = clock()
    overlap, retained = _oracle_overlap(model, history, queries, cache_set, state, cfg)
    timings["overlap"] = clock() - t0

    occupancy_rows, offset = [], 0
    for report in cache_set.reports:
        for s in report.occupancy.samples:
            occupancy_rows.append((offset + s.step, s.layer, s.entries, s.prompt_resident_entries))
        offset += report.occupancy.steps
    bound = cache_set.reports[0].bound_per_layer()
    peaks = [max(r.peak_per_layer()[layer] for r in cache_set.reports) for layer in range(model.config.n_layers)]
    violations = sum(len(r.violations()) for r in cache_set.reports)

    metrics = MetricsReport(
        config={k: v for k, v in cfg.as_dict().items() if k != "output_dir"},
        bound_per_layer=bound,
        peak_per_layer=peaks,
        final_entries={str(r.cache.episode_id): r.cache.entry_counts() for r in cache_set.reports},
        evictions={str(r.cache.episode_id): int(sum(r.evictions_per_block)) for r in cache_set.reports},
        allocation=cache_set.allocation.to_json(),
        sensitivity=cache_set.profile.to_json() if cache_set.profile is not None else None,
        episodes=[
            {k: ep[k] for k in ("id", "members", "medoid_segment", "medoid_turns", "entries", "bytes")}
            for ep in cache_set.manifest["episodes"]
        ],
        routes=[{"turn": r.turn, "episode": r.episode, "switched": r.switched, "load_bytes": r.load_bytes} for r in state.log],
        switch_series=state.switch_series(),
        switches=state.switches,
        loads=state.loads,
        answers=[a.tokens for a in answers],
        overlap=overlap,
        overlap_mean=(sum(o["mean"] for o in overlap) / len(overlap)) if overlap else None,
        violations=violations,
    )

    (out / OCCUPANCY_FILE).write_text(occupancy_csv(occupancy_rows))
    (out / ROUTES_FILE).write_text(routes_csv([(r.turn, r.episode, int(r.switched)) for r in state.log]))
    (out / RETAINED_FILE).write_text(json.dumps(retained, sort_keys=True) + "\n")
    (out / REPORT_FILE).write_text(metrics.dumps())
    (out / TIMINGS_FILE).write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    if violations:
        raise BoundViolationError(f"{violations} occupancy samples exceeded the per-layer bound {bound}")
    return metrics


def _oracle_overlap(model, history, queries, cache_set: EpisodicCacheSet, state, cfg: ExperimentConfig):
    """Jaccard of each served cache against an exact-question oracle for the same query."""
    tokens = render_history_tokens(history, cfg.vocab).tokens
    base = BlockPrefillConfig(
        budget=cfg.m, block_size=cfg.m_block, agg=cfg.agg, allocation=cache_set.allocation, vocab=cfg.vocab
    )
    rows, retained = [], {"episodes": {}, "oracles": {}}
    for ep in cache_set.episode_ids:
        retained["episodes"][str(ep)] = _retained_json(cache_set.load(ep).retained_sets())
    for rec, query in list(zip(state.log, queries))[: cfg.overlap_queries]:
        q_tokens = tokenize(query.text, cfg.vocab)
        if not q_tokens:
            continue
        oracle = exact_question_prefill(model, tokens, base, q_tokens).cache.retained_sets()
        served = retained["episodes"][str(rec.episode)]
        ov = overlap_vs_oracle([[frozenset(h) for h in layer] for layer in served], oracle)
        rows.append({"turn": rec.turn, "episode": rec.episode, "per_layer": ov.per_layer, "mean": ov.mean})
        retained["oracles"][str(rec.turn)] = _retained_json(oracle)
    return rows, retained
