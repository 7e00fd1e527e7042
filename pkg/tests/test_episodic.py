import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from epikv.blockprefill import BlockPrefillConfig, block_prefill
from epikv.clustering import HashEmbedder, cluster_history
from epikv.dialogue import render_history_tokens
from epikv.episodic import (
    BuildConfig,
    EpisodicCacheSet,
    SessionState,
    answer,
    build,
    query_tokens,
    rag_like_build,
    route,
    selected_tokens,
    serve,
)
from epikv.harness.corpus import synth_corpus
from epikv.kvcache import episode_filename
from epikv.scoring import score_with_prompt
from epikv.toymodel import full_cache, greedy_decode

from oracles import cosine, pooled_eviction

EMB = HashEmbedder()


@pytest.fixture(scope="module")
def two_topics():
    return synth_corpus(topics=2, turns_per_topic=16, queries_per_topic=3, seed=4)


@pytest.fixture(scope="module")
def four_topics():
    return synth_corpus(topics=4, turns_per_topic=12, queries_per_topic=10, seed=1)


@pytest.fixture(scope="module")
def four_set(model, four_topics, tmp_path_factory):
    store = tmp_path_factory.mktemp("four")
    return build(model, four_topics.history, 4, 24, 1.1, store, EMB, BuildConfig(block_size=64))


def test_single_episode(model, two_topics, tmp_path):
    cs = build(model, two_topics.history, 1, 16, None, tmp_path, EMB, BuildConfig(block_size=64))
    assert cs.n_episodes == 1 and cs.episode_ids == (1,)
    _, state = serve([q.text for q in two_topics.queries], cs, max_new=2)
    assert {r.episode for r in state.log} == {1}
    assert state.switches == 1 and state.loads == 1


def test_episode_caches_match_single_block_oracle_and_differ(model, two_topics, tmp_path):
    tokens = render_history_tokens(two_topics.history).tokens
    n = tokens.size
    cs = build(model, two_topics.history, 2, 16, 1.1, tmp_path, EMB, BuildConfig(block_size=n))
    budgets = cs.allocation.budgets
    H = model.config.n_kv_heads
    retained = []
    for ep in cs.episode_model.episodes:
        caches = full_cache(model, tokens)
        p = np.array(ep.prompt.tokens)
        trace = model.forward(p, past_cache=caches, positions=np.arange(n, n + p.size))
        scores = score_with_prompt(trace, model.config.group_size)
        cache = cs.load(ep.episode_id)
        for layer in range(model.config.n_layers):
            entries = [
                (h, int(pos), float(sc))
                for h in range(H)
                for pos, sc in zip(scores.positions[layer][h], scores.scores[layer][h])
            ]
            expected = pooled_eviction(entries, H * budgets[layer])
            got = {(h, pos) for h, ps in enumerate(cache.layers[layer].retained_sets()) for pos in ps}
            assert got == expected
        retained.append(cache.retained_sets())
    assert retained[0] != retained[1]


def test_build_rejects_too_many_episodes(model, two_topics, tmp_path):
    with pytest.raises(ValueError, match="segments"):
        build(model, two_topics.history, 99, 16, None, tmp_path, EMB)


def test_store_layout_and_reopen(model, four_set):
    for ep in four_set.episode_ids:
        assert (four_set.store / episode_filename(ep)).is_file()
    again = EpisodicCacheSet.open(four_set.store, model, EMB)
    assert again.episode_ids == four_set.episode_ids
    np.testing.assert_array_equal(again.centroids, four_set.centroids)
    assert again.allocation == four_set.allocation
    with pytest.raises(ValueError, match="dim"):
        EpisodicCacheSet.open(four_set.store, model, HashEmbedder(dim=32))


def test_every_cache_respects_layer_budgets(model, four_set):
    H = model.config.n_kv_heads
    for ep in four_set.episode_ids:
        counts = four_set.load(ep).entry_counts()
        assert all(c <= H * m for c, m in zip(counts, four_set.allocation.budgets))
    for report in four_set.reports:
        report.assert_bounded()


def test_medoid_text_routes_home(four_set):
    for ep in four_set.episode_model.episodes:
        assert four_set.match(ep.prompt_text) == ep.episode_id


def test_repeat_query_loads_nothing(four_set, four_topics):
    state = SessionState()
    q = four_topics.queries[0].text
    route(q, four_set, state)
    loads, bytes_ = state.loads, state.load_bytes
    route(q, four_set, state)
    assert state.loads == loads and state.load_bytes == bytes_
    assert state.log[-1].switched is False and state.log[-1].load_bytes == 0


def test_switches_match_route_replay(four_set, four_topics):
    queries = [q.text for q in four_topics.queries]
    assert len(queries) == 40
    _, state = serve(queries, four_set, max_new=1)
    centroids = four_set.centroids.tolist()
    resident, switches = None, 0
    for q in queries:
        e = EMB.embed(q).tolist()
        sims = [cosine(e, c) for c in centroids]
        best = max(range(len(sims)), key=lambda i: (sims[i], -i)) + 1
        switches += best != resident
        resident = best
    assert state.switches == switches
    assert state.switches <= len(queries)
    assert state.switch_series()[-1] == state.switches
    assert state.loads == state.switches


def test_forced_alternation_switches_every_turn(four_set):
    prompts = {ep.episode_id: ep.prompt_text for ep in four_set.episode_model.episodes}
    queries = [prompts[1], prompts[2]] * 5
    _, state = serve(queries, four_set, max_new=0)
    assert state.switches == 10 == len(queries)


class ScaledEmbedder:
    def __init__(self, inner, factor):
        self.inner, self.factor, self.dim = inner, factor, inner.dim

    def embed(self, text):
        return self.inner.embed(text) * self.factor


def test_routing_is_scale_invariant(four_set, four_topics):
    scaled = EpisodicCacheSet(
        four_set.model, four_set.store, four_set.episode_ids, four_set.centroids, four_set.allocation,
        ScaledEmbedder(EMB, 37.5), four_set.next_position, four_set.manifest,
    )
    for q in four_topics.queries:
        assert scaled.match(q.text) == four_set.match(q.text)


def test_answer_metadata_and_zero_tokens(four_set, four_topics):
    state = SessionState()
    out = answer(four_topics.queries[0].text, four_set, state, max_new=0)
    assert out.tokens == [] and out.switched is True and out.load_bytes > 0
    assert out.episode == state.resident_id


def test_lossless_budget_matches_full_kv(model, two_topics, tmp_path):
    tokens = render_history_tokens(two_topics.history).tokens
    cs = build(model, two_topics.history, 2, tokens.size, None, tmp_path, EMB, BuildConfig(block_size=64))
    full = full_cache(model, tokens)
    for q in two_topics.queries:
        got = answer(q.text, cs, SessionState(), max_new=5).tokens
        assert got == greedy_decode(model, full, query_tokens(q.text), 5)


def test_rebuild_is_bitwise_identical(model, two_topics, tmp_path):
    a = build(model, two_topics.history, 2, 16, 1.1, tmp_path / "a", EMB, BuildConfig(block_size=48))
    b = build(model, two_topics.history, 2, 16, 1.1, tmp_path / "b", EMB, BuildConfig(block_size=48, parallel=True))
    for ep in a.episode_ids:
        assert (a.store / episode_filename(ep)).read_bytes() == (b.store / episode_filename(ep)).read_bytes()
    assert (a.store / "manifest.json").read_text() == (b.store / "manifest.json").read_text()


def test_answers_survive_process_restart(four_set, four_topics):
    queries = [q.text for q in four_topics.queries[:6]]
    local = [a.tokens for a in serve(queries, four_set, max_new=4)[0]]
    script = textwrap.dedent(
        f"""
        import json, sys
        from epikv.clustering import HashEmbedder
        from epikv.episodic import EpisodicCacheSet, serve
        from epikv.toymodel import ModelConfig, init_model
        cs = EpisodicCacheSet.open({str(four_set.store)!r}, init_model(ModelConfig()), HashEmbedder())
        answers, _ = serve(json.loads(sys.stdin.read()), cs, max_new=4)
        print(json.dumps([a.tokens for a in answers]))
        """
    )
    out = subprocess.run([sys.executable, "-c", script], input=json.dumps(queries), capture_output=True, text=True, check=True)
    assert json.loads(out.stdout) == local


def test_rag_like_single_episode_is_plain_prefill(model, two_topics):
    cfg = BuildConfig(block_size=64)
    report = rag_like_build(model, two_topics.history, 1, 16, two_topics.queries[0].text, EMB, cfg)
    tokens = render_history_tokens(two_topics.history).tokens
    prompt = cluster_history(two_topics.history, 1, EMB).episode(1).prompt
    plain = block_prefill(model, tokens, BlockPrefillConfig(budget=16, block_size=64, prompt=prompt), episode_id=1)
    assert report.cache.equals(plain.cache)


def test_rag_like_keeps_only_selected_positions(model, two_topics):
    q = two_topics.queries[0].text
    report = rag_like_build(model, two_topics.history, 2, 16, q, EMB, BuildConfig(block_size=32))
    episodes = cluster_history(two_topics.history, 2, EMB)
    tokens, positions = selected_tokens(two_topics.history, episodes, report.cache.episode_id)
    assert tokens.size < len(render_history_tokens(two_topics.history))
    allowed = set(positions.tolist())
    for layer in report.cache.retained_sets():
        for head in layer:
            assert head <= allowed
