import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epikv.kvcache import LayerCache
from epikv.toymodel import (
    CAUSAL,
    ModelConfig,
    ModelConfigError,
    SinkRecent,
    full_cache,
    greedy_decode,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

from oracles import naive_forward, parameter_count

# closed form for L=2, H_q=4, H_kv=2, d_head=8, V=4096, 32768 positions, worked by hand
PARAMS_L2_HQ4_HKV2_D8 = 1_333_408


def test_init_is_deterministic_and_seeded():
    a = init_model(ModelConfig(seed=7))
    b = init_model(ModelConfig(seed=7))
    c = init_model(ModelConfig(seed=8))
    assert a.checksum("layer0.w_k") == b.checksum("layer0.w_k")
    assert a.checksum("layer0.w_k") != c.checksum("layer0.w_k")


def test_parameter_count_matches_closed_form():
    m = init_model(ModelConfig(n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=8))
    assert m.parameter_count() == PARAMS_L2_HQ4_HKV2_D8
    assert parameter_count(2, 4, 2, 8, 4096, 32768) == PARAMS_L2_HQ4_HKV2_D8


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_q_heads=3, n_kv_heads=2), dict(n_layers=0), dict(d_model=10), dict(seed=-1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kwargs)


def test_kv_head_mapping():
    cfg = ModelConfig(n_q_heads=8, n_kv_heads=2)
    assert [cfg.kv_head_of(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_single_token_attends_to_itself(model):
    trace = model.forward([5])
    for layer in trace.attention:
        for grid in layer:
            assert grid.tolist() == [[1.0]]


def test_attention_matches_scalar_loop_oracle(tiny_model):
    tokens = [3, 17, 3, 42, 9, 60]
    trace = tiny_model.forward(tokens)
    keys, values, attn, hidden = naive_forward(tiny_model, tokens)
    np.testing.assert_allclose(trace.attention[0][0], attn[0][0], atol=1e-9, rtol=0)
    np.testing.assert_allclose(trace.keys[0][:, 0], [k[0] for k in keys[0]], atol=1e-9, rtol=0)
    np.testing.assert_allclose(trace.hidden, hidden, atol=1e-9, rtol=0)


def test_gqa_with_cache_matches_oracle(gqa_model):
    tokens = [1, 2, 3, 4, 5, 6, 7]
    keys, values, attn, hidden = naive_forward(gqa_model, tokens)
    # split the run: 4 tokens into a cache, then 3 against it
    cache = full_cache(gqa_model, tokens[:4])
    trace = gqa_model.forward(tokens[4:], past_cache=cache)
    for layer in range(2):
        np.testing.assert_allclose(trace.keys[layer], np.array(keys[layer][4:]), atol=1e-9, rtol=0)
        for hq in range(4):
            np.testing.assert_allclose(trace.attention[layer][hq], np.array(attn[layer][hq])[4:], atol=1e-9, rtol=0)
    np.testing.assert_allclose(trace.hidden, np.array(hidden)[4:], atol=1e-9, rtol=0)


def test_sink_recent_matches_oracle(tiny_model):
    tokens = list(range(10, 22))
    mask = SinkRecent(2, 3)
    trace = tiny_model.forward(tokens, mask)
    _, _, attn, _ = naive_forward(tiny_model, tokens, allowed=lambda qp, kp: kp <= qp and (kp < 2 or qp - kp < 3))
    np.testing.assert_allclose(trace.attention[0][0], attn[0][0], atol=1e-9, rtol=0)


def _traces_equal(a, b):
    for x, y in zip(a.keys + a.values + a.layer_outputs, b.keys + b.values + b.layer_outputs):
        if x.tobytes() != y.tobytes():
            return False
    for la, lb in zip(a.attention, b.attention):
        for ga, gb in zip(la, lb):
            if ga.tobytes() != gb.tobytes():
                return False
    return a.hidden.tobytes() == b.hidden.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.data())
def test_sink_recent_full_coverage_is_causal(model, n, data):
    sink = data.draw(st.integers(0, n + 2))
    recent = data.draw(st.integers(max(1, n - sink), n + 2))
    tokens = np.arange(n) % 97
    assert _traces_equal(model.forward(tokens, SinkRecent(sink, recent)), model.forward(tokens, CAUSAL))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(0, 8), st.integers(1, 12), st.data())
def test_attention_rows_normalized_and_masked(model, n, sink, recent, data):
    tokens = data.draw(st.lists(st.integers(0, 4095), min_size=n, max_size=n))
    mask = data.draw(st.sampled_from([CAUSAL, SinkRecent(sink, recent)]))
    trace = model.forward(tokens, mask)
    pos = trace.positions
    for layer, grids in enumerate(trace.attention):
        for hq, grid in enumerate(grids):
            ctx = trace.context_positions[layer][model.config.kv_head_of(hq)]
            allowed = mask.allowed(pos, ctx)
            np.testing.assert_allclose(grid.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(grid[~allowed] == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.data())
def test_prefix_consistency(model, m, data):
    n = data.draw(st.integers(0, m - 1)) if m > 1 else 0
    tokens = np.array(data.draw(st.lists(st.integers(0, 4095), min_size=m, max_size=m)))
    whole = model.forward(tokens, need_weights=False)
    if n == 0:
        return
    cache = full_cache(model, tokens[:n])
    rest = model.forward(tokens[n:], past_cache=cache, need_weights=False)
    for layer in range(model.config.n_layers):
        np.testing.assert_allclose(rest.keys[layer], whole.keys[layer][n:], atol=1e-9, rtol=0)
        np.testing.assert_allclose(rest.values[layer], whole.values[layer][n:], atol=1e-9, rtol=0)


def test_forward_rejects_overlapping_positions(model):
    cache = full_cache(model, [1, 2, 3])
    with pytest.raises(ValueError, match="already holds"):
        model.forward([4], past_cache=cache, positions=[2])
    with pytest.raises(ValueError, match="vocabulary"):
        model.forward([model.config.vocab])


def test_forward_does_not_mutate_cache(model):
    cache = full_cache(model, [1, 2, 3, 4])
    snapshot = [LayerCache([p.copy() for p in c.positions], [k.copy() for k in c.keys], [v.copy() for v in c.values]) for c in cache]
    model.forward([9, 10], past_cache=cache)
    assert all(a.equals(b) for a, b in zip(cache, snapshot))


def test_greedy_decode(model):
    cache = full_cache(model, [11, 12, 13, 14, 15])
    assert greedy_decode(model, cache, [7], 0) == []
    first = greedy_decode(model, cache, [7, 8], 6)
    assert first == greedy_decode(model, cache, [7, 8], 6)
    assert len(first) == 6
    # a cache rebuilt from copies of the same entries decodes identically
    rebuilt = [
        LayerCache([p.copy() for p in c.positions], [k.copy() for k in c.keys], [v.copy() for v in c.values])
        for c in cache
    ]
    assert greedy_decode(model, rebuilt, [7, 8], 6) == first
    assert all(c.entries == 10 for c in cache)  # original untouched


def test_greedy_decode_equals_uncached_argmax(model):
    ctx, prompt = [21, 22, 23], [24, 25]
    out = greedy_decode(model, full_cache(model, ctx), prompt, 3)
    seq = ctx + prompt
    expected = []
    for _ in range(3):
        hidden = model.forward(seq, need_weights=False).hidden
        expected.append(int(np.argmax(model.logits(hidden[-1]))))
        seq.append(expected[-1])
    assert out == expected


def test_checkpoint_round_trip(tmp_path, gqa_model):
    path = tmp_path / "m.bin"
    size = save_checkpoint(gqa_model, path)
    assert size == path.stat().st_size
    again = load_checkpoint(path)
    assert again.config == gqa_model.config
    for name in gqa_model.weight_names():
        assert again.weights[name].tobytes() == gqa_model.weights[name].tobytes()
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
