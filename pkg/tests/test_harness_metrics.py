import pytest

from epikv.harness.metrics import (
    jaccard,
    occupancy_csv,
    overlap_vs_oracle,
    peaks_from_occupancy_csv,
    routes_csv,
)


def test_jaccard_hand_sets():
    a, b = {1, 2, 3, 4}, {3, 4, 5, 6}
    assert jaccard(a, b) == len(a & b) / len(a | b) == 2 / 6
    assert jaccard(a, a) == 1.0
    assert jaccard({1, 2}, {3, 4}) == 0.0
    assert jaccard(set(), set()) == 1.0


def test_overlap_reduces_per_layer_then_globally():
    ra = [[frozenset({1, 2, 3, 4}), frozenset({0})], [frozenset({7}), frozenset({8})]]
    rb = [[frozenset({3, 4, 5, 6}), frozenset({0})], [frozenset({9}), frozenset({8})]]
    ov = overlap_vs_oracle(ra, rb)
    assert ov.per_head == [[2 / 6, 1.0], [0.0, 1.0]]
    assert ov.per_layer == pytest.approx([(2 / 6 + 1) / 2, 0.5])
    assert ov.mean == pytest.approx((2 / 6 + 1 + 0 + 1) / 4)
    assert overlap_vs_oracle(ra, ra).mean == 1.0


def test_overlap_dimension_mismatch():
    with pytest.raises(ValueError, match="layer"):
        overlap_vs_oracle([[frozenset()]], [])
    with pytest.raises(ValueError, match="head"):
        overlap_vs_oracle([[frozenset()]], [[frozenset(), frozenset()]])


def test_csv_helpers():
    text = occupancy_csv([(0, 0, 5, 2), (0, 1, 7, 2), (1, 0, 3, 0), (1, 1, 9, 0)])
    assert text.splitlines()[0] == "step,layer,entries,prompt_resident_entries"
    assert peaks_from_occupancy_csv(text) == {0: 5, 1: 9}
    assert routes_csv([(0, 2, 1)]) == "turn,episode,switched\n0,2,1\n"
