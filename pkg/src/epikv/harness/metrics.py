"""Retained-set overlap and the run report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

RetainedSets = Sequence[Sequence[frozenset[int]]]  # [layer][kv-head]


@dataclass(frozen=True)
class Overlap:
    per_head: list[list[float]]
    per_layer: list[float]
    mean: float


def jaccard(a: frozenset[int] | set[int], b: frozenset[int] | set[int]) -> float:
    """|A & B| / |A | B|, with two empty sets counted as identical."""
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def overlap_vs_oracle(retained: RetainedSets, oracle: RetainedSets) -> Overlap:
    if len(retained) != len(oracle):
        raise ValueError(f"layer count differs: {len(retained)} vs {len(oracle)}")
    per_head = []
    for layer, (ra, rb) in enumerate(zip(retained, oracle)):
        if len(ra) != len(rb):
            raise ValueError(f"layer {layer}: head count differs: {len(ra)} vs {len(rb)}")
        per_head.append([jaccard(set(x), set(y)) for x, y in zip(ra, rb)])
    per_layer = [sum(h) / len(h) if h else 1.0 for h in per_head]
    flat = [v for h in per_head for v in h]
    return Overlap(per_head, per_layer, sum(flat) / len(flat) if flat else 1.0)


@dataclass
class MetricsReport:
    config: dict
    bound_per_layer: list[int]
    peak_per_layer: list[int]
    final_entries: dict[str, list[int]]  # episode id -> per-layer entries
    evictions: dict[str, int]  # episode id -> entries evicted over the whole prefill
    allocation: dict
    sensitivity: dict | None
    episodes: list[dict]
    routes: list[dict]
    switch_series: list[int]
    switches: int
    loads: int
    answers: list[list[int]]
    overlap: list[dict]
    overlap_mean: float | None
    violations: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


OCCUPANCY_HEADER = ("step", "layer", "entries", "prompt_resident_entries")
ROUTES_HEADER = ("turn", "episode", "switched")


def occupancy_csv(rows: Sequence[tuple[int, int, int, int]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(OCCUPANCY_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def routes_csv(rows: Sequence[tuple[int, int, int]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUTES_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def peaks_from_occupancy_csv(text: str) -> dict[int, int]:
    """Per-layer maximum of the ``entries`` column."""
    peaks: dict[int, int] = {}
    for row in csv.DictReader(io.StringIO(text)):
        layer, entries = int(row["layer"]), int(row["entries"])
        peaks[layer] = max(peaks.get(layer, 0), entries)
    return peaks
