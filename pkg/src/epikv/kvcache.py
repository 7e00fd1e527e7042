"""Token-level KV storage per (layer, kv-head), pooled eviction and the episode store.

Budgets are counted in entries per kv-head: a layer with budget ``M_l`` and
``H_kv`` heads may hold ``H_kv * M_l`` entries in total, distributed
non-uniformly across its heads.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MAGIC = b"EPKV"
FORMAT_VERSION = 1
_NO_BUDGET = 0xFFFFFFFF


class CacheFormatError(ValueError):
    pass


class VersionMismatchError(CacheFormatError):
    pass


class TruncatedCacheError(CacheFormatError):
    pass


class UnknownEpisodeError(KeyError):
    pass


class BudgetError(ValueError):
    pass


@dataclass
class LayerCache:
    """One layer's KV entries; each kv-head keeps its own position-sorted list."""

    positions: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    budget: Optional[int] = None

    def __post_init__(self):
        if not (len(self.positions) == len(self.keys) == len(self.values)):
            raise ValueError("positions/keys/values must have one entry per head")
        for pos, k, v in zip(self.positions, self.keys, self.values):
            if k.shape != v.shape or k.shape[0] != pos.shape[0]:
                raise ValueError("per-head key/value/position lengths disagree")
            if pos.size > 1 and np.any(np.diff(pos) <= 0):
                raise ValueError("head positions must be strictly increasing")

    @classmethod
    def _trusted(cls, positions, keys, values, budget) -> "LayerCache":
        # skips validation; callers derive the arrays from an already valid cache
        obj = cls.__new__(cls)
        obj.positions, obj.keys, obj.values, obj.budget = positions, keys, values, budget
        return obj

    @classmethod
    def empty(cls, n_heads: int, d_head: int, budget: Optional[int] = None) -> "LayerCache":
        return cls(
            [np.zeros(0, dtype=np.int64) for _ in range(n_heads)],
            [np.zeros((0, d_head)) for _ in range(n_heads)],
            [np.zeros((0, d_head)) for _ in range(n_heads)],
            budget,
        )

    @property
    def n_heads(self) -> int:
        return len(self.positions)

    @property
    def d_head(self) -> int:
        return self.keys[0].shape[1]

    @property
    def head_sizes(self) -> list[int]:
        return [int(p.size) for p in self.positions]

    @property
    def entries(self) -> int:
        return sum(self.head_sizes)

    @property
    def capacity(self) -> Optional[int]:
        return None if self.budget is None else self.n_heads * self.budget

    def max_position(self) -> int:
        """Largest live position, or -1 if empty."""
        return max((int(p[-1]) for p in self.positions if p.size), default=-1)

    def append(self, positions: np.ndarray, keys: np.ndarray, values: np.ndarray) -> "LayerCache":
        """Append new tokens to every head; ``keys``/``values`` are (n, H_kv, d_head)."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions[0] <= self.max_position():
            raise ValueError("appended positions must follow the resident ones")
        if positions.size > 1 and np.any(np.diff(positions) <= 0):
            raise ValueError("appended positions must be strictly increasing")
        expected = (positions.size, self.n_heads, self.d_head)
        if keys.shape != expected or values.shape != expected:
            raise ValueError(f"appended keys/values must have shape {expected}")
        return LayerCache._trusted(
            [np.concatenate([p, positions]) for p in self.positions],
            [np.concatenate([k, keys[:, h]]) for h, k in enumerate(self.keys)],
            [np.concatenate([v, values[:, h]]) for h, v in enumerate(self.values)],
            self.budget,
        )

    def take(self, keep: Sequence[np.ndarray]) -> "LayerCache":
        """Keep only the given (sorted) per-head row indices."""
        return LayerCache._trusted(
            [p[idx] for p, idx in zip(self.positions, keep)],
            [k[idx] for k, idx in zip(self.keys, keep)],
            [v[idx] for v, idx in zip(self.values, keep)],
            self.budget,
        )

    def with_budget(self, budget: Optional[int]) -> "LayerCache":
        return LayerCache._trusted(self.positions, self.keys, self.values, budget)

    def retained_sets(self) -> list[frozenset[int]]:
        return [frozenset(p.tolist()) for p in self.positions]

    def equals(self, other: "LayerCache") -> bool:
        """Structural equality with bitwise float comparison."""
        if self.budget != other.budget or self.n_heads != other.n_heads:
            return False
        for a, b in zip(self.positions + self.keys + self.values, other.positions + other.keys + other.values):
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def empty_caches(n_layers: int, n_heads: int, d_head: int, budgets: Optional[Sequence[int]] = None) -> list[LayerCache]:
    budgets = budgets if budgets is not None else [None] * n_layers
    return [LayerCache.empty(n_heads, d_head, b) for b in budgets]


def evict_to_budget(
    cache: LayerCache,
    scores: Sequence[np.ndarray],
    pinned: Iterable[int] = (),
    budget: Optional[int] = None,
) -> LayerCache:
    """Shrink ``cache`` to ``H_kv * budget`` entries by pooled top-score selection.

    ``scores[h]`` is aligned with ``cache.positions[h]``. Pinned positions are
    always kept; the rest of the layer budget goes to the highest scores
    across all heads of the layer, ties resolved by lower position and then
    lower head. ``budget`` defaults to ``cache.budget``.
    """
    budget = cache.budget if budget is None else budget
    if budget is None:
        raise BudgetError("layer has no budget to evict to")
    capacity = cache.n_heads * budget
    if cache.entries <= capacity:
        return cache
    if len(scores) != cache.n_heads:
        raise ValueError("need one score array per head")

    pos = np.concatenate(cache.positions)
    head = np.concatenate([np.full(p.size, h, dtype=np.int64) for h, p in enumerate(cache.positions)])
    sc = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores])
    if sc.shape != pos.shape:
        raise ValueError("scores do not cover every live entry")
    if not np.all(np.isfinite(sc)):
        raise ValueError("scores must be finite")

    pinned_arr = np.fromiter(pinned, dtype=np.int64)
    is_pinned = np.isin(pos, pinned_arr) if pinned_arr.size else np.zeros(pos.size, dtype=bool)
    n_pinned = int(is_pinned.sum())
    if n_pinned > capacity:
        raise BudgetError(f"{n_pinned} pinned entries exceed layer capacity {capacity}")

    # lexsort: last key is primary
    order = np.lexsort((head, pos, -sc, ~is_pinned))
    chosen = order[:capacity]
    keep_mask = np.zeros(pos.size, dtype=bool)
    keep_mask[chosen] = True

    keep = []
    start = 0
    for p in cache.positions:
        stop = start + p.size
        keep.append(np.flatnonzero(keep_mask[start:stop]))
        start = stop
    return cache.take(keep).with_budget(budget)


def count_entries(caches: Sequence[LayerCache]) -> tuple[list[int], int]:
    per_layer = [c.entries for c in caches]
    return per_layer, sum(per_layer)


@dataclass
class EpisodicCache:
    episode_id: int
    layers: list[LayerCache]
    provenance: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def entry_counts(self) -> list[int]:
        return [layer.entries for layer in self.layers]

    def retained_sets(self) -> list[list[frozenset[int]]]:
        return [layer.retained_sets() for layer in self.layers]

    def equals(self, other: "EpisodicCache") -> bool:
        return (
            self.episode_id == other.episode_id
            and self.provenance == other.provenance
            and len(self.layers) == len(other.layers)
            and all(a.equals(b) for a, b in zip(self.layers, other.layers))
        )


@dataclass(frozen=True)
class OccupancySample:
    step: int
    layer: int
    entries: int
    prompt_resident_entries: int
    event: str  # "append" or "evict"


@dataclass
class OccupancyLog:
    samples: list[OccupancySample] = field(default_factory=list)
    _step: int = 0

    def record(self, caches: Sequence[LayerCache], event: str, prompt_resident: Sequence[int] | None = None):
        prompt_resident = prompt_resident or [0] * len(caches)
        for layer, (cache, extra) in enumerate(zip(caches, prompt_resident)):
            self.samples.append(OccupancySample(self._step, layer, cache.entries, int(extra), event))
        self._step += 1

    @property
    def steps(self) -> int:
        return self._step

    def series(self, layer: int) -> list[int]:
        return [s.entries for s in self.samples if s.layer == layer]

    def peak_per_layer(self, n_layers: int) -> list[int]:
        peaks = [0] * n_layers
        for s in self.samples:
            peaks[s.layer] = max(peaks[s.layer], s.entries)
        return peaks


# --- persistence -----------------------------------------------------------

_HEADER = struct.Struct("<4sHIHHHI")  # magic, version, episode, L, H_kv, d_head, provenance length


def episode_filename(episode_id: int) -> str:
    return f"episode_{episode_id}.epkv"


def encode_cache(cache: EpisodicCache) -> bytes:
    if cache.layers:
        n_heads, d_head = cache.layers[0].n_heads, cache.layers[0].d_head
    else:
        n_heads, d_head = 0, 0
    prov = json.dumps(cache.provenance, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, cache.episode_id, len(cache.layers), n_heads, d_head, len(prov)), prov]
    for layer in cache.layers:
        parts.append(struct.pack("<I", _NO_BUDGET if layer.budget is None else layer.budget))
        for pos, k, v in zip(layer.positions, layer.keys, layer.values):
            parts.append(struct.pack("<I", pos.size))
            parts.append(pos.astype("<i8").tobytes())
            parts.append(k.astype("<f8").tobytes())
            parts.append(v.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedCacheError(f"cache file truncated at byte {len(self.data)}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct | str):
        st = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return st.unpack(self.read(st.size))


def decode_cache(data: bytes) -> EpisodicCache:
    reader = _Reader(data)
    if len(data) < _HEADER.size:
        # too short to even carry a header: treat as a corrupt header
        raise VersionMismatchError("missing or corrupt EPKV header")
    magic, version, episode_id, n_layers, n_heads, d_head, prov_len = reader.unpack(_HEADER)
    if magic != MAGIC:
        raise VersionMismatchError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported store version {version} (expected {FORMAT_VERSION})")
    provenance = json.loads(reader.read(prov_len).decode("utf-8"))
    layers = []
    for _ in range(n_layers):
        (budget,) = reader.unpack("<I")
        positions, keys, values = [], [], []
        for _ in range(n_heads):
            (count,) = reader.unpack("<I")
            positions.append(np.frombuffer(reader.read(8 * count), dtype="<i8").astype(np.int64))
            keys.append(np.frombuffer(reader.read(8 * count * d_head), dtype="<f8").reshape(count, d_head).astype(np.float64))
            values.append(np.frombuffer(reader.read(8 * count * d_head), dtype="<f8").reshape(count, d_head).astype(np.float64))
        layers.append(LayerCache(positions, keys, values, None if budget == _NO_BUDGET else budget))
    if reader.offset != len(data):
        raise CacheFormatError("trailing bytes after cache payload")
    return EpisodicCache(episode_id, layers, provenance)


def persist(cache: EpisodicCache, store_path: str | os.PathLike) -> int:
    """Write ``cache`` into the store directory; returns the byte count written."""
    store = Path(store_path)
    store.mkdir(parents=True, exist_ok=True)
    payload = encode_cache(cache)
    target = store / episode_filename(cache.episode_id)
    tmp = target.with_suffix(".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, target)
    return len(payload)


def load(store_path: str | os.PathLike, episode_id: int) -> EpisodicCache:
    path = Path(store_path) / episode_filename(episode_id)
    if not path.exists():
        raise UnknownEpisodeError(f"no cache for episode {episode_id} in {store_path}")
    cache = decode_cache(path.read_bytes())
    if cache.episode_id != episode_id:
        raise CacheFormatError(f"{path.name} holds episode {cache.episode_id}")
    return cache


def write_manifest(store_path: str | os.PathLike, manifest: dict) -> None:
    store = Path(store_path)
    store.mkdir(parents=True, exist_ok=True)
    (store / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(store_path: str | os.PathLike) -> dict:
    path = Path(store_path) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {store_path}")
    return json.loads(path.read_text())
