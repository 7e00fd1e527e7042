"""Per-layer budget allocation driven by Key-state sensitivity to a sink+recent mask."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blockprefill import BlockPrefillConfig, block_prefill
from .dialogue import DEFAULT_VOCAB
from .numerics import cosine_rows
from .scoring import STREAMING_SINK
from .toymodel import CAUSAL, Model, SinkRecent, full_cache

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivityProfile:
    similarities: tuple[float, ...]  # sigma_l, mean Key cosine per layer
    metadata: dict = field(default_factory=dict)

    @property
    def sensitivities(self) -> tuple[float, ...]:
        return tuple(1.0 - s for s in self.similarities)

    @property
    def n_layers(self) -> int:
        return len(self.similarities)

    def to_json(self) -> dict:
        meta = dict(self.metadata)
        return {
            "layers": list(self.similarities),
            "mask": meta.pop("mask", None),
            "input_id": meta.pop("input_id", None),
            "model_seed": meta.pop("model_seed", None),
            **meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SensitivityProfile":
        data = dict(data)
        layers = tuple(float(x) for x in data.pop("layers"))
        return cls(layers, data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SensitivityProfile":
        return cls.from_json(json.loads(Path(path).read_text()))


def calibration_tokens(length: int, seed: int = 0, vocab: int = DEFAULT_VOCAB) -> np.ndarray:
    """Seeded synthetic calibration document (word ids only, no separators)."""
    return np.random.default_rng(seed).integers(0, vocab - 1, size=length)


def projected_keys(model: Model, layer_output: np.ndarray, layer: int) -> np.ndarray:
    """Layer output projected through that layer's key matrix, split per kv-head: (N, H_kv, d_head)."""
    cfg = model.config
    return (layer_output @ model.weights[f"layer{layer}.w_k"]).reshape(-1, cfg.n_kv_heads, cfg.d_head)


def measure_sensitivity(
    model: Model,
    tokens: Sequence[int] | np.ndarray,
    budget: int,
    sink: int = STREAMING_SINK,
    input_id: str = "",
) -> SensitivityProfile:
    """Mean Key cosine per layer between a causal and a sink+recent forward.

    Zero-norm key pairs are left out of the mean (and logged).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("calibration needs at least 2 tokens")
    if budget < sink + 1:
        raise ValueError(f"budget M_cal={budget} must be >= sink + 1 = {sink + 1}")
    mask = SinkRecent(sink, budget - sink)
    full = model.forward(tokens, CAUSAL, need_weights=False)
    block = model.forward(tokens, mask, need_weights=False)
    sims = []
    for layer in range(model.config.n_layers):
        k_full = projected_keys(model, full.layer_outputs[layer], layer)
        k_block = projected_keys(model, block.layer_outputs[layer], layer)
        cos = cosine_rows(k_full, k_block)  # (N, H_kv)
        valid = ~np.isnan(cos)
        if not valid.all():
            log.warning("layer %d: %d zero-norm key pairs excluded", layer, int((~valid).sum()))
        sims.append(float(cos[valid].mean()) if valid.any() else 1.0)
    meta = {
        "mask": {"sink": sink, "recent": budget - sink},
        "input_id": input_id,
        "model_seed": int(model.config.seed),
        "n_tokens": int(tokens.size),
    }
    return SensitivityProfile(tuple(sims), meta)


@dataclass(frozen=True)
class BudgetAllocation:
    alpha: float
    weights: tuple[float, ...]
    budgets: tuple[int, ...]  # integer per-layer budgets M_l (entries per kv-head)
    target: int  # L * M

    @classmethod
    def uniform(cls, n_layers: int, budget: int) -> "BudgetAllocation":
        return cls(0.0, (1.0 / n_layers,) * n_layers, (budget,) * n_layers, n_layers * budget)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "BudgetAllocation":
        return cls(float(data["alpha"]), tuple(data["weights"]), tuple(int(b) for b in data["budgets"]), int(data["target"]))


def largest_remainder(shares: Sequence[float], total: int) -> list[int]:
    """Round non-negative reals summing to ``total`` into integers with the same sum.

    Leftover units go to the largest fractional parts, lower index first on ties.
    """
    shares = np.asarray(shares, dtype=np.float64)
    floors = np.floor(shares).astype(np.int64)
    extra = total - int(floors.sum())
    frac = shares - floors
    order = sorted(range(shares.size), key=lambda i: (-frac[i], i))
    for i in order[:max(extra, 0)]:
        floors[i] += 1
    return floors.tolist()


def allocate(profile: SensitivityProfile | Sequence[float], budget: int, alpha: float) -> BudgetAllocation:
    """Split ``L * budget`` across layers in proportion to sensitivity ** alpha.

    ``profile`` may also be a plain sequence of sensitivities s_l. Falls back
    to uniform when every weight vanishes; each layer keeps at least one entry.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    sens = profile.sensitivities if isinstance(profile, SensitivityProfile) else tuple(profile)
    n_layers = len(sens)
    if n_layers < 1:
        raise ValueError("profile has no layers")
    s = np.clip(np.asarray(sens, dtype=np.float64), 0.0, None)
    powered = s**alpha
    total_power = powered.sum()
    if not np.isfinite(total_power) or total_power <= 0.0:
        weights = np.full(n_layers, 1.0 / n_layers)
    else:
        weights = powered / total_power
    target = n_layers * budget
    ints = largest_remainder(weights * target, target)
    real = weights * target
    for low in [i for i, b in enumerate(ints) if b < 1]:
        # donor: largest allocation; ties go to the smaller real share, then the less sensitive layer
        donor = max(range(n_layers), key=lambda i: (ints[i], -real[i], -s[i], -i))
        ints[donor] -= 1
        ints[low] += 1
    return BudgetAllocation(float(alpha), tuple(float(w) for w in weights), tuple(ints), target)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def allocation_kl(
    model: Model,
    context: Sequence[int] | np.ndarray,
    query: Sequence[int] | np.ndarray,
    allocation: BudgetAllocation,
    config: BlockPrefillConfig,
) -> float:
    """Mean KL(full KV || block-prefilled cache) over the query's next-token distributions."""
    context = np.asarray(context, dtype=np.int64)
    query = np.asarray(query, dtype=np.int64)
    if query.size == 0:
        raise ValueError("empty query")
    positions = np.arange(context.size, context.size + query.size)
    full = model.forward(query, past_cache=full_cache(model, context), positions=positions, need_weights=False)
    budget = allocation.target // model.config.n_layers
    cfg = dataclasses.replace(config, budget=budget, allocation=allocation)
    compressed = block_prefill(model, context, cfg).cache.layers
    approx = model.forward(query, past_cache=compressed, positions=positions, need_weights=False)
    p = _softmax_rows(model.logits(full.hidden))
    q = _softmax_rows(model.logits(approx.hidden))
    return float(np.mean([kl_divergence(pi, qi) for pi, qi in zip(p, q)]))


def allocation_divergence(
    model: Model,
    context: Sequence[int] | np.ndarray,
    query: Sequence[int] | np.ndarray,
    alloc_a: BudgetAllocation,
    alloc_b: BudgetAllocation,
    config: BlockPrefillConfig,
) -> float:
    """KL_a - KL_b; negative means ``alloc_a`` tracks the full cache more closely."""
    if alloc_a.target != alloc_b.target:
        raise ValueError("allocations must share the same global budget")
    return allocation_kl(model, context, query, alloc_a, config) - allocation_kl(model, context, query, alloc_b, config)
