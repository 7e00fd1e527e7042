"""Seeded grouped-query-attention transformer used as the cache substrate.

Pre-norm attention + MLP blocks over learned additive positional
embeddings. Everything is float64 numpy; attention weights are
materialized so they can be used for token scoring.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kvcache import LayerCache
from .numerics import masked_exp


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    vocab: int = 4096
    seed: int = 7
    d_model: Optional[int] = None
    d_ff: Optional[int] = None
    max_positions: int = 32768

    def __post_init__(self):
        for name in ("n_layers", "n_q_heads", "n_kv_heads", "d_head", "vocab", "max_positions"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ModelConfigError("n_q_heads must be divisible by n_kv_heads")
        expected = self.n_q_heads * self.d_head
        if self.d_model is None:
            object.__setattr__(self, "d_model", expected)
        elif self.d_model != expected:
            raise ModelConfigError(f"d_model must equal n_q_heads * d_head = {expected}")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * expected)
        elif self.d_ff < 1:
            raise ModelConfigError("d_ff must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ModelConfigError("seed must be a 64-bit unsigned integer")

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size


@dataclass(frozen=True)
class Causal:
    def allowed(self, query_pos: np.ndarray, key_pos: np.ndarray) -> np.ndarray:
        # key_pos may carry leading batch axes: (..., C) -> (..., n, C)
        return key_pos[..., None, :] <= query_pos[:, None]


@dataclass(frozen=True)
class SinkRecent:
    """Causal attention restricted to the first ``sink_count`` positions plus a recent window."""

    sink_count: int
    recent_count: int

    def __post_init__(self):
        if self.sink_count < 0 or self.recent_count < 1:
            raise ValueError("SinkRecent needs sink_count >= 0 and recent_count >= 1")

    def allowed(self, query_pos: np.ndarray, key_pos: np.ndarray) -> np.ndarray:
        kp = key_pos[..., None, :]
        qp = query_pos[:, None]
        return (kp <= qp) & ((kp < self.sink_count) | (qp - kp < self.recent_count))


MaskSpec = Causal | SinkRecent
CAUSAL = Causal()


@dataclass
class ForwardTrace:
    """Per-layer states of one forward call.

    ``attention[l][h]`` is the (n_new, n_ctx) weight grid of query head ``h``;
    its columns follow ``context_positions[l][kv_head_of(h)]``, i.e. the
    resident cache entries first, then the new tokens.
    """

    positions: np.ndarray
    keys: list[np.ndarray]  # (n, H_kv, d_head) per layer
    values: list[np.ndarray]
    layer_outputs: list[np.ndarray]  # (n, d_model) per layer
    hidden: np.ndarray  # final-normed hidden states (n, d_model)
    context_positions: list[list[np.ndarray]]
    attention: Optional[list[list[np.ndarray]]] = None
    n_past: list[list[int]] = field(default_factory=list)  # resident entries per (layer, kv-head)


_WEIGHT_SCALE = {"tok_emb": 1.0, "pos_emb": 0.3}


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = np.einsum("...i,...i->...", x, x)[..., None] / x.shape[-1]
    return x / np.sqrt(ms + eps) * gain


class Model:
    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = weights
        for arr in weights.values():
            arr.setflags(write=False)
        # fused q|k|v projection per layer, derived from the named weights
        self._w_qkv = [
            np.concatenate([weights[f"layer{i}.w_q"], weights[f"layer{i}.w_k"], weights[f"layer{i}.w_v"]], axis=1)
            for i in range(config.n_layers)
        ]

    def weight_names(self) -> list[str]:
        return list(self.weights)

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def checksum(self, name: str) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.weights[name]).tobytes()).hexdigest()

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.weights["unembed"]

    def forward(
        self,
        tokens: Sequence[int] | np.ndarray,
        mask: MaskSpec = CAUSAL,
        past_cache: Optional[Sequence[LayerCache]] = None,
        positions: Optional[Sequence[int] | np.ndarray] = None,
        need_weights: bool = True,
        need_hidden: bool = True,
    ) -> ForwardTrace:
        """Run the new tokens against ``past_cache`` (never mutated).

        ``positions`` defaults to the positions right after the resident cache.
        With ``need_hidden=False`` the run stops after the last attention
        block, which is all that K/V states and attention weights depend on:
        ``hidden`` is then None and ``layer_outputs`` omits the last layer.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("forward needs a non-empty 1-D token sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab:
            raise ValueError("token id out of vocabulary range")
        if past_cache is not None and len(past_cache) != cfg.n_layers:
            raise ValueError(f"past_cache has {len(past_cache)} layers, model has {cfg.n_layers}")
        last_past = max((c.max_position() for c in past_cache), default=-1) if past_cache else -1
        if positions is None:
            positions = np.arange(last_past + 1, last_past + 1 + tokens.size, dtype=np.int64)
        else:
            positions = np.asarray(positions, dtype=np.int64)
            if positions.shape != tokens.shape:
                raise ValueError("positions must match tokens")
            if positions.size > 1 and np.any(np.diff(positions) <= 0):
                raise ValueError("positions must be strictly increasing")
        if positions[0] <= last_past:
            raise ValueError(
                f"new positions start at {int(positions[0])} but the cache already holds position {last_past}"
            )
        if positions[-1] >= cfg.max_positions:
            raise ValueError(f"position {int(positions[-1])} exceeds max_positions={cfg.max_positions}")

        w = self.weights
        n = tokens.size
        G = cfg.group_size
        scale = 1.0 / np.sqrt(cfg.d_head)  # folded into q before the score product
        x = w["tok_emb"][tokens] + w["pos_emb"][positions]

        H, d = cfg.n_kv_heads, cfg.d_head
        dq, dkv = cfg.n_q_heads * d, H * d
        keys_out, values_out, layer_outs, ctx_out, attn_out, n_past = [], [], [], [], [], []
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            h = _rmsnorm(x, w[p + "attn_norm"])
            qkv = h @ self._w_qkv[layer]
            # query heads of a group stacked along rows: (H, G * n, d)
            q = (qkv[:, :dq] * scale).reshape(n, H, G, d).transpose(1, 2, 0, 3).reshape(H, G * n, d)
            k = qkv[:, dq:dq + dkv].reshape(n, H, d)
            v = qkv[:, dq + dkv:].reshape(n, H, d)
            sizes = [0] * H if past_cache is None else past_cache[layer].head_sizes
            # heads hold different numbers of resident entries: lay each head out as
            # [resident, new, padding] with padding at a position no query may attend to
            S = max(sizes)
            if S == 0:
                KT = np.ascontiguousarray(k.transpose(1, 2, 0))
                V = np.ascontiguousarray(v.transpose(1, 0, 2))
                ctx = np.broadcast_to(positions, (H, n))
            else:
                pc = past_cache[layer]
                KT = np.zeros((H, d, S + n))
                V = np.zeros((H, S + n, d))
                ctx = np.full((H, S + n), cfg.max_positions, dtype=np.int64)
                for g, size in enumerate(sizes):
                    KT[g, :, :size] = pc.keys[g].T
                    KT[g, :, size:size + n] = k[:, g].T
                    V[g, :size] = pc.values[g]
                    V[g, size:size + n] = v[:, g]
                    ctx[g, :size] = pc.positions[g]
                    ctx[g, size:size + n] = positions
            layer_ctx = [ctx[g, :size + n] for g, size in enumerate(sizes)]
            keys_out.append(k)
            values_out.append(v)
            ctx_out.append(layer_ctx)
            n_past.append(list(sizes))
            last = not need_hidden and layer == cfg.n_layers - 1
            if last and not need_weights:
                break
            allowed = mask.allowed(positions, ctx)  # (H, n, C)
            logits = q @ KT  # (H, G * n, C)
            weights, denom = masked_exp(logits.reshape(H, G, n, -1), allowed[:, None])
            if need_weights:
                weights /= denom
                attn_out.append([weights[g, i, :, :size + n] for g, size in enumerate(sizes) for i in range(G)])
                if last:
                    break
                out = weights.reshape(H, G * n, -1) @ V
            else:
                # normalizing the (n, d) output is cheaper than the (n, C) weights
                out = (weights.reshape(H, G * n, -1) @ V) / denom.reshape(H, G * n, 1)
            out = out.reshape(H, G, n, d).transpose(2, 0, 1, 3).reshape(n, -1)
            x = x + out @ w[p + "w_o"]
            h2 = _rmsnorm(x, w[p + "mlp_norm"])
            x = x + np.maximum(h2 @ w[p + "w_up"], 0.0) @ w[p + "w_down"]
            layer_outs.append(x)
        hidden = _rmsnorm(x, w["final_norm"]) if need_hidden else None
        return ForwardTrace(
            positions=positions,
            keys=keys_out,
            values=values_out,
            layer_outputs=layer_outs,
            hidden=hidden,
            context_positions=ctx_out,
            attention=attn_out if need_weights else None,
            n_past=n_past,
        )


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dq, dkv = config.d_model, config.n_q_heads * config.d_head, config.n_kv_heads * config.d_head
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab, d),
        "pos_emb": (config.max_positions, d),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "w_q"] = (d, dq)
        shapes[p + "w_k"] = (d, dkv)
        shapes[p + "w_v"] = (d, dkv)
        shapes[p + "w_o"] = (dq, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_up"] = (d, config.d_ff)
        shapes[p + "w_down"] = (config.d_ff, d)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, config.vocab)
    return shapes


def init_model(config: ModelConfig) -> Model:
    """Fill every matrix from a PCG64 stream keyed by (seed, weight name)."""
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith("norm"):
            weights[name] = np.ones(shape)
            continue
        base = name.split(".")[-1]
        std = _WEIGHT_SCALE.get(base, 1.0 / np.sqrt(shape[0]))
        weights[name] = _rng(config.seed, name).standard_normal(shape) * std
    return Model(config, weights)


def greedy_decode(
    model: Model,
    cache: Sequence[LayerCache],
    prompt_tokens: Sequence[int],
    max_new: int,
    start_position: Optional[int] = None,
) -> list[int]:
    """Argmax decoding on a working copy of ``cache``; ties go to the lowest token id."""
    if max_new <= 0:
        return []
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("greedy_decode needs at least one prompt token")
    work = [c.with_budget(None) for c in cache]
    if start_position is None:
        start_position = max((c.max_position() for c in work), default=-1) + 1
    positions = np.arange(start_position, start_position + prompt.size)
    trace = model.forward(prompt, past_cache=work, positions=positions, need_weights=False)
    out: list[int] = []
    next_pos = int(positions[-1]) + 1
    for step in range(max_new):
        logits = model.logits(trace.hidden[-1])
        token = int(np.argmax(logits))
        out.append(token)
        if step == max_new - 1:
            break
        work = [c.append(trace.positions, k, v) for c, k, v in zip(work, trace.keys, trace.values)]
        trace = model.forward([token], past_cache=work, positions=[next_pos], need_weights=False)
        next_pos += 1
    return out


def full_cache(model: Model, tokens: Sequence[int], positions=None) -> list[LayerCache]:
    """Uncompressed cache from one causal forward over ``tokens``."""
    cfg = model.config
    trace = model.forward(tokens, positions=positions, need_weights=False, need_hidden=False)
    return [
        LayerCache.empty(cfg.n_kv_heads, cfg.d_head).append(trace.positions, k, v)
        for k, v in zip(trace.keys, trace.values)
    ]


# --- checkpoint dump ---------------------------------------------------------

_CKPT_MAGIC = b"EPKM"
_CKPT_VERSION = 1
_CFG_FIELDS = [f.name for f in fields(ModelConfig)]


def save_checkpoint(model: Model, path: str | Path) -> int:
    cfg = model.config
    header = _CKPT_MAGIC + struct.pack("<H", _CKPT_VERSION)
    header += struct.pack(f"<{len(_CFG_FIELDS)}Q", *(getattr(cfg, n) for n in _CFG_FIELDS))
    body = b"".join(model.weights[name].astype("<f8").tobytes() for name in weight_shapes(cfg))
    Path(path).write_bytes(header + body)
    return len(header) + len(body)


def load_checkpoint(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not an EPKM checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    values = struct.unpack_from(f"<{len(_CFG_FIELDS)}Q", data, 6)
    cfg = ModelConfig(**dict(zip(_CFG_FIELDS, values)))
    offset = 6 + 8 * len(_CFG_FIELDS)
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise ValueError("checkpoint truncated")
        weights[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return Model(cfg, weights)
