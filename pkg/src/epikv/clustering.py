"""Conversation segmentation, embedding and k-means++ episode discovery."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .dialogue import DEFAULT_VOCAB, ConversationHistory, render_utterances
from .numerics import cosine_rows
from .scoring import PatchedPrompt, PromptOrigin

DEFAULT_WINDOW = 4
DEFAULT_PROMPT_WINDOW = 8
DEFAULT_EMBED_DIM = 256
DEFAULT_N_INIT = 10
_WORD_RE = re.compile(r"[0-9a-z]+")


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Signed feature-hashing bag of words, L2-normalized.

    Texts with no words map to the first basis vector so every output has
    unit norm.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, salt: bytes = b"epikv-emb"):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.salt = salt

    def _raw(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for word in _WORD_RE.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8, key=self.salt).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = self._raw(text)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec = np.zeros(self.dim)
            vec[0] = 1.0
            return vec
        return vec / norm


def default_embed(text: str) -> np.ndarray:
    return _DEFAULT_EMBEDDER.embed(text)


_DEFAULT_EMBEDDER = HashEmbedder()


def embed_all(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    batch = getattr(embedder, "embed_many", None)
    if batch is not None:
        return np.asarray(batch(list(texts)), dtype=np.float64)
    return np.array([embedder.embed(t) for t in texts], dtype=np.float64).reshape(len(texts), embedder.dim)


@dataclass(frozen=True)
class Segment:
    index: int  # 1-based
    start_turn: int
    end_turn: int  # inclusive
    text: str

    @property
    def turns(self) -> range:
        return range(self.start_turn, self.end_turn + 1)

    def __len__(self) -> int:
        return self.end_turn - self.start_turn + 1


def segment_history(history: ConversationHistory, w_embed: int = DEFAULT_WINDOW) -> list[Segment]:
    if w_embed < 1:
        raise ValueError("w_embed must be >= 1")
    n = len(history)
    segments = []
    for k in range(1, math.ceil(n / w_embed) + 1):
        start = (k - 1) * w_embed
        end = min(k * w_embed, n) - 1
        text = "".join(u.render() for u in history.utterances[start:end + 1])
        segments.append(Segment(k, start, end, text))
    return segments


# --- k-means -----------------------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray  # cluster label 0..E-1 per point
    centroids: np.ndarray  # (E, d)
    sse_history: tuple[float, ...]  # within-cluster SSE after every Lloyd update
    iterations: int
    converged: bool


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            # every remaining point coincides with a center
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _repair_empty(labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        own = d2[np.arange(labels.size), labels]
        donors = counts[labels] > 1
        own = np.where(donors, own, -np.inf)
        victim = int(np.argmax(own))  # farthest point from its centroid; lowest index on ties
        labels[victim] = int(empty[0])


def _means(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.array([points[labels == c].mean(axis=0) for c in range(k)])


def _sse(points: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    diff = points - centers[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def _lloyd(points: np.ndarray, n_clusters: int, rng: np.random.Generator, max_iters: int) -> KMeansResult:
    centers = _kmeans_pp(points, n_clusters, rng)
    labels = None
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centers)
        new = _repair_empty(np.argmin(d2, axis=1), d2, n_clusters)
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        centers = _means(points, labels, n_clusters)
        history.append(_sse(points, labels, centers))
    if labels is None:  # max_iters == 0
        d2 = _sq_dists(points, centers)
        labels = _repair_empty(np.argmin(d2, axis=1), d2, n_clusters)
        centers = _means(points, labels, n_clusters)
        history.append(_sse(points, labels, centers))
    return KMeansResult(labels.astype(np.int64), centers, tuple(history), it, converged)


def run_kmeans(
    embeddings: np.ndarray | Sequence[np.ndarray],
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 100,
    n_init: int = DEFAULT_N_INIT,
) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    ``n_init`` independent seedings are drawn from one generator keyed by
    ``seed``; the run with the lowest final SSE wins (earliest on ties).
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("embeddings must be a (n, d) array")
    n = points.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(points, n_clusters, rng, max_iters)
        if best is None or result.sse_history[-1] < best.sse_history[-1]:
            best = result
    return best


def kmeans(
    embeddings, n_clusters: int, seed: int = 0, max_iters: int = 100, n_init: int = DEFAULT_N_INIT
) -> tuple[np.ndarray, np.ndarray]:
    result = run_kmeans(embeddings, n_clusters, seed, max_iters, n_init)
    return result.assignments, result.centroids


# --- episodes ----------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    episode_id: int  # 1-based
    members: tuple[int, ...]  # segment indices (1-based)
    centroid: np.ndarray
    medoid_segment: int
    prompt: PatchedPrompt
    prompt_text: str
    prompt_turns: tuple[int, int]  # inclusive turn span used for the prompt


@dataclass(frozen=True)
class EpisodeModel:
    segments: tuple[Segment, ...]
    embeddings: np.ndarray
    assignments: tuple[int, ...]  # episode id of each segment
    episodes: tuple[Episode, ...]

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([ep.centroid for ep in self.episodes])

    def episode(self, episode_id: int) -> Episode:
        return self.episodes[episode_id - 1]

    def segments_of(self, episode_id: int) -> list[Segment]:
        return [s for s, e in zip(self.segments, self.assignments) if e == episode_id]


def select_medoid(member_embeddings: np.ndarray, centroid: np.ndarray) -> int:
    """Row index maximizing cosine to ``centroid``; lowest index on ties."""
    sims = cosine_rows(member_embeddings, np.broadcast_to(centroid, member_embeddings.shape))
    sims = np.where(np.isnan(sims), -np.inf, sims)
    return int(np.argmax(sims))


def finalize_episodes(
    segments: Sequence[Segment],
    embeddings: np.ndarray,
    assignments: Sequence[int],
    history: ConversationHistory,
    prompt_window: int = DEFAULT_PROMPT_WINDOW,
    vocab: int = DEFAULT_VOCAB,
) -> EpisodeModel:
    """Centroids, medoids and medoid-anchored patched prompts.

    ``assignments`` holds 0-based cluster labels; the returned episodes are
    numbered from 1. The prompt covers ``prompt_window`` consecutive
    utterances starting at the medoid segment's first turn.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(assignments, dtype=np.int64)
    if len(segments) != embeddings.shape[0] or labels.size != len(segments):
        raise ValueError("segments, embeddings and assignments must have equal length")
    if prompt_window < 1:
        raise ValueError("prompt_window must be >= 1")
    n_clusters = int(labels.max()) + 1
    episodes = []
    for c in range(n_clusters):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise ValueError(f"cluster {c} is empty")
        centroid = embeddings[members].mean(axis=0)
        medoid = segments[int(members[select_medoid(embeddings[members], centroid)])]
        start = medoid.start_turn
        end = min(start + prompt_window, len(history)) - 1
        utts = history.utterances[start:end + 1]
        rendered = render_utterances(utts, vocab)
        episodes.append(
            Episode(
                episode_id=c + 1,
                members=tuple(segments[int(i)].index for i in members),
                centroid=centroid,
                medoid_segment=medoid.index,
                prompt=PatchedPrompt(tuple(rendered.tokens.tolist()), PromptOrigin.MEDOID),
                prompt_text="".join(u.render() for u in utts),
                prompt_turns=(start, end),
            )
        )
    return EpisodeModel(tuple(segments), embeddings, tuple(int(l) + 1 for l in labels), tuple(episodes))


def cluster_history(
    history: ConversationHistory,
    n_episodes: int,
    embedder: Embedder,
    w_embed: int = DEFAULT_WINDOW,
    prompt_window: int = DEFAULT_PROMPT_WINDOW,
    seed: int = 0,
    vocab: int = DEFAULT_VOCAB,
) -> EpisodeModel:
    """Segment, embed, cluster and finalize in one call."""
    segments = segment_history(history, w_embed)
    if n_episodes > len(segments):
        raise ValueError(f"E={n_episodes} exceeds the {len(segments)} available segments")
    embeddings = embed_all(embedder, [s.text for s in segments])
    labels, _ = kmeans(embeddings, n_episodes, seed)
    return finalize_episodes(segments, embeddings, labels, history, prompt_window, vocab)
