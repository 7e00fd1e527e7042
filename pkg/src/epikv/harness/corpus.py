"""Seeded topic-blocked synthetic conversations.

Each topic draws from its own pool of pseudo-words, so topical structure
is recoverable by any bag-of-words embedder. Queries reuse the words of one
earlier utterance of their topic, which gives the exact-question oracle
something concrete to look for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dialogue import ConversationHistory, Query, QuerySet, Role, Utterance, dump_conversation

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou")
QUESTION_WORDS = ("what", "did", "we", "say", "about")


@dataclass(frozen=True)
class SyntheticConversation:
    history: ConversationHistory
    queries: QuerySet
    topic_of_turn: tuple[int, ...]
    pools: tuple[tuple[str, ...], ...]

    def dumps(self) -> str:
        return dump_conversation(self.history, self.queries)


def _pseudo_word(rng: np.random.Generator) -> str:
    n_syll = int(rng.integers(2, 4))
    return "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] for _ in range(n_syll))


def word_pools(topics: int, pool_size: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
    """Pairwise disjoint pools of distinct pseudo-words."""
    seen = set(QUESTION_WORDS)
    pools = []
    for _ in range(topics):
        pool: list[str] = []
        while len(pool) < pool_size:
            word = _pseudo_word(rng)
            if word not in seen:
                seen.add(word)
                pool.append(word)
        pools.append(tuple(pool))
    return pools


def synth_corpus(
    topics: int,
    turns_per_topic: int,
    queries_per_topic: int,
    seed: int = 0,
    pool_size: int = 24,
    words_per_turn: tuple[int, int] = (6, 12),
    interleave_queries: bool = False,
) -> SyntheticConversation:
    """Generate ``topics`` consecutive topic blocks, one session each.

    Queries are grouped by topic in topic order unless
    ``interleave_queries`` is set, in which case they cycle through topics
    (the worst case for cache residency).
    """
    if min(topics, turns_per_topic, queries_per_topic, pool_size) < 1:
        raise ValueError("topics, turns_per_topic, queries_per_topic and pool_size must be >= 1")
    lo, hi = words_per_turn
    if not 1 <= lo <= hi:
        raise ValueError("words_per_turn must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(seed)
    pools = word_pools(topics, pool_size, rng)
    utts: list[Utterance] = []
    topic_of_turn: list[int] = []
    boundaries: list[int] = []
    for t, pool in enumerate(pools):
        if t:
            boundaries.append(len(utts))
        for j in range(turns_per_topic):
            n_words = int(rng.integers(lo, hi + 1))
            words = [pool[i] for i in rng.integers(len(pool), size=n_words)]
            role = Role.SPEAKER_1 if j % 2 == 0 else Role.SPEAKER_2
            utts.append(Utterance(role, " ".join(words), len(utts)))
            topic_of_turn.append(t)

    per_topic: list[list[tuple[str, str]]] = []
    for t in range(topics):
        turns = [i for i, tt in enumerate(topic_of_turn) if tt == t]
        items = []
        for _ in range(queries_per_topic):
            source = utts[turns[int(rng.integers(len(turns)))]]
            words = source.text.split()
            k = max(2, len(words) // 2)
            start = int(rng.integers(0, len(words) - k + 1))
            asked = words[start:start + k]
            items.append((" ".join(QUESTION_WORDS + tuple(asked)), source.text))
        per_topic.append(items)

    if interleave_queries:
        order = [(t, i) for i in range(queries_per_topic) for t in range(topics)]
    else:
        order = [(t, i) for t in range(topics) for i in range(queries_per_topic)]
    queries = tuple(
        Query(n, per_topic[t][i][0], per_topic[t][i][1], f"topic{t}") for n, (t, i) in enumerate(order)
    )
    history = ConversationHistory(tuple(utts), tuple(boundaries))
    return SyntheticConversation(history, QuerySet(queries), tuple(topic_of_turn), tuple(pools))
