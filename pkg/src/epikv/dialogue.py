"""Conversation data model, JSONL ingestion and the toy word-hash tokenizer."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

DEFAULT_VOCAB = 4096
_WORD_RE = re.compile(r"[0-9a-z]+")


class ConversationFormatError(ValueError):
    """Raised for unreadable conversation files; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Role(str, enum.Enum):
    SPEAKER_1 = "speaker_1"
    SPEAKER_2 = "speaker_2"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Utterance:
    role: Role
    text: str
    turn_index: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"turn {self.turn_index}: utterance text is empty")
        object.__setattr__(self, "role", Role(self.role))

    def render(self) -> str:
        return f"{self.role.value}: {self.text}\n"


@dataclass(frozen=True)
class ConversationHistory:
    utterances: tuple[Utterance, ...]
    session_boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.utterances:
            raise ValueError("conversation history needs at least one utterance")
        for expected, utt in enumerate(self.utterances):
            if utt.turn_index != expected:
                raise ValueError(
                    f"turn_index must run 0..N-1 in order; got {utt.turn_index} at slot {expected}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    @classmethod
    def from_turns(cls, turns: Iterable[tuple[str, str]], session_boundaries=()) -> "ConversationHistory":
        utts = tuple(Utterance(Role(role), text, i) for i, (role, text) in enumerate(turns))
        return cls(utts, tuple(session_boundaries))


@dataclass(frozen=True)
class Query:
    query_index: int
    text: str
    gold_answer: Optional[str] = None
    topic_label: Optional[str] = None


@dataclass(frozen=True)
class QuerySet:
    queries: tuple[Query, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i: int) -> Query:
        return self.queries[i]


def parse_conversation(stream: Iterable[str] | str) -> tuple[ConversationHistory, QuerySet]:
    """Parse the JSONL conversation format.

    ``stream`` is either the whole file content or an iterable of lines.
    A ``session_break`` record marks the index of the next turn as a
    session boundary. Unknown fields are ignored.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    turns: list[Utterance] = []
    boundaries: list[int] = []
    queries: list[Query] = []
    saw_record = False
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        saw_record = True
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConversationFormatError(f"malformed JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise ConversationFormatError("record is not a JSON object", lineno)
        kind = record.get("kind")
        if kind == "turn":
            try:
                turns.append(Utterance(Role(record["role"]), str(record["text"]), len(turns)))
            except KeyError as exc:
                raise ConversationFormatError(f"turn record missing {exc.args[0]!r}", lineno) from None
            except ValueError as exc:
                raise ConversationFormatError(str(exc), lineno) from None
        elif kind == "session_break":
            if len(turns) not in boundaries:
                boundaries.append(len(turns))
        elif kind == "query":
            if "text" not in record:
                raise ConversationFormatError("query record missing 'text'", lineno)
            queries.append(Query(len(queries), str(record["text"]), record.get("gold"), record.get("topic")))
        else:
            raise ConversationFormatError(f"unknown record kind {kind!r}", lineno)
    if not saw_record:
        raise ConversationFormatError("empty conversation file")
    if not turns:
        raise ConversationFormatError("conversation has no turn records")
    return ConversationHistory(tuple(turns), tuple(boundaries)), QuerySet(tuple(queries))


def dump_conversation(history: ConversationHistory, queries: QuerySet | None = None) -> str:
    """Serialize back to the JSONL format accepted by :func:`parse_conversation`."""
    lines = []
    boundaries = set(history.session_boundaries)
    for utt in history.utterances:
        if utt.turn_index in boundaries:
            lines.append(json.dumps({"kind": "session_break"}))
        lines.append(json.dumps({"kind": "turn", "role": utt.role.value, "text": utt.text}))
    if len(history) in boundaries:
        lines.append(json.dumps({"kind": "session_break"}))
    for q in queries or ():
        rec = {"kind": "query", "text": q.text}
        if q.gold_answer is not None:
            rec["gold"] = q.gold_answer
        if q.topic_label is not None:
            rec["topic"] = q.topic_label
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def word_hash(word: str, buckets: int, salt: bytes = b"epikv-tok") -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8, key=salt).digest()
    return int.from_bytes(digest, "little") % buckets


def separator_token(vocab: int = DEFAULT_VOCAB) -> int:
    """Turn separator; reserved as the last id so no word can hash onto it."""
    return vocab - 1


def tokenize(text: str, vocab: int = DEFAULT_VOCAB) -> list[int]:
    """Lowercase, split on non-alphanumerics and hash each word into ``[0, vocab - 1)``."""
    return [word_hash(w, vocab - 1) for w in _WORD_RE.findall(text.lower())]


@dataclass(frozen=True)
class RenderedHistory:
    tokens: np.ndarray  # int64 token ids
    turn_of_token: np.ndarray  # turn_index per position
    roles: tuple[Role, ...]  # role per position

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def source_map(self) -> list[tuple[int, Role]]:
        return list(zip(self.turn_of_token.tolist(), self.roles))

    def turn_span(self, turn: int) -> tuple[int, int]:
        """Half-open token range [start, stop) covering ``turn`` (its separator included)."""
        idx = np.flatnonzero(self.turn_of_token == turn)
        if idx.size == 0:
            return (0, 0)
        return int(idx[0]), int(idx[-1]) + 1


def render_utterances(utterances: Iterable[Utterance], vocab: int = DEFAULT_VOCAB) -> RenderedHistory:
    tokens: list[int] = []
    turns: list[int] = []
    roles: list[Role] = []
    sep = separator_token(vocab)
    for n, utt in enumerate(utterances):
        if n:
            # the separator belongs to the turn it terminates
            tokens.append(sep)
            turns.append(turns[-1])
            roles.append(roles[-1])
        ids = tokenize(utt.render(), vocab)
        tokens.extend(ids)
        turns.extend([utt.turn_index] * len(ids))
        roles.extend([utt.role] * len(ids))
    return RenderedHistory(np.asarray(tokens, dtype=np.int64), np.asarray(turns, dtype=np.int64), tuple(roles))


def render_history_tokens(history: ConversationHistory, vocab: int = DEFAULT_VOCAB) -> RenderedHistory:
    """Render every turn as ``"role: text\\n"`` joined by one separator token per gap."""
    return render_utterances(history.utterances, vocab)
