"""Message data model and line-delimited JSON IO.

Message lines look like::

    {"id": "m1", "ts": 1712345678901, "speaker": "A", "text": "hi", "thread_id": "t7"}

``thread_id`` is optional.  Assignment lines look like::

    {"message_id": "m1", "predicted_thread": "t0", "decision": "new", "score": 12.5}

An infinite score (a new thread opened on an empty store) is written as ``null``.
"""

from __future__ import annotations

import enum
import json
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import CorpusError


@dataclass(frozen=True)
class Message:
    id: str
    timestamp: int  # milliseconds since epoch
    speaker: str
    text: str
    gold_thread: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise CorpusError("message id must be a non-empty string")
        if not isinstance(self.text, str) or not self.text.strip():
            raise CorpusError(f"message {self.id!r} has empty text")
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int):
            raise CorpusError(f"message {self.id!r}: timestamp must be an integer")
        if self.timestamp < 0:
            raise CorpusError(f"message {self.id!r}: negative timestamp")

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.timestamp, self.id)

    def to_json(self) -> dict:
        row = {"id": self.id, "ts": self.timestamp, "speaker": self.speaker, "text": self.text}
        if self.gold_thread is not None:
            row["thread_id"] = self.gold_thread
        return row

    @classmethod
    def from_json(cls, row: dict) -> "Message":
        if not isinstance(row, dict):
            raise CorpusError("record is not a JSON object")
        missing = [k for k in ("id", "ts", "speaker", "text") if k not in row]
        if missing:
            raise CorpusError(f"missing field(s): {', '.join(missing)}")
        gold = row.get("thread_id")
        if gold is not None and not isinstance(gold, str):
            gold = str(gold)
        return cls(
            id=row["id"],
            timestamp=row["ts"],
            speaker=str(row["speaker"]),
            text=row["text"],
            gold_thread=gold,
        )


@dataclass(frozen=True)
class Corpus:
    """An ordered, immutable collection of messages with unique ids.

    Construction does not reorder; use :meth:`sorted` or :func:`load_corpus`
    to obtain the canonical (timestamp, id) order.
    """

    messages: tuple[Message, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        seen: set[str] = set()
        for m in self.messages:
            if m.id in seen:
                raise CorpusError(f"duplicate message id {m.id!r}")
            seen.add(m.id)

    def __len__(self) -> int:
        return len(self.messages)

    def __iter__(self) -> Iterator[Message]:
        return iter(self.messages)

    def __getitem__(self, i):
        return self.messages[i]

    def is_sorted(self) -> bool:
        return all(a.sort_key <= b.sort_key for a, b in zip(self.messages, self.messages[1:]))

    def sorted(self) -> "Corpus":
        return Corpus(tuple(sorted(self.messages, key=lambda m: m.sort_key)))

    def gold_labels(self) -> dict[str, str]:
        out = {}
        for m in self.messages:
            if m.gold_thread is None:
                raise CorpusError(f"message {m.id!r} has no thread_id label")
            out[m.id] = m.gold_thread
        return out

    def texts(self) -> list[str]:
        return [m.text for m in self.messages]


class Decision(str, enum.Enum):
    NEW_THREAD = "new"
    APPENDED = "append"


@dataclass(frozen=True)
class AssignmentRecord:
    message_id: str
    predicted_thread: str
    decision: Decision
    score: float

    def to_json(self) -> dict:
        return {
            "message_id": self.message_id,
            "predicted_thread": self.predicted_thread,
            "decision": self.decision.value,
            "score": self.score if math.isfinite(self.score) else None,
        }

    @classmethod
    def from_json(cls, row: dict) -> "AssignmentRecord":
        try:
            score = row["score"]
            return cls(
                message_id=row["message_id"],
                predicted_thread=row["predicted_thread"],
                decision=Decision(row["decision"]),
                score=math.inf if score is None else float(score),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise CorpusError(f"malformed assignment record: {exc}") from exc


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def _write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def load_corpus(path: str | Path, sort: bool = True) -> Corpus:
    """Read a message file.

    With ``sort=False`` the file order is kept, which is what stream
    processing wants: an out-of-order stream is then reported downstream
    instead of being silently repaired.
    """
    messages = []
    seen: dict[str, int] = {}
    for lineno, row in _read_jsonl(path):
        try:
            msg = Message.from_json(row)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        if msg.id in seen:
            raise CorpusError(
                f"{path}:{lineno}: duplicate message id {msg.id!r} (first seen on line {seen[msg.id]})"
            )
        seen[msg.id] = lineno
        messages.append(msg)
    corpus = Corpus(tuple(messages))
    return corpus.sorted() if sort else corpus


def write_corpus(corpus: Corpus | Sequence[Message], path: str | Path) -> None:
    _write_jsonl((m.to_json() for m in corpus), path)


def group_by_thread(corpus: Corpus | Sequence[Message]) -> dict[str, list[Message]]:
    """Group messages by gold label; groups appear in order of first occurrence."""
    groups: dict[str, list[Message]] = {}
    for m in corpus:
        if m.gold_thread is None:
            raise CorpusError(f"message {m.id!r} has no thread_id label")
        groups.setdefault(m.gold_thread, []).append(m)
    return groups


def write_assignments(records: Iterable[AssignmentRecord], path: str | Path) -> None:
    _write_jsonl((r.to_json() for r in records), path)


def load_assignments(path: str | Path) -> list[AssignmentRecord]:
    out = []
    for lineno, row in _read_jsonl(path):
        try:
            out.append(AssignmentRecord.from_json(row))
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return out
