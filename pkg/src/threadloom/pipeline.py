"""End-to-end orchestration.

Messages go through detection, topic compression and a priority update as
they arrive; no text is generated on that path.  Responses are produced on
demand by popping the most urgent thread and prompting the generator with its
topic header plus the last ``last_n`` messages.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

from .corpus import AssignmentRecord, Corpus, Message
from .disentangle import DetectionConfig, Thread, ThreadStore, assign_message, compress_thread
from .errors import PreconditionError
from .evalharness import pairwise_f1
from .lm_core import LanguageModelScorer
from .priority import DEFAULT_ALPHA, PriorityQueue, WeightTable, thread_weight
from .topic import TopicConfig

logger = logging.getLogger(__name__)

STATE_VERSION = 1


class TextGenerator(Protocol):
    def generate(self, prompt: str, max_tokens: int) -> str: ...


@dataclass(frozen=True)
class PipelineConfig:
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    topic: TopicConfig = field(default_factory=TopicConfig)
    alpha: float = DEFAULT_ALPHA
    last_n: int = 5
    max_tokens: int = 128
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if not 1 <= self.last_n <= self.detection.max_len:
            raise ValueError(f"last_n must lie in [1, max_len={self.detection.max_len}]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class CompressionEvent:
    thread_id: str
    topic: str


@dataclass(frozen=True)
class QueueUpdate:
    thread_id: str
    keyword_weight: float
    request_ts: int
    key: float


@dataclass(frozen=True)
class ResponseEvent:
    thread_id: str
    prompt: str
    response: str
    popped_key: float
    wall_time: float  # seconds

    def to_json(self, timing: bool = False) -> dict:
        row = {
            "thread_id": self.thread_id,
            "prompt": self.prompt,
            "response": self.response,
            "popped_key": self.popped_key,
        }
        if timing:
            row["wall_time"] = self.wall_time
        return row


@dataclass
class PipelineState:
    config: PipelineConfig
    scorer: LanguageModelScorer
    weights: WeightTable = field(default_factory=WeightTable)
    store: ThreadStore = None
    queue: PriorityQueue = None

    def __post_init__(self) -> None:
        if self.store is None:
            self.store = ThreadStore(self.config.detection)
        if self.queue is None:
            self.queue = PriorityQueue(self.config.alpha)

    # persistence
    def to_json(self) -> dict:
        messages = [m for t in self.store.threads for m in t.messages]
        messages.sort(key=lambda m: m.sort_key)
        return {
            "version": STATE_VERSION,
            "alpha": self.queue.alpha,
            "next_index": self.store.next_index,
            "messages": [m.to_json() for m in messages],
            "threads": [
                {
                    "id": t.id,
                    "topic": t.topic,
                    "messages": [m.id for m in t.messages],
                    "weight": t.weight,
                    "request_ts": t.request_ts,
                }
                for t in self.store.threads
            ],
            "queue": [e.to_json() for e in self.queue.entries()],
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, obj: dict, config: PipelineConfig, scorer, weights: WeightTable | None = None) -> "PipelineState":
        if obj.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported state version {obj.get('version')!r}")
        by_id = {m.id: m for m in (Message.from_json(r) for r in obj["messages"])}
        threads = [
            Thread(
                id=t["id"],
                messages=[by_id[mid] for mid in t["messages"]],
                topic=t.get("topic"),
                request_ts=t.get("request_ts"),
                weight=float(t.get("weight", 0.0)),
            )
            for t in obj["threads"]
        ]
        store = ThreadStore(config.detection, threads, int(obj.get("next_index", len(threads))))
        queue = PriorityQueue(config.alpha)
        for e in obj["queue"]:
            queue.upsert(e["thread_id"], e["keyword_weight"], e["request_ts"])
        return cls(config, scorer, weights or WeightTable(), store, queue)

    @classmethod
    def load(cls, path: str | Path, config: PipelineConfig, scorer, weights=None) -> "PipelineState":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), config, scorer, weights)


def build_prompt(thread: Thread, last_n: int, separator: str = "\n") -> str:
    """Topic header (if any) plus the ``last_n`` most recent messages, oldest first."""
    if not thread.messages:
        raise PreconditionError(f"thread {thread.id!r} has no messages")
    if last_n < 1:
        raise PreconditionError("last_n must be >= 1")
    parts = [m.text for m in thread.messages[-last_n:]]
    if thread.topic:
        parts.insert(0, thread.topic)
    return separator.join(parts)


def process_message(state: PipelineState, message: Message) -> list:
    """Detect, compress and re-prioritise for one message.

    Returns ``[AssignmentRecord, (CompressionEvent,) QueueUpdate]``.  The
    generator is never touched here.  On any failure the store and queue are
    restored to their pre-message state.
    """
    store = state.store
    n_threads, next_index = len(store.threads), store.next_index
    undo = [(t, len(t.messages), t.topic, t.request_ts, t.weight) for t in store.threads]
    try:
        record = assign_message(store, state.scorer, message)
        events: list = [record]
        if compress_thread(store, record.predicted_thread, state.config.topic):
            thread = store.get(record.predicted_thread)
            events.append(CompressionEvent(thread.id, thread.topic))
        thread = store.get(record.predicted_thread)
        weight = thread_weight(thread, state.weights, state.config.detection.join_separator)
        entry = state.queue.upsert(thread.id, weight, thread.request_ts)
        thread.weight = weight
        events.append(QueueUpdate(thread.id, weight, entry.request_ts, entry.key))
        return events
    except Exception:
        del store.threads[n_threads:]
        store.next_index = next_index
        for i, (t, n_msgs, topic, request_ts, weight) in enumerate(undo):
            del t.messages[n_msgs:]
            t.topic, t.request_ts, t.weight = topic, request_ts, weight
            store.threads[i] = t
        raise


def respond_next(state: PipelineState, generator: TextGenerator, clock=time.perf_counter) -> ResponseEvent:
    """Answer the most urgent thread.

    The thread leaves the queue and its ``request_ts`` is cleared until its
    next message.  If generation fails the entry goes back with its original
    key and the error propagates.
    """
    entry = state.queue.pop_entry()
    thread = state.store.get(entry.thread_id)
    prompt = build_prompt(thread, state.config.last_n, state.config.detection.join_separator)
    t0 = clock()
    try:
        response = generator.generate(prompt, state.config.max_tokens)
    except Exception:
        state.queue.upsert(entry.thread_id, entry.keyword_weight, entry.request_ts)
        raise
    elapsed = clock() - t0
    thread.request_ts = None
    logger.info("event=respond thread=%s key=%.6g wall_time=%.6f", thread.id, entry.key, elapsed)
    return ResponseEvent(thread.id, prompt, response, entry.key, elapsed)


@dataclass
class BatchResult:
    assignments: list[AssignmentRecord]
    responses: list[ResponseEvent]
    metrics: dict
    timing: dict
    state: PipelineState


def run_batch(
    corpus: Corpus | Sequence[Message],
    config: PipelineConfig,
    scorer: LanguageModelScorer,
    generator: TextGenerator,
    weights: WeightTable | None = None,
) -> BatchResult:
    """Replay ``corpus`` through :func:`process_message`, then drain the queue.

    ``metrics`` is deterministic for deterministic backends; wall-clock numbers
    live in ``timing`` only.
    """
    messages = list(corpus)
    for a, b in zip(messages, messages[1:]):
        if b.sort_key < a.sort_key:
            raise PreconditionError(f"stream is not in timestamp order at {b.id!r}")
    state = PipelineState(config, scorer, weights or WeightTable())
    assignments: list[AssignmentRecord] = []
    n_compressions = 0
    t0 = time.perf_counter()
    for m in messages:
        events = process_message(state, m)
        assignments.append(events[0])
        n_compressions += sum(isinstance(e, CompressionEvent) for e in events)
    t1 = time.perf_counter()
    responses = []
    while len(state.queue):
        responses.append(respond_next(state, generator))
    t2 = time.perf_counter()

    metrics: dict = {
        "messages": len(messages),
        "threads": len(state.store.threads),
        "responses": len(responses),
        "compressions": n_compressions,
    }
    if messages and all(m.gold_thread is not None for m in messages):
        gold = {m.id: m.gold_thread for m in messages}
        metrics["clustering"] = pairwise_f1(state.store.labels(), gold).to_json()
    timing = {
        "detect_seconds": t1 - t0,
        "respond_seconds": t2 - t1,
        "mean_response_seconds": (sum(r.wall_time for r in responses) / len(responses)) if responses else 0.0,
    }
    return BatchResult(assignments, responses, metrics, timing, state)


def with_threshold(config: PipelineConfig, threshold: float) -> PipelineConfig:
    return replace(config, detection=replace(config.detection, threshold=threshold))
