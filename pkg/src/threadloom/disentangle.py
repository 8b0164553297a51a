"""Online thread assignment by minimum perplexity.

Every incoming message is scored against each live thread by the perplexity
of the thread's entries joined with the message.  The message joins the
lowest-scoring thread unless even that score exceeds ``threshold``, in which
case it opens a new thread.  Equal scores go to the oldest thread.

``conditional=True`` scores only the message's own tokens given the thread as
context, i.e. ``exp(-(lp(thread + msg) - lp(thread)) / n_msg)``.  It removes
the bias full-join scoring has toward threads that are intrinsically easy to
predict, and is what makes the threshold meaningful on short messages.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import AssignmentRecord, Corpus, Decision, Message
from .errors import PreconditionError
from .lm_core import LanguageModelScorer
from .topic import TopicConfig, maybe_compress

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e9


@dataclass(frozen=True)
class DetectionConfig:
    threshold: float = DEFAULT_THRESHOLD
    max_len: int = 20
    join_separator: str = "\n"
    conditional: bool = False
    speaker_prefix: bool = False

    def __post_init__(self) -> None:
        if not self.threshold > 1:
            raise ValueError("threshold must be > 1 (perplexity is never below 1)")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def render(self, message: Message) -> str:
        return f"{message.speaker}: {message.text}" if self.speaker_prefix else message.text


@dataclass
class Thread:
    id: str
    messages: list[Message] = field(default_factory=list)
    topic: str | None = None
    request_ts: int | None = None
    weight: float = 0.0

    def entries(self, config: DetectionConfig | None = None) -> list[str]:
        """Topic header (if any) followed by the message texts, oldest first."""
        render = config.render if config else (lambda m: m.text)
        head = [self.topic] if self.topic else []
        return head + [render(m) for m in self.messages]

    def copy(self) -> "Thread":
        return replace(self, messages=list(self.messages))


@dataclass
class ThreadStore:
    config: DetectionConfig = field(default_factory=DetectionConfig)
    threads: list[Thread] = field(default_factory=list)
    next_index: int = 0

    def new_thread(self, message: Message) -> Thread:
        t = Thread(id=f"t{self.next_index}", messages=[message], request_ts=message.timestamp)
        self.next_index += 1
        self.threads.append(t)
        return t

    def get(self, thread_id: str) -> Thread:
        for t in self.threads:
            if t.id == thread_id:
                return t
        raise KeyError(thread_id)

    def index_of(self, thread_id: str) -> int:
        for i, t in enumerate(self.threads):
            if t.id == thread_id:
                return i
        raise KeyError(thread_id)

    def labels(self) -> dict[str, str]:
        return {m.id: t.id for t in self.threads for m in t.messages}

    def copy(self) -> "ThreadStore":
        return ThreadStore(self.config, [t.copy() for t in self.threads], self.next_index)

    def __len__(self) -> int:
        return len(self.threads)


def score_candidate(
    scorer: LanguageModelScorer,
    thread: Thread,
    message: Message,
    config: DetectionConfig = DetectionConfig(),
) -> float:
    entries = thread.entries(config)
    if not entries:
        raise PreconditionError(f"thread {thread.id!r} is empty")
    sep = config.join_separator
    joined = scorer.perplexity(sep.join(entries + [config.render(message)]))
    if not config.conditional:
        return joined.value
    context = scorer.perplexity(sep.join(entries))
    n_new = joined.n_tokens - context.n_tokens
    if n_new <= 0:
        # message adds no tokens: nothing to be surprised by
        return 1.0
    return math.exp(-(joined.log_prob - context.log_prob) / n_new)


def candidate_scores(
    store: ThreadStore,
    scorer: LanguageModelScorer,
    message: Message,
    executor: Executor | None = None,
) -> list[float]:
    """Score ``message`` against every live thread, in thread-creation order."""
    if executor is None:
        return [score_candidate(scorer, t, message, store.config) for t in store.threads]
    futures = [executor.submit(score_candidate, scorer, t, message, store.config) for t in store.threads]
    return [f.result() for f in futures]


def assign_message(
    store: ThreadStore,
    scorer: LanguageModelScorer,
    message: Message,
    executor: Executor | None = None,
) -> AssignmentRecord:
    """Place ``message`` in ``store`` and report the decision.

    All scoring happens before the store is touched, so a scorer failure
    leaves it unmodified.
    """
    scores = candidate_scores(store, scorer, message, executor)
    if scores:
        best = min(range(len(scores)), key=scores.__getitem__)  # first index wins ties
        best_score = scores[best]
    else:
        best, best_score = -1, math.inf

    if best < 0 or best_score > store.config.threshold:
        thread = store.new_thread(message)
        decision = Decision.NEW_THREAD
    else:
        thread = store.threads[best]
        thread.messages.append(message)
        if thread.request_ts is None:
            thread.request_ts = message.timestamp
        decision = Decision.APPENDED
    logger.debug("event=assign message=%s thread=%s decision=%s score=%.6g",
                 message.id, thread.id, decision.value, best_score)
    return AssignmentRecord(message.id, thread.id, decision, best_score)


def compress_thread(store: ThreadStore, thread_id: str, topic_cfg: TopicConfig) -> bool:
    """Apply topic compression to one thread in place; True if it gained a new header."""
    i = store.index_of(thread_id)
    before = store.threads[i]
    after = maybe_compress(before, store.config.max_len, topic_cfg)
    store.threads[i] = after
    return after is not before


def detect_stream(
    corpus: Corpus | Sequence[Message],
    config: DetectionConfig,
    scorer: LanguageModelScorer,
    topic_cfg: TopicConfig = TopicConfig(),
    executor: Executor | None = None,
) -> tuple[ThreadStore, list[AssignmentRecord]]:
    messages = list(corpus)
    for a, b in zip(messages, messages[1:]):
        if b.sort_key < a.sort_key:
            raise PreconditionError(
                f"stream is not in timestamp order: {b.id!r} (ts={b.timestamp}) follows {a.id!r} (ts={a.timestamp})"
            )
    store = ThreadStore(config)
    records = []
    for m in messages:
        rec = assign_message(store, scorer, m, executor)
        compress_thread(store, rec.predicted_thread, topic_cfg)
        records.append(rec)
    return store, records


def threshold_grid(text: str) -> list[float]:
    """Parse ``lo:hi:log[:n]`` or ``lo:hi:lin[:n]`` (n defaults to 25)."""
    parts = text.split(":")
    if len(parts) not in (3, 4) or parts[2] not in ("log", "lin"):
        raise ValueError(f"bad grid {text!r}; expected lo:hi:log|lin[:n]")
    lo, hi = float(parts[0]), float(parts[1])
    n = int(parts[3]) if len(parts) == 4 else 25
    if not 1 < lo <= hi or n < 1:
        raise ValueError(f"bad grid {text!r}; need 1 < lo <= hi and n >= 1")
    if n == 1:
        return [lo]
    pts = np.geomspace(lo, hi, n) if parts[2] == "log" else np.linspace(lo, hi, n)
    return [float(x) for x in pts]


def calibrate_threshold(
    corpus: Corpus,
    grid: Sequence[float],
    scorer: LanguageModelScorer,
    config: DetectionConfig = DetectionConfig(),
    topic_cfg: TopicConfig = TopicConfig(),
    refine: int = 1,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the threshold with the best one-to-one accuracy on a labelled stream.

    After scanning ``grid``, each of ``refine`` rounds rescans a geometric grid
    of the same size spanning the best point's two neighbours.  Ties keep the
    earliest (smallest) threshold.  Returns the winner and every
    ``(threshold, accuracy)`` evaluated, sorted by threshold.
    """
    from .evalharness import one_to_one_accuracy

    grid = sorted(set(float(t) for t in grid))
    if not grid:
        raise ValueError("empty threshold grid")
    gold = corpus.gold_labels()
    seen: dict[float, float] = {}

    def accuracy(t: float) -> float:
        if t not in seen:
            store, _ = detect_stream(corpus, replace(config, threshold=t), scorer, topic_cfg)
            seen[t] = one_to_one_accuracy(store.labels(), gold)
            logger.info("event=calibrate threshold=%.6g accuracy=%.6f", t, seen[t])
        return seen[t]

    for round_ in range(refine + 1):
        accs = [accuracy(t) for t in grid]
        best = max(range(len(grid)), key=lambda i: (accs[i], -i))
        if round_ == refine or len(grid) < 2:
            break
        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, len(grid) - 1)]
        grid = sorted(set(float(x) for x in np.geomspace(lo, hi, len(grid))))
    curve = sorted(seen.items())
    best_acc = max(a for _, a in curve)
    best_t = next(t for t, a in curve if a == best_acc)
    return best_t, curve
