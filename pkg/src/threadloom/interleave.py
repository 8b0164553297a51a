"""Build interleaved multi-party streams and instruction-format training pairs.

Thread-labelled corpora usually contain one conversation at a time.  To get
training data that looks like a real multi-party channel, threads are drawn
into random groups of ``min_group``..``max_group`` and each group is merged
into one stream by repeatedly popping the head message of a randomly chosen
thread.  The target side lists the same messages grouped back by thread.

Randomness comes from numpy's PCG64 generator.  The partition step uses the
stream seeded by ``seed``; subset ``i`` uses the child stream with spawn key
``(i,)`` so subsets can be interleaved independently (and in parallel).
"""

from __future__ import annotations

import json
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Message, group_by_thread
from .errors import PreconditionError

INST_OPEN = "<s>[INST]"
INST_CLOSE = "[/INST]"
EOS = "</s>"
SEPARATOR = "\n"


@dataclass(frozen=True)
class InterleaveConfig:
    seed: int = 0
    min_group: int = 1
    max_group: int = 5

    def __post_init__(self) -> None:
        if not 1 <= self.min_group <= self.max_group:
            raise ValueError(
                f"need 1 <= min_group <= max_group, got {self.min_group}, {self.max_group}"
            )


@dataclass(frozen=True)
class TrainingPair:
    unsorted: tuple[str, ...]
    sorted: tuple[str, ...]
    rendered: str
    thread_ids: tuple[str, ...] = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {"unsorted": list(self.unsorted), "sorted": list(self.sorted), "rendered": self.rendered}


def make_rng(seed: int, index: int | None = None) -> np.random.Generator:
    """PCG64 generator for the partition step (``index=None``) or subset ``index``."""
    if index is None:
        seq = np.random.SeedSequence(seed)
    else:
        seq = np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(seq))


def partition_threads(
    labels: Sequence[str], rng: np.random.Generator, cfg: InterleaveConfig
) -> list[list[str]]:
    if not labels:
        raise PreconditionError("no thread labels to partition")
    if len(set(labels)) != len(labels):
        raise PreconditionError("thread labels must be unique")
    remaining = list(labels)
    subsets = []
    while remaining:
        size = int(rng.integers(cfg.min_group, cfg.max_group + 1))
        size = min(size, len(remaining))
        picked = sorted(rng.choice(len(remaining), size=size, replace=False).tolist())
        subsets.append([remaining[i] for i in picked])
        for i in reversed(picked):
            del remaining[i]
    return subsets


def interleave_subset(
    groups: Mapping[str, Sequence[Message]], subset: Sequence[str], rng: np.random.Generator
) -> list[Message]:
    """Merge the threads in ``subset`` keeping each thread's internal order."""
    queues = {}
    for label in subset:
        if not groups.get(label):
            raise PreconditionError(f"thread {label!r} has no messages")
        queues[label] = deque(groups[label])
    active = list(subset)
    out = []
    while active:
        i = int(rng.integers(len(active)))
        q = queues[active[i]]
        out.append(q.popleft())
        if not q:
            del active[i]
    return out


def format_training_pair(unsorted: Sequence[str], sorted_: Sequence[str], separator: str = SEPARATOR) -> str:
    if not unsorted or not sorted_:
        raise PreconditionError("both sides of a training pair need at least one message")
    return f"{INST_OPEN}{separator.join(unsorted)}{INST_CLOSE}{separator.join(sorted_)}{EOS}"


def regroup(stream: Sequence[Message]) -> list[Message]:
    """Threads in order of first appearance, each in stream order."""
    by_thread: dict[str, list[Message]] = {}
    for m in stream:
        by_thread.setdefault(m.gold_thread, []).append(m)
    return [m for msgs in by_thread.values() for m in msgs]


def build_dataset(corpus: Corpus | Sequence[Message], cfg: InterleaveConfig) -> list[TrainingPair]:
    groups = group_by_thread(corpus)
    if not groups:
        return []
    subsets = partition_threads(list(groups), make_rng(cfg.seed), cfg)
    pairs = []
    for idx, subset in enumerate(subsets):
        stream = interleave_subset(groups, subset, make_rng(cfg.seed, idx))
        unsorted = tuple(m.text for m in stream)
        target = tuple(m.text for m in regroup(stream))
        pairs.append(
            TrainingPair(
                unsorted=unsorted,
                sorted=target,
                rendered=format_training_pair(unsorted, target),
                thread_ids=tuple(subset),
            )
        )
    return pairs


def interleave_stream(
    corpus: Corpus | Sequence[Message], seed: int, start_ts: int = 0, step_ms: int = 1000
) -> Corpus:
    """Interleave *all* threads of ``corpus`` into one stream with fresh timestamps.

    Used to manufacture evaluation streams; ids and labels are kept, timestamps
    are rewritten as ``start_ts + i * step_ms`` in stream order.
    """
    groups = group_by_thread(corpus)
    stream = interleave_subset(groups, list(groups), make_rng(seed, 0))
    return Corpus(
        tuple(
            Message(m.id, start_ts + i * step_ms, m.speaker, m.text, m.gold_thread)
            for i, m in enumerate(stream)
        )
    )


def write_dataset(pairs: Sequence[TrainingPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False))
            fh.write("\n")
