"""Clustering metrics against gold thread labels, latency comparison, and
synthetic separable corpora for calibration and benchmarking."""

from __future__ import annotations

import time
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import Corpus, Message
from .errors import PreconditionError
from .interleave import interleave_stream, make_rng


@dataclass(frozen=True)
class ClusteringMetrics:
    pairwise_precision: float
    pairwise_recall: float
    pairwise_f1: float
    one_to_one_accuracy: float
    thread_count_predicted: int
    thread_count_gold: int

    def to_json(self) -> dict:
        return asdict(self)


def _check_ids(predicted: Mapping[str, str], gold: Mapping[str, str]) -> None:
    if predicted.keys() != gold.keys():
        only_p = sorted(set(predicted) - set(gold))[:3]
        only_g = sorted(set(gold) - set(predicted))[:3]
        raise PreconditionError(
            f"message id sets differ (predicted-only {only_p}, gold-only {only_g})"
        )


def _contingency(predicted: Mapping[str, str], gold: Mapping[str, str]) -> np.ndarray:
    p_ids = {c: i for i, c in enumerate(sorted(set(predicted.values())))}
    g_ids = {c: j for j, c in enumerate(sorted(set(gold.values())))}
    table = np.zeros((len(p_ids), len(g_ids)), dtype=np.int64)
    for mid, p in predicted.items():
        table[p_ids[p], g_ids[gold[mid]]] += 1
    return table


def _pairs(n: np.ndarray) -> int:
    return int((n * (n - 1) // 2).sum())


def one_to_one_accuracy(predicted: Mapping[str, str], gold: Mapping[str, str]) -> float:
    """Best one-to-one matching of predicted to gold threads, as a fraction of messages."""
    _check_ids(predicted, gold)
    if not gold:
        return 1.0
    table = _contingency(predicted, gold)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / len(gold)


def pairwise_f1(predicted: Mapping[str, str], gold: Mapping[str, str]) -> ClusteringMetrics:
    """Precision/recall/F1 over unordered same-thread message pairs.

    When neither labelling has any same-thread pair all three are 1; when only
    one side has pairs the other side's undefined ratio is reported as 0.
    """
    _check_ids(predicted, gold)
    table = _contingency(predicted, gold) if gold else np.zeros((0, 0), dtype=np.int64)
    tp = _pairs(table)
    pred_pairs = _pairs(table.sum(axis=1))
    gold_pairs = _pairs(table.sum(axis=0))
    if pred_pairs == 0 and gold_pairs == 0:
        precision = recall = f1 = 1.0
    else:
        precision = tp / pred_pairs if pred_pairs else 0.0
        recall = tp / gold_pairs if gold_pairs else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClusteringMetrics(
        pairwise_precision=precision,
        pairwise_recall=recall,
        pairwise_f1=f1,
        one_to_one_accuracy=one_to_one_accuracy(predicted, gold),
        thread_count_predicted=len(set(predicted.values())),
        thread_count_gold=len(set(gold.values())),
    )


@dataclass(frozen=True)
class LatencyReport:
    mean_score_time: float  # seconds
    mean_generate_time: float
    speed_ratio: float
    n_samples: int

    def to_json(self) -> dict:
        return asdict(self)


def latency_compare(
    scorer,
    generator,
    samples: Sequence[str],
    max_tokens: int,
    warmup: int = 2,
    clock: Callable[[], float] = time.perf_counter,
) -> LatencyReport:
    """Time ``scorer.perplexity(s)`` against ``generator.generate(s, max_tokens)``."""
    if len(samples) < 10:
        raise PreconditionError("latency_compare needs at least 10 samples")
    for s in samples[:warmup]:
        scorer.perplexity(s)
        generator.generate(s, max_tokens)
    score_t = gen_t = 0.0
    for s in samples:
        t0 = clock()
        scorer.perplexity(s)
        t1 = clock()
        generator.generate(s, max_tokens)
        t2 = clock()
        score_t += t1 - t0
        gen_t += t2 - t1
    n = len(samples)
    mean_s, mean_g = score_t / n, gen_t / n
    return LatencyReport(mean_s, mean_g, mean_g / mean_s if mean_s > 0 else float("inf"), n)


def separable_vocabularies(n_threads: int, vocab_size: int = 20) -> list[list[str]]:
    """Disjoint word lists, one per thread (pseudo-words like ``t2w07``)."""
    return [[f"t{i}w{j:02d}" for j in range(vocab_size)] for i in range(n_threads)]


def make_separable_corpus(
    n_threads: int = 4,
    messages_per_thread: int = 15,
    vocab_size: int = 20,
    seed: int = 0,
    message_len: tuple[int, int] = (4, 8),
    branching: int = 1,
    start_ts: int = 1_700_000_000_000,
) -> Corpus:
    """A labelled stream of threads whose vocabularies are disjoint.

    Each thread walks a random cycle through its own ``vocab_size`` words,
    stepping 1..``branching`` positions ahead each time; consecutive messages
    continue the walk, so every message follows on from the previous one.
    Threads are merged with the interleaver and re-timestamped one second apart.
    """
    if not 1 <= branching < vocab_size:
        raise ValueError("branching must lie in [1, vocab_size)")
    rng = make_rng(seed)
    messages: list[Message] = []
    for t, words in enumerate(separable_vocabularies(n_threads, vocab_size)):
        cycle = [words[i] for i in rng.permutation(vocab_size)]
        pos = int(rng.integers(vocab_size))
        for j in range(messages_per_thread):
            length = int(rng.integers(message_len[0], message_len[1] + 1))
            toks = []
            for _ in range(length):
                toks.append(cycle[pos])
                pos = (pos + int(rng.integers(1, branching + 1))) % vocab_size
            messages.append(
                Message(f"m{t}_{j:03d}", j, f"spk{t}{j % 2}", " ".join(toks), gold_thread=f"g{t}")
            )
    return interleave_stream(Corpus(tuple(messages)), seed=seed, start_ts=start_ts)


def thread_counts(labels: Mapping[str, str]) -> Counter:
    return Counter(labels.values())
