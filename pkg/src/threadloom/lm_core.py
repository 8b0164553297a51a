"""Tokenization, perplexity and a small add-k n-gram reference model.

Everything is kept in natural-log space; perplexity is only materialised as
``exp(-log_prob / N)`` at the boundary, because the root-of-inverse-probability
form underflows for any realistic sequence.
"""

from __future__ import annotations

import functools
import json
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import PreconditionError

BOS = "<s>"
UNK = "<unk>"
MODEL_FORMAT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into maximal alphanumeric runs.

    >>> tokenize("Hi, brother!")
    ['hi', 'brother']
    """
    return list(_tokenize(text))


@functools.lru_cache(maxsize=65536)
def _tokenize(text: str) -> tuple[str, ...]:
    tokens: list[str] = []
    for chunk in text.lower().split():
        if chunk.isalnum():
            tokens.append(chunk)
            continue
        buf: list[str] = []
        for ch in chunk:
            if ch.isalnum():
                buf.append(ch)
            elif buf:
                tokens.append("".join(buf))
                buf.clear()
        if buf:
            tokens.append("".join(buf))
    return tuple(tokens)


@dataclass(frozen=True)
class PerplexityScore:
    value: float
    log_prob: float
    n_tokens: int

    @classmethod
    def from_log_prob(cls, log_prob: float, n_tokens: int) -> "PerplexityScore":
        if n_tokens < 1:
            raise PreconditionError("perplexity needs at least one token")
        return cls(math.exp(-log_prob / n_tokens), log_prob, n_tokens)


@runtime_checkable
class LanguageModelScorer(Protocol):
    """Anything that can score text and continue a prompt.

    ``perplexity`` must be a pure function of the model state and the text.
    """

    def perplexity(self, text: str) -> PerplexityScore: ...

    def generate(self, prompt: str, max_tokens: int) -> str: ...


def perplexity(scorer: LanguageModelScorer, text: str) -> PerplexityScore:
    return scorer.perplexity(text)


def _context_key(context: Sequence[str]) -> str:
    return " ".join(context)


@dataclass(frozen=True)
class NgramModel:
    """Add-k smoothed n-gram model over a closed vocabulary.

    ``counts`` maps a context tuple (length ``order - 1``) to a Counter of
    next-token counts. ``vocab`` always contains :data:`UNK`; :data:`BOS` is
    context-only and never predicted.
    """

    order: int
    vocab: tuple[str, ...]
    counts: Mapping[tuple[str, ...], Mapping[str, int]] = field(default_factory=dict)
    k: float = 0.5

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("n-gram order must be >= 1")
        if not self.k > 0:
            raise ValueError("smoothing k must be positive")
        vocab = tuple(sorted(set(self.vocab) | {UNK}))
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(vocab)})
        totals = {ctx: sum(c.values()) for ctx, c in self.counts.items()}
        object.__setattr__(self, "_totals", totals)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def map_token(self, token: str) -> str:
        return token if token in self._index else UNK

    def context_of(self, history: Sequence[str]) -> tuple[str, ...]:
        """Last ``order - 1`` tokens of ``history``, BOS-padded on the left."""
        n = self.order - 1
        if n == 0:
            return ()
        tail = [self.map_token(t) for t in history[-n:]]
        return tuple([BOS] * (n - len(tail)) + tail)

    def prob(self, token: str, context: tuple[str, ...]) -> float:
        table = self.counts.get(context, {})
        total = self._totals.get(context, 0)
        return (table.get(self.map_token(token), 0) + self.k) / (total + self.k * self.vocab_size)

    def distribution(self, context: tuple[str, ...]) -> np.ndarray:
        """Smoothed next-token probabilities aligned with ``self.vocab``."""
        table = self.counts.get(context, {})
        total = self._totals.get(context, 0)
        counts = np.zeros(self.vocab_size)
        for tok, c in table.items():
            counts[self._index[tok]] = c
        return (counts + self.k) / (total + self.k * self.vocab_size)

    # persistence
    def to_json(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "order": self.order,
            "k": self.k,
            "vocab": list(self.vocab),
            "counts": {
                _context_key(ctx): dict(sorted(table.items()))
                for ctx, table in sorted(self.counts.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NgramModel":
        if obj.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {obj.get('version')!r}")
        order = int(obj["order"])
        counts = {}
        for key, table in obj["counts"].items():
            ctx = tuple(key.split(" ")) if key else ()
            if len(ctx) != order - 1:
                raise ValueError(f"context {key!r} does not match order {order}")
            counts[ctx] = Counter({t: int(c) for t, c in table.items()})
        return cls(order=order, vocab=tuple(obj["vocab"]), counts=counts, k=float(obj["k"]))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "NgramModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def train_ngram(corpus: Iterable[str], order: int = 2, smoothing_k: float = 0.5) -> NgramModel:
    """Count BOS-padded ``order``-grams over each text of ``corpus``."""
    if order < 1:
        raise ValueError("n-gram order must be >= 1")
    if not smoothing_k > 0:
        raise ValueError("smoothing k must be positive")
    texts = list(corpus)
    if not texts:
        raise ValueError("cannot train on an empty corpus")
    counts: dict[tuple[str, ...], Counter] = {}
    vocab: set[str] = set()
    pad = [BOS] * (order - 1)
    for text in texts:
        tokens = tokenize(text)
        vocab.update(tokens)
        padded = pad + tokens
        for i in range(len(tokens)):
            ctx = tuple(padded[i : i + order - 1])
            counts.setdefault(ctx, Counter())[padded[i + order - 1]] += 1
    return NgramModel(order=order, vocab=tuple(vocab), counts=counts, k=smoothing_k)


def sequence_log_prob(model: NgramModel, tokens: Sequence[str]) -> float:
    """Natural-log joint probability of ``tokens`` (no end-of-sequence term)."""
    if not tokens:
        raise PreconditionError("cannot score an empty token sequence")
    n = model.order - 1
    padded = [BOS] * n + [model.map_token(t) for t in tokens]
    total = 0.0
    for i in range(len(tokens)):
        total += math.log(model.prob(padded[i + n], tuple(padded[i : i + n])))
    return total


def generate(model, prompt: str, max_tokens: int, rng: np.random.Generator) -> str:
    """Sample up to ``max_tokens`` tokens continuing ``prompt``.

    ``model`` needs ``vocab``, ``context_of`` and ``distribution``; the
    unknown sentinel can be sampled like any other token.
    """
    if max_tokens < 1:
        raise PreconditionError("max_tokens must be >= 1")
    history = list(tokenize(prompt))
    out: list[str] = []
    for _ in range(max_tokens):
        probs = model.distribution(model.context_of(history))
        tok = model.vocab[int(rng.choice(len(probs), p=probs))]
        out.append(tok)
        history.append(tok)
    return " ".join(out)


class NgramScorer:
    """:class:`LanguageModelScorer` backed by an :class:`NgramModel`.

    Each ``generate`` call draws from a fresh generator seeded with ``seed``,
    so a given prompt always yields the same continuation.  Scores are
    memoised per text (``cache_size=0`` disables this).
    """

    def __init__(self, model: NgramModel, seed: int = 0, cache_size: int = 65536):
        self.model = model
        self.seed = seed
        self._score = functools.lru_cache(maxsize=cache_size)(self._perplexity) if cache_size else self._perplexity

    def _perplexity(self, text: str) -> PerplexityScore:
        tokens = tokenize(text)
        if not tokens:
            raise PreconditionError(f"text has no tokens: {text[:40]!r}")
        return PerplexityScore.from_log_prob(sequence_log_prob(self.model, tokens), len(tokens))

    def perplexity(self, text: str) -> PerplexityScore:
        return self._score(text)

    def generate(self, prompt: str, max_tokens: int) -> str:
        rng = np.random.Generator(np.random.PCG64(self.seed))
        return generate(self.model, prompt, max_tokens, rng)
