"""Topic headers for long threads: TF-IDF weighting plus NMF.

When a thread grows past ``max_len`` messages its texts are vectorised,
factored as ``X ~= W @ H`` with non-negative factors, and the four heaviest
terms of the first component become a one-line topic that is kept in front
of the messages.  Prompts can then carry the topic plus the last few
messages instead of the whole history.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import PreconditionError
from .lm_core import tokenize

if TYPE_CHECKING:
    from .disentangle import Thread

EPS = 1e-12
METHODS = ("tfidf_nmf", "counts_nmf")


@dataclass(frozen=True)
class TopicConfig:
    method: str = "tfidf_nmf"
    k_terms: int = 4
    max_iter: int = 200
    tol: float = 1e-4
    seed: int = 0
    n_components: int = 1
    stop_words: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown topic method {self.method!r}; expected one of {METHODS}")
        if self.k_terms < 1:
            raise ValueError("k_terms must be >= 1")
        object.__setattr__(self, "stop_words", frozenset(self.stop_words))


@dataclass(frozen=True)
class DocTermMatrix:
    values: np.ndarray  # (n_docs, n_terms), non-negative
    vocab: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class NmfFactors:
    W: np.ndarray
    H: np.ndarray
    residual: float
    history: tuple[float, ...] = ()
    n_iter: int = 0

    @property
    def r(self) -> int:
        return self.H.shape[0]


def _token_counts(messages: Sequence[str], stop_words=frozenset()) -> tuple[list[Counter], tuple[str, ...]]:
    docs = [Counter(t for t in tokenize(m) if t not in stop_words) for m in messages]
    vocab = tuple(sorted(set().union(*docs))) if docs else ()
    if not vocab:
        raise PreconditionError("messages contain no tokens to vectorise")
    return docs, vocab


def build_counts(messages: Sequence[str], stop_words=frozenset()) -> DocTermMatrix:
    docs, vocab = _token_counts(messages, stop_words)
    index = {t: j for j, t in enumerate(vocab)}
    X = np.zeros((len(docs), len(vocab)))
    for i, doc in enumerate(docs):
        for tok, c in doc.items():
            X[i, index[tok]] = c
    return DocTermMatrix(X, vocab)


def build_tfidf(messages: Sequence[str], stop_words=frozenset()) -> DocTermMatrix:
    """Raw-count tf times smoothed idf ``ln((1+n)/(1+df)) + 1``, rows L2-normalised.

    Rows without tokens stay all-zero so row ``i`` always matches message ``i``.
    """
    counts = build_counts(messages, stop_words)
    X = counts.values
    n = X.shape[0]
    df = np.count_nonzero(X, axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    X = X * idf
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    return DocTermMatrix(X, counts.vocab)


def nmf_factorize(
    X: DocTermMatrix | np.ndarray,
    r: int = 1,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-4,
) -> NmfFactors:
    """Lee-Seung multiplicative updates for ``min ||X - W H||_F``.

    Stops after ``max_iter`` sweeps or when the relative residual improvement
    drops below ``tol``.  ``history`` holds the residual after initialisation
    and after every sweep.
    """
    V = np.asarray(X.values if isinstance(X, DocTermMatrix) else X, dtype=float)
    if V.ndim != 2:
        raise PreconditionError("X must be a 2-D matrix")
    if r < 1 or r > min(V.shape):
        raise PreconditionError(f"rank {r} must lie in [1, {min(V.shape)}]")
    if (V < 0).any():
        raise PreconditionError("X has negative entries")
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = np.sqrt(V.mean() / r) if V.mean() > 0 else 1.0
    W = rng.random((V.shape[0], r)) * scale
    H = rng.random((r, V.shape[1])) * scale

    residual = float(np.linalg.norm(V - W @ H))
    history = [residual]
    it = 0
    for it in range(1, max_iter + 1):
        H *= (W.T @ V) / (W.T @ W @ H + EPS)
        W *= (V @ H.T) / (W @ (H @ H.T) + EPS)
        new = float(np.linalg.norm(V - W @ H))
        history.append(new)
        converged = residual == 0.0 or (residual - new) / residual < tol
        residual = new
        if converged:
            break
    return NmfFactors(W=W, H=H, residual=residual, history=tuple(history), n_iter=it)


def extract_topic(
    X: DocTermMatrix | Sequence[str], factors: NmfFactors | np.ndarray, k_terms: int = 4
) -> str:
    """Space-joined top ``k_terms`` terms of component 0, heaviest first.

    ``X`` is the factored matrix (or just its vocabulary); ``factors`` may be
    a bare weight row.  Equal weights are ordered by the lexicographically
    smaller term.
    """
    vocab = X.vocab if isinstance(X, DocTermMatrix) else tuple(X)
    if k_terms < 1:
        raise PreconditionError("k_terms must be >= 1")
    row = np.asarray(factors.H[0] if isinstance(factors, NmfFactors) else factors, dtype=float)
    if row.shape[0] != len(vocab):
        raise PreconditionError("component length does not match vocabulary")
    order = sorted(range(len(vocab)), key=lambda j: (-row[j], vocab[j]))
    return " ".join(vocab[j] for j in order[:k_terms])


def compute_topic(messages: Sequence[str], cfg: TopicConfig = TopicConfig()) -> str:
    build = build_tfidf if cfg.method == "tfidf_nmf" else build_counts
    X = build(messages, cfg.stop_words)
    r = min(cfg.n_components, *X.shape)
    factors = nmf_factorize(X, r=r, seed=cfg.seed, max_iter=cfg.max_iter, tol=cfg.tol)
    return extract_topic(X, factors, cfg.k_terms)


def maybe_compress(thread: "Thread", max_len: int, cfg: TopicConfig = TopicConfig()) -> "Thread":
    """Return ``thread`` with a fresh topic header if it holds more than ``max_len`` messages.

    Messages are never touched; an existing header is replaced.
    """
    if len(thread.messages) <= max_len:
        return thread
    topic = compute_topic([m.text for m in thread.messages], cfg)
    return dataclasses.replace(thread, topic=topic)
