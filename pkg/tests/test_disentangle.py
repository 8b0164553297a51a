import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadloom.corpus import Corpus, Decision, Message
from threadloom.disentangle import (
    DetectionConfig,
    Thread,
    ThreadStore,
    assign_message,
    calibrate_threshold,
    candidate_scores,
    detect_stream,
    score_candidate,
    threshold_grid,
)
from threadloom.errors import PreconditionError
from threadloom.evalharness import make_separable_corpus, one_to_one_accuracy
from threadloom.lm_core import NgramScorer, sequence_log_prob, tokenize, train_ngram
from threadloom.topic import TopicConfig

from conftest import FixedScorer, msg


def oracle_ppl(model, text):
    toks = tokenize(text)
    return math.exp(-sequence_log_prob(model, toks) / len(toks))


def oracle_score(model, entries, text, config):
    joined = config.join_separator.join(entries + [text])
    if not config.conditional:
        return oracle_ppl(model, joined)
    full = tokenize(joined)
    ctx = tokenize(config.join_separator.join(entries))
    n_new = len(full) - len(ctx)
    return math.exp(-(sequence_log_prob(model, full) - sequence_log_prob(model, ctx)) / n_new)


def replay_argmin(corpus, config, model, records):
    """Rebuild the store from the records and rescore every live thread at each step.

    Returns the number of appended messages whose recorded thread is a minimiser.
    """
    threads: list[list[str]] = []
    ids: list[str] = []
    checked = 0
    for m, rec in zip(corpus, records):
        scores = [oracle_score(model, t, m.text, config) for t in threads]
        if rec.decision is Decision.APPENDED:
            k = ids.index(rec.predicted_thread)
            assert scores[k] == pytest.approx(min(scores), abs=1e-9)
            assert rec.score == pytest.approx(scores[k], abs=1e-9)
            assert 1.0 <= rec.score <= config.threshold
            threads[k].append(m.text)
            checked += 1
        else:
            assert not scores or min(scores) > config.threshold
            threads.append([m.text])
            ids.append(rec.predicted_thread)
    return checked


# configuration

def test_threshold_must_exceed_one():
    for t in (1.0, 0.5, -3):
        with pytest.raises(ValueError):
            DetectionConfig(threshold=t)
    with pytest.raises(ValueError):
        DetectionConfig(max_len=0)
    assert DetectionConfig().threshold == 1e9


# score_candidate

def test_score_with_certain_model_is_one():
    t = Thread("t0", [msg(1, "a b")])
    assert score_candidate(FixedScorer(1.0), t, msg(2, "a b")) == 1.0


def test_score_matches_join_oracle():
    model = train_ngram(["alpha alpha alpha beta", "alpha alpha"])
    t = Thread("t0", [msg(1, "alpha alpha")])
    got = score_candidate(NgramScorer(model), t, msg(2, "alpha"))
    assert got == pytest.approx(oracle_ppl(model, "alpha alpha\nalpha"), abs=1e-9)


def test_topic_header_joins_scoring_text():
    model = train_ngram(["x y z", "y z x"])
    t = Thread("t0", [msg(1, "x y")], topic="z z")
    assert score_candidate(NgramScorer(model), t, msg(2, "x")) == pytest.approx(
        oracle_ppl(model, "z z\nx y\nx"), abs=1e-9
    )


def test_speaker_prefix():
    model = train_ngram(["bob hi", "ann hey"])
    cfg = DetectionConfig(speaker_prefix=True)
    t = Thread("t0", [Message("m1", 0, "bob", "hi")])
    got = score_candidate(NgramScorer(model), t, Message("m2", 1, "ann", "hey"), cfg)
    assert got == pytest.approx(oracle_ppl(model, "bob: hi\nann: hey"), abs=1e-9)


def test_conditional_mode_scores_message_tokens_only():
    model = train_ngram(["a b c a b c", "c b a"])
    t = Thread("t0", [msg(1, "a b c")])
    got = score_candidate(NgramScorer(model), t, msg(2, "a b"), DetectionConfig(conditional=True))
    full = sequence_log_prob(model, tokenize("a b c a b"))
    ctx = sequence_log_prob(model, tokenize("a b c"))
    assert got == pytest.approx(math.exp(-(full - ctx) / 2), abs=1e-9)


def test_conditional_mode_punctuation_only_message():
    t = Thread("t0", [msg(1, "a b")])
    assert score_candidate(NgramScorer(train_ngram(["a b"])), t, msg(2, "?!"), DetectionConfig(conditional=True)) == 1.0


def test_empty_thread_rejected():
    with pytest.raises(PreconditionError):
        score_candidate(FixedScorer(), Thread("t0"), msg(1, "a"))


# assign_message

def test_empty_store_opens_thread():
    store = ThreadStore()
    rec = assign_message(store, FixedScorer(), msg(1, "hello"))
    assert rec.decision is Decision.NEW_THREAD and rec.score == math.inf
    assert len(store) == 1 and store.threads[0].request_ts == 1


def test_disjoint_vocab_argmin():
    model = train_ngram(["alpha alpha gamma alpha", "beta beta delta beta"])
    store = ThreadStore(DetectionConfig(threshold=1e6))
    store.new_thread(msg(1, "alpha gamma alpha"))
    store.new_thread(msg(2, "beta delta beta"))
    sc = NgramScorer(model)
    scores = [oracle_ppl(model, f"{t.messages[0].text}\nalpha alpha") for t in store.threads]
    assert scores[0] < scores[1]
    rec = assign_message(store, sc, msg(3, "alpha alpha"))
    assert rec.decision is Decision.APPENDED and rec.predicted_thread == "t0"
    assert rec.score == pytest.approx(scores[0], abs=1e-9)


def test_tight_threshold_spawns_every_message():
    model = train_ngram([" ".join(f"w{i}" for i in range(30))], smoothing_k=100.0)  # near uniform
    cfg = DetectionConfig(threshold=1.0001)
    c = Corpus(tuple(msg(i, f"w{i % 7} w{(3 * i) % 11}") for i in range(12)))
    store, recs = detect_stream(c, cfg, NgramScorer(model))
    assert all(r.decision is Decision.NEW_THREAD for r in recs) and len(store) == 12
    assert all(r.score > 1.0001 for r in recs[1:])


def test_ties_go_to_oldest_thread():
    store = ThreadStore()
    for i in range(3):
        store.new_thread(msg(i, "same"))
    rec = assign_message(store, FixedScorer(0.5), msg(9, "same"))
    assert rec.predicted_thread == "t0"


def test_request_ts_only_set_when_unanswered():
    store = ThreadStore()
    assign_message(store, FixedScorer(), msg(1, "a"))
    assign_message(store, FixedScorer(), msg(2, "a"))
    assert store.threads[0].request_ts == 1
    store.threads[0].request_ts = None  # answered
    assign_message(store, FixedScorer(), msg(3, "a"))
    assert store.threads[0].request_ts == 3


def test_scorer_failure_leaves_store_untouched():
    class Flaky(FixedScorer):
        def perplexity(self, text):
            raise RuntimeError("boom")

    store = ThreadStore()
    store.new_thread(msg(1, "a"))
    before = store.copy()
    with pytest.raises(RuntimeError):
        assign_message(store, Flaky(), msg(2, "b"))
    assert store == before


def test_executor_fanout_matches_sequential():
    c = make_separable_corpus(seed=2)
    sc = NgramScorer(train_ngram(c.texts()))
    cfg = DetectionConfig(threshold=14.0, conditional=True)
    _, seq = detect_stream(c, cfg, sc)
    with ThreadPoolExecutor(4) as ex:
        _, par = detect_stream(c, cfg, sc, executor=ex)
    assert seq == par


# detect_stream

def test_single_message_stream():
    store, recs = detect_stream(Corpus((msg(1, "hi"),)), DetectionConfig(), FixedScorer())
    assert len(store) == 1 and [r.decision for r in recs] == [Decision.NEW_THREAD]


def test_unsorted_stream_rejected():
    c = Corpus((msg(2, "b"), msg(1, "a")))
    with pytest.raises(PreconditionError, match="m1"):
        detect_stream(c, DetectionConfig(), FixedScorer())


def test_two_thread_disjoint_stream_is_perfect():
    c = make_separable_corpus(n_threads=2, messages_per_thread=10, vocab_size=8, seed=0)
    assert len(c) == 20
    model = train_ngram(c.texts())
    sc = NgramScorer(model)
    cfg = DetectionConfig(conditional=True)
    best, _ = calibrate_threshold(c, threshold_grid("2:50:log:40"), sc, cfg)
    cfg = DetectionConfig(threshold=best, conditional=True)
    store, recs = detect_stream(c, cfg, sc)
    assert one_to_one_accuracy(store.labels(), c.gold_labels()) == 1.0
    assert replay_argmin(c, cfg, model, recs) == 18


@pytest.mark.parametrize("conditional", [False, True])
def test_argmin_replay_and_conservation(conditional):
    c = make_separable_corpus(seed=1, messages_per_thread=8)
    model = train_ngram(c.texts())
    cfg = DetectionConfig(threshold=14.0 if conditional else 40.0, conditional=conditional, max_len=50)
    store, recs = detect_stream(c, cfg, NgramScorer(model))
    assert sorted(m.id for t in store.threads for m in t.messages) == sorted(m.id for m in c)
    assert [r.message_id for r in recs] == [m.id for m in c]
    assert replay_argmin(c, cfg, model, recs) > 0
    for r in recs[1:]:
        if r.decision is Decision.NEW_THREAD:
            assert r.score > cfg.threshold


def test_detection_is_deterministic():
    c = make_separable_corpus(seed=4)
    cfg = DetectionConfig(threshold=13.0, conditional=True)
    a = detect_stream(c, cfg, NgramScorer(train_ngram(c.texts())))[1]
    b = detect_stream(c, cfg, NgramScorer(train_ngram(c.texts())))[1]
    assert a == b


def test_compression_happens_in_stream():
    c = Corpus(tuple(msg(i, f"server {i % 3} disk full") for i in range(6)))
    store, _ = detect_stream(c, DetectionConfig(max_len=3), FixedScorer())
    assert len(store) == 1 and store.threads[0].topic


# threshold monotonicity

def _random_stream(seed, n=25):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(6)]
    return Corpus(tuple(Message(f"m{i:03d}", i, "s", " ".join(rng.choice(words, rng.integers(1, 5)))) for i in range(n)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(1.5, 40), st.floats(1.0, 3.0), st.booleans())
def test_raising_threshold_never_splits_a_single_step(seed, t, factor, conditional):
    """From the same store, a message appended at threshold t is appended at any larger threshold."""
    c = _random_stream(seed)
    sc = NgramScorer(train_ngram(c.texts()))
    lo = DetectionConfig(threshold=t, conditional=conditional)
    hi = DetectionConfig(threshold=t * factor, conditional=conditional)
    store, _ = detect_stream(c[:-1], lo, sc)
    a = assign_message(store.copy(), sc, c[-1])
    store.config = hi
    b = assign_message(store.copy(), sc, c[-1])
    assert len(store) >= 1
    if a.decision is Decision.APPENDED:
        assert b.decision is Decision.APPENDED and b.predicted_thread == a.predicted_thread


def test_thread_count_monotone_on_separable_stream():
    counts = []
    c = make_separable_corpus(seed=0)
    sc = NgramScorer(train_ngram(c.texts()))
    for t in np.geomspace(2, 200, 15):
        counts.append(len(detect_stream(c, DetectionConfig(threshold=float(t), conditional=True), sc)[0]))
    assert counts == sorted(counts, reverse=True)


@pytest.mark.xfail(strict=True, reason="greedy online assignment: a higher threshold can merge early and split later")
def test_thread_count_monotone_counterexample():
    c = _random_stream(16)
    sc = NgramScorer(train_ngram(c.texts()))
    ts = [float(t) for t in np.geomspace(1.5, 50, 40)]
    counts = [len(detect_stream(c, DetectionConfig(threshold=t), sc)[0]) for t in ts]
    assert counts == sorted(counts, reverse=True)


# threshold grid and calibration

def test_threshold_grid():
    g = threshold_grid("2:200:log")
    assert len(g) == 25 and g[0] == pytest.approx(2) and g[-1] == pytest.approx(200)
    assert np.allclose(np.diff(np.log(g)), np.log(100) / 24)
    assert threshold_grid("2:10:lin:5") == [2.0, 4.0, 6.0, 8.0, 10.0]
    assert threshold_grid("3:3:log:1") == [3.0]
    for bad in ["1:10:log", "5:2:lin", "2:10:cubic", "2:10", "2:10:log:0"]:
        with pytest.raises(ValueError):
            threshold_grid(bad)


def test_calibration_picks_best_grid_point():
    c = make_separable_corpus(seed=3)
    sc = NgramScorer(train_ngram(c.texts()))
    cfg = DetectionConfig(conditional=True)
    grid = threshold_grid("2:200:log:12")
    best, curve = calibrate_threshold(c, grid, sc, cfg, refine=0)
    assert [t for t, _ in curve] == sorted(grid)
    direct = {t: one_to_one_accuracy(detect_stream(c, DetectionConfig(threshold=t, conditional=True), sc)[0].labels(),
                                      c.gold_labels()) for t in grid}
    assert dict(curve) == pytest.approx(direct)
    top = max(direct.values())
    assert best == min(t for t, a in direct.items() if a == top)
    best2, curve2 = calibrate_threshold(c, grid, sc, cfg, refine=1)
    assert dict(curve2)[best2] >= top and len(curve2) > len(curve)


def test_calibration_rejects_empty_grid():
    with pytest.raises(ValueError):
        calibrate_threshold(make_separable_corpus(seed=0), [], FixedScorer())
