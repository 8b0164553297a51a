from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadloom.corpus import Corpus, Message
from threadloom.errors import PreconditionError
from threadloom.interleave import (
    InterleaveConfig,
    build_dataset,
    format_training_pair,
    interleave_stream,
    interleave_subset,
    make_rng,
    partition_threads,
    write_dataset,
)


def labelled_corpus(sizes):
    msgs, ts = [], 0
    for t, n in enumerate(sizes):
        for j in range(n):
            msgs.append(Message(f"t{t}m{j}", ts, f"u{t}", f"thread {t} message {j}", f"T{t}"))
            ts += 1
    return Corpus(tuple(msgs))


def check_partition(labels, subsets, cfg):
    flat = [l for s in subsets for l in s]
    assert sorted(flat) == sorted(labels) and len(flat) == len(set(flat))
    for s in subsets[:-1]:
        assert cfg.min_group <= len(s) <= cfg.max_group
    assert 1 <= len(subsets[-1]) <= cfg.max_group


def test_config_validation():
    for lo, hi in [(0, 5), (3, 2), (-1, 1)]:
        with pytest.raises(ValueError):
            InterleaveConfig(min_group=lo, max_group=hi)


def test_partition_single_label():
    assert partition_threads(["a"], make_rng(5), InterleaveConfig()) == [["a"]]


def test_partition_twelve_labels_seed_42():
    labels = [f"L{i}" for i in range(12)]
    cfg = InterleaveConfig(seed=42)
    subsets = partition_threads(labels, make_rng(42), cfg)
    check_partition(labels, subsets, cfg)
    assert subsets == partition_threads(labels, make_rng(42), cfg)


def test_partition_errors():
    with pytest.raises(PreconditionError):
        partition_threads([], make_rng(0), InterleaveConfig())
    with pytest.raises(PreconditionError):
        partition_threads(["a", "a"], make_rng(0), InterleaveConfig())


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32), st.integers(1, 4), st.integers(0, 4))
def test_partition_axioms(n, seed, lo, extra):
    cfg = InterleaveConfig(seed=seed, min_group=lo, max_group=lo + extra)
    labels = [f"L{i}" for i in range(n)]
    check_partition(labels, partition_threads(labels, make_rng(seed), cfg), cfg)


def test_interleave_single_thread_is_identity():
    c = labelled_corpus([3])
    groups = {"T0": list(c)}
    assert interleave_subset(groups, ["T0"], make_rng(0)) == list(c)


def test_two_threads_preserve_order_for_many_seeds():
    c = labelled_corpus([2, 1])
    groups = {"T0": list(c)[:2], "T1": list(c)[2:]}
    seen = set()
    for seed in range(100):
        out = interleave_subset(groups, ["T0", "T1"], make_rng(seed))
        ids = [m.id for m in out]
        assert sorted(ids) == sorted(m.id for m in c)
        assert ids.index("t0m0") < ids.index("t0m1")
        seen.add(tuple(ids))
    assert len(seen) == 3  # all three stable interleavings occur


def test_interleave_rejects_empty_thread():
    with pytest.raises(PreconditionError):
        interleave_subset({"A": []}, ["A"], make_rng(0))


def test_template_examples():
    assert format_training_pair(["A"], ["B"]) == "<s>[INST]A[/INST]B</s>"
    assert format_training_pair(["x", "y"], ["x", "y"]) == "<s>[INST]x\ny[/INST]x\ny</s>"
    with pytest.raises(PreconditionError):
        format_training_pair([], ["x"])
    with pytest.raises(PreconditionError):
        format_training_pair(["x"], [])


def test_single_thread_dataset():
    pairs = build_dataset(labelled_corpus([4]), InterleaveConfig(seed=1))
    assert len(pairs) == 1 and pairs[0].unsorted == pairs[0].sorted


def test_empty_corpus_dataset():
    assert build_dataset(Corpus(()), InterleaveConfig()) == []


def test_dataset_requires_labels():
    c = Corpus((Message("a", 0, "s", "x"),))
    with pytest.raises(Exception, match="'a'"):
        build_dataset(c, InterleaveConfig())


def _dataset_laws(corpus, pairs):
    thread_of = {m.text: m.gold_thread for m in corpus}
    order = {}
    for m in corpus:
        order.setdefault(m.gold_thread, []).append(m.text)
    covered = Counter()
    for p in pairs:
        assert Counter(p.unsorted) == Counter(p.sorted)
        assert p.rendered.startswith("<s>[INST]") and p.rendered.endswith("</s>")
        covered.update(p.unsorted)
        threads_in_pair = {thread_of[t] for t in p.unsorted}
        for label in threads_in_pair:
            expected = order[label]
            assert [t for t in p.unsorted if thread_of[t] == label] == expected
            assert [t for t in p.sorted if thread_of[t] == label] == expected
        # sorted side: threads by first appearance in the unsorted stream, contiguous
        first_seen = list(dict.fromkeys(thread_of[t] for t in p.unsorted))
        assert list(p.sorted) == [t for label in first_seen for t in order[label]]
    assert covered == Counter(m.text for m in corpus)


def test_six_thread_dataset_seed_7():
    c = labelled_corpus([3, 1, 4, 2, 5, 2])
    _dataset_laws(c, build_dataset(c, InterleaveConfig(seed=7)))


def test_different_seeds_same_content():
    c = labelled_corpus([3, 3, 3, 3])
    streams = set()
    for seed in range(10):
        pairs = build_dataset(c, InterleaveConfig(seed=seed))
        _dataset_laws(c, pairs)
        streams.add(tuple(t for p in pairs for t in p.unsorted))
    assert len(streams) > 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=12), st.integers(0, 10**6))
def test_dataset_laws_property(sizes, seed):
    c = labelled_corpus(sizes)
    _dataset_laws(c, build_dataset(c, InterleaveConfig(seed=seed)))


def test_dataset_file_is_deterministic(tmp_path):
    c = labelled_corpus([2, 3, 1, 4])
    for name in ("a", "b"):
        write_dataset(build_dataset(c, InterleaveConfig(seed=3)), tmp_path / f"{name}.jsonl")
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    import json

    row = json.loads(a.splitlines()[0])
    assert set(row) == {"unsorted", "sorted", "rendered"}


def test_interleave_stream_retimestamps():
    c = labelled_corpus([3, 2])
    s = interleave_stream(c, seed=4, start_ts=100, step_ms=10)
    assert [m.timestamp for m in s] == [100, 110, 120, 130, 140]
    assert s.is_sorted() and sorted(m.id for m in s) == sorted(m.id for m in c)
    assert s.gold_labels() == c.gold_labels()
