import math
import sys

import numpy as np
import pytest

from threadloom.corpus import Corpus, Message
from threadloom.lm_core import PerplexityScore


def msg(i, text, ts=None, speaker="s", thread=None):
    return Message(id=f"m{i}" if isinstance(i, int) else i, timestamp=i if ts is None else ts,
                   speaker=speaker, text=text, gold_thread=thread)


class FixedScorer:
    """Every token gets probability ``p``; generation is scripted."""

    def __init__(self, p=0.25, reply="ok"):
        self.p = p
        self.reply = reply
        self.generate_calls = 0

    def perplexity(self, text):
        from threadloom.lm_core import tokenize

        n = len(tokenize(text))
        return PerplexityScore.from_log_prob(n * math.log(self.p), n)

    def generate(self, prompt, max_tokens):
        self.generate_calls += 1
        return self.reply


class CountingGenerator:
    def __init__(self, reply="reply"):
        self.calls = []
        self.reply = reply

    def generate(self, prompt, max_tokens):
        self.calls.append((prompt, max_tokens))
        return self.reply


@pytest.fixture
def corpus3():
    return Corpus((msg(1, "hello there", thread="A"), msg(2, "hi", thread="B"), msg(3, "how are you", thread="A")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
