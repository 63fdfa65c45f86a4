"""Small generated corpora and tasks with known structure.

Used by the smoke tests and the CLI demo; everything is a pure function of
its seed.
"""

from __future__ import annotations

import math

import numpy as np

from ambert.tokenizer import TokenSeqPair
from ambert.vocab import CLS_ID, NUM_SPECIAL, SEP_ID

HEADS = ("new", "ice", "big", "old", "red", "hot", "tall", "dark")
TAILS = ("york", "cream", "city", "house", "car", "tea", "tree", "room")


class BigramGrammar:
    """Two-state word grammar alternating a head word and a tail word.

    Head ``i`` is followed by its partner tail ``i`` with probability
    ``p_pair`` (otherwise a uniform tail); tail ``j`` is followed by head
    ``j+1`` with probability ``p_next`` (otherwise a uniform head). The
    frequent partner bigrams are what the lexicon builder should find.
    """

    def __init__(self, p_pair=0.9, p_next=0.75, heads=HEADS, tails=TAILS):
        self.heads = heads
        self.tails = tails
        self.p_pair = p_pair
        self.p_next = p_next

    def transition(self, state):
        """Rows: current word index; columns: next word index, for state 0 (head) or 1 (tail)."""
        n = len(self.heads)
        p = self.p_pair if state == 0 else self.p_next
        shift = 0 if state == 0 else 1
        t = np.full((n, n), (1.0 - p) / n)
        for i in range(n):
            t[i, (i + shift) % n] += p
        return t

    def entropy_rate(self):
        """Per-word conditional entropy (nats) of the stationary chain given the previous word."""
        h = 0.0
        for state in (0, 1):
            t = self.transition(state)
            row = -(t * np.log(t)).sum(axis=1)
            h += row.mean() / 2.0  # both word classes are uniform at stationarity
        return h

    def sentence(self, rng, pairs=4):
        n = len(self.heads)
        words = []
        head = int(rng.integers(n))
        for k in range(pairs):
            words.append(self.heads[head])
            tail = head if rng.random() < self.p_pair else int(rng.integers(n))
            words.append(self.tails[tail])
            head = (tail + 1) % n if rng.random() < self.p_next else int(rng.integers(n))
        return " ".join(words)

    def corpus(self, size=200, seed=0, pairs=4):
        rng = np.random.default_rng(seed)
        return [self.sentence(rng, pairs) for _ in range(size)]


def uniform_entropy(vocab_size: int) -> float:
    return math.log(vocab_size)


def make_pair(fine_ids, coarse_ids, spans, segments=None) -> TokenSeqPair:
    """Wrap interior ids and relative spans into a full pair with [CLS]/[SEP]."""
    fine = (CLS_ID, *fine_ids, SEP_ID)
    coarse = (CLS_ID, *coarse_ids, SEP_ID)
    align = tuple((s + 1, e + 1) for s, e in spans)
    return TokenSeqPair(fine, coarse, align, (0,) * len(fine), (0,) * len(coarse))


def random_pair(rng, fine_vocab, coarse_vocab, max_words=8, max_span=3) -> TokenSeqPair:
    """Random well-formed pair: each coarse token spans 1..max_span fine tokens."""
    n = int(rng.integers(0, max_words + 1))
    fine, coarse, spans = [], [], []
    for _ in range(n):
        k = int(rng.integers(1, max_span + 1))
        s = len(fine)
        fine.extend(int(x) for x in rng.integers(NUM_SPECIAL, fine_vocab, size=k))
        coarse.append(int(rng.integers(NUM_SPECIAL, coarse_vocab)))
        spans.append((s, s + k))
    return make_pair(fine, coarse, spans)


def coarse_informative_task(n, seed, fine_vocab, coarse_vocab, length=6):
    """Binary task whose label is carried only by the coarse stream.

    Fine ids are drawn independently of the label, so no fine-only classifier
    can beat chance in expectation; one coarse position holds a label-specific
    id.
    """
    rng = np.random.default_rng(seed)
    signal = (NUM_SPECIAL, NUM_SPECIAL + 1)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        fine = [int(x) for x in rng.integers(NUM_SPECIAL, fine_vocab, size=length)]
        coarse = [int(x) for x in rng.integers(NUM_SPECIAL + 2, coarse_vocab, size=length)]
        coarse[int(rng.integers(length))] = signal[label]
        out.append((make_pair(fine, coarse, [(i, i + 1) for i in range(length)]), label))
    return out


def separable_task(n, seed, fine_vocab, coarse_vocab, length=6):
    """Binary task where both streams see a label-specific token."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        fine = [int(x) for x in rng.integers(NUM_SPECIAL + 2, fine_vocab, size=length)]
        coarse = [int(x) for x in rng.integers(NUM_SPECIAL + 2, coarse_vocab, size=length)]
        pos = int(rng.integers(length))
        fine[pos] = NUM_SPECIAL + label
        coarse[pos] = NUM_SPECIAL + label
        out.append((make_pair(fine, coarse, [(i, i + 1) for i in range(length)]), label))
    return out


def span_task(n, seed, fine_vocab, coarse_vocab, length=8):
    """Span task: the answer is the fine token carrying a marker id (and the token after it)."""
    rng = np.random.default_rng(seed)
    marker = NUM_SPECIAL
    out = []
    for _ in range(n):
        fine = [int(x) for x in rng.integers(NUM_SPECIAL + 1, fine_vocab, size=length)]
        coarse = [int(x) for x in rng.integers(NUM_SPECIAL + 1, coarse_vocab, size=length)]
        pos = int(rng.integers(length - 1))
        fine[pos] = marker
        out.append((make_pair(fine, coarse, [(i, i + 1) for i in range(length)]), (pos + 1, pos + 2)))
    return out
