"""Aligned fine/coarse tokenization.

Coarse tokens are built on top of the word boundaries of the fine stream
(each subword word in English, each character in Chinese), so every coarse
token covers a contiguous run of fine tokens by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

from ambert.errors import UsageError
from ambert.vocab import (
    CLS_ID,
    SEP_ID,
    UNK,
    Vocabulary,
    joiner_for,
    normalize,
    phrase_units,
)

MAX_CHARS_PER_WORD = 100


@dataclass(frozen=True)
class TokenSeqPair:
    """Fine and coarse id sequences of one text plus their alignment.

    ``alignment[j]`` is the half-open fine-position range covered by coarse
    position ``j + 1`` (positions count [CLS] as 0).
    """

    fine_ids: tuple[int, ...]
    coarse_ids: tuple[int, ...]
    alignment: tuple[tuple[int, int], ...]
    fine_segments: tuple[int, ...]
    coarse_segments: tuple[int, ...]

    @property
    def m(self):
        return len(self.fine_ids) - 2

    @property
    def n(self):
        return len(self.coarse_ids) - 2

    def cover(self) -> list[int]:
        """Coarse position covering each fine position ([CLS]->0, final [SEP]->last)."""
        out = [0] * len(self.fine_ids)
        for j, (s, e) in enumerate(self.alignment, 1):
            for i in range(s, e):
                out[i] = j
        out[-1] = len(self.coarse_ids) - 1
        return out

    def validate(self) -> None:
        if len(self.fine_ids) < 2 or len(self.coarse_ids) < 2:
            raise ValueError("sequences must hold at least [CLS] and [SEP]")
        if self.fine_ids[0] != CLS_ID or self.coarse_ids[0] != CLS_ID:
            raise ValueError("sequences must start with [CLS]")
        if self.fine_ids[-1] != SEP_ID or self.coarse_ids[-1] != SEP_ID:
            raise ValueError("sequences must end with [SEP]")
        if len(self.alignment) != self.n:
            raise ValueError(f"alignment has {len(self.alignment)} entries for {self.n} coarse tokens")
        pos = 1
        for s, e in self.alignment:
            if s != pos or e <= s:
                raise ValueError(f"alignment range [{s},{e}) does not continue tiling at {pos}")
            pos = e
        if pos != len(self.fine_ids) - 1:
            raise ValueError("alignment does not tile the fine interior")
        if len(self.fine_segments) != len(self.fine_ids) or len(self.coarse_segments) != len(self.coarse_ids):
            raise ValueError("segment ids must match sequence lengths")


# -- fine -----------------------------------------------------------------------


def _wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    if len(word) > MAX_CHARS_PER_WORD:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        cur = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab:
                cur = sub
                break
            end -= 1
        if cur is None:
            return [UNK]
        pieces.append(cur)
        start = end
    return pieces


def tokenize_fine(text: str, vocab: Vocabulary, mode: str = "subword") -> list[str]:
    """Greedy longest-match WordPiece per whitespace word, or one token per character."""
    text = normalize(text, mode)
    if mode == "char":
        return [c if c in vocab else UNK for c in text if not c.isspace()]
    out = []
    for word in text.split():
        out.extend(_wordpiece(word, vocab))
    return out


def fine_char_spans(text: str, vocab: Vocabulary, mode: str = "subword") -> list[tuple[int, int]]:
    """Character span, in the normalized text, of every token ``tokenize_fine`` emits."""
    text = normalize(text, mode)
    spans = []
    if mode == "char":
        return [(i, i + 1) for i, c in enumerate(text) if not c.isspace()]
    i = 0
    for word in text.split():
        start = text.index(word, i)
        i = start + len(word)
        pieces = _wordpiece(word, vocab)
        if pieces == [UNK]:
            spans.append((start, i))
            continue
        p = start
        for piece in pieces:
            n = len(piece) - 2 if piece.startswith("##") else len(piece)
            spans.append((p, p + n))
            p += n
    return spans


def detokenize(tokens: list[str], mode: str = "subword") -> str:
    if mode == "char":
        return "".join(tokens)
    out = []
    for t in tokens:
        if t.startswith("##") and out:
            out[-1] += t[2:]
        else:
            out.append(t)
    return " ".join(out)


def _words(fine_tokens: list[str], mode: str) -> list[tuple[str, int, int]]:
    """Group fine tokens into (surface, start, end) words."""
    words = []
    for i, t in enumerate(fine_tokens):
        if mode != "char" and t.startswith("##") and words and words[-1][0] != UNK:
            s, a, _ = words[-1]
            words[-1] = (s + t[2:], a, i + 1)
        else:
            words.append((t, i, i + 1))
    return words


def lexicon_max_units(lexicon: Vocabulary, mode: str) -> int:
    return max((phrase_units(t, mode) for t in lexicon.tokens[5:]), default=1)


def tokenize_coarse(fine_tokens: list[str], lexicon: Vocabulary, mode: str = "subword",
                    max_units: int | None = None) -> tuple[list[str], list[tuple[int, int]]]:
    """Left-to-right longest lexicon match over the words of the fine stream.

    Returns coarse surface strings and, for each, the fine-index range it covers.
    """
    if max_units is None:
        max_units = lexicon_max_units(lexicon, mode)
    words = _words(fine_tokens, mode)
    joiner = joiner_for(mode)
    coarse, align = [], []
    i = 0
    while i < len(words):
        taken = None
        for k in range(min(max_units, len(words) - i), 1, -1):
            span = words[i:i + k]
            if any(w[0] == UNK for w in span):
                continue
            surface = joiner.join(w[0] for w in span)
            if surface in lexicon:
                taken = (surface, k)
                break
        if taken is None:
            surface = words[i][0]
            taken = (surface if surface in lexicon else UNK, 1)
        surface, k = taken
        coarse.append(surface)
        align.append((words[i][1], words[i + k - 1][2]))
        i += k
    return coarse, align


# -- pair assembly --------------------------------------------------------------


class Tokenizer:
    """Both vocabularies plus the mode, with precomputed lexicon statistics."""

    def __init__(self, fine: Vocabulary, coarse: Vocabulary, mode: str = "subword"):
        if mode not in ("subword", "char"):
            raise UsageError(f"unknown tokenizer mode {mode!r}")
        self.fine = fine
        self.coarse = coarse
        self.mode = mode
        self.max_units = lexicon_max_units(coarse, mode)

    def tokenize_fine(self, text):
        return tokenize_fine(text, self.fine, self.mode)

    def tokenize_coarse(self, fine_tokens):
        return tokenize_coarse(fine_tokens, self.coarse, self.mode, self.max_units)

    def segment(self, text):
        fine = self.tokenize_fine(text)
        coarse, align = self.tokenize_coarse(fine)
        return fine, coarse, align

    def encode(self, text_a: str, text_b: str | None = None, max_fine_len: int = 512,
               max_coarse_len: int = 512) -> TokenSeqPair:
        if max_fine_len < 3 or max_coarse_len < 3:
            raise UsageError("max lengths must be >= 3 to hold [CLS], [SEP] and one token")
        segs = [list(self.segment(text_a))]
        if text_b is not None:
            segs.append(list(self.segment(text_b)))
        extra = len(segs) + 1

        def fine_len():
            return sum(len(s[0]) for s in segs) + extra

        def coarse_len():
            return sum(len(s[1]) for s in segs) + extra

        while fine_len() > max_fine_len or coarse_len() > max_coarse_len:
            # trim the longer segment (ties: the second) by one whole coarse token
            victim = max(range(len(segs)), key=lambda k: (len(segs[k][0]), k))
            fine, coarse, align = segs[victim]
            if not coarse:
                victim = 1 - victim
                fine, coarse, align = segs[victim]
            start, _ = align.pop()
            coarse.pop()
            del fine[start:]

        fine_ids, coarse_ids = [CLS_ID], [CLS_ID]
        fine_seg, coarse_seg = [0], [0]
        alignment = []
        for seg_id, (fine, coarse, align) in enumerate(segs):
            base = len(fine_ids)
            fine_ids.extend(self.fine.ids(fine))
            coarse_ids.extend(self.coarse.ids(coarse))
            alignment.extend((base + s, base + e) for s, e in align)
            fine_ids.append(SEP_ID)
            coarse_ids.append(SEP_ID)
            fine_seg.extend([seg_id] * (len(fine) + 1))
            coarse_seg.extend([seg_id] * (len(coarse) + 1))
            if seg_id + 1 < len(segs):
                alignment.append((len(fine_ids) - 1, len(fine_ids)))
        pair = TokenSeqPair(tuple(fine_ids), tuple(coarse_ids), tuple(alignment),
                            tuple(fine_seg), tuple(coarse_seg))
        return pair


def coarse_surfaces_absent_from_fine(coarse_tokens: list[str], fine: Vocabulary) -> int:
    """How many coarse tokens have a surface string the fine vocabulary lacks."""
    return sum(1 for t in coarse_tokens if t not in fine)
