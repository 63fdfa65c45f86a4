"""Vocabularies for both granularities and phrase-lexicon induction.

The coarse lexicon is induced from exact n-gram counts: an n-gram is kept
when it is frequent enough and its last unit is predictable from the rest,
measured as ``count(g) / count(g[:-1])``.
"""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ambert.errors import DataError, UsageError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIALS)


def normalize(text: str, mode: str = "subword") -> str:
    """NFKC everywhere; lowercasing only for the word/subword (English) path."""
    text = unicodedata.normalize("NFKC", text)
    if mode in ("subword", "word"):
        text = text.lower()
    return text


def basis_units(text: str, basis: str) -> list[str]:
    """Split a document into the units that n-grams are counted over."""
    if basis == "word":
        return normalize(text, "word").split()
    if basis == "char":
        return [c for c in normalize(text, "char") if not c.isspace()]
    raise UsageError(f"unknown basis {basis!r}; expected 'word' or 'char'")


def joiner_for(basis_or_mode: str) -> str:
    return "" if basis_or_mode == "char" else " "


@dataclass(frozen=True)
class Vocabulary:
    granularity: str
    tokens: tuple[str, ...]
    counts: tuple[int, ...]
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.granularity not in ("fine", "coarse"):
            raise ValueError(f"granularity must be 'fine' or 'coarse', got {self.granularity!r}")
        if len(self.tokens) != len(self.counts):
            raise ValueError("tokens and counts differ in length")
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0..4")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_entries(cls, granularity, entries: Iterable[tuple[str, int]]):
        toks = list(SPECIALS)
        counts = [0] * NUM_SPECIAL
        for tok, c in entries:
            if tok in SPECIALS:
                continue
            toks.append(tok)
            counts.append(int(c))
        return cls(granularity, tuple(toks), tuple(counts))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def ids(self, tokens) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokens]

    def token(self, i: int) -> str:
        return self.tokens[i]

    def count(self, token: str) -> int:
        i = self._index.get(token)
        return 0 if i is None else self.counts[i]


# -- n-gram counting ------------------------------------------------------------


@dataclass
class NGramTable:
    max_order: int
    counts: Counter
    basis: str = "word"
    rejected_lines: int = 0

    @property
    def joiner(self):
        return joiner_for(self.basis)

    def __getitem__(self, gram):
        if isinstance(gram, str):
            gram = tuple(gram.split(" ")) if self.basis == "word" else tuple(gram)
        return self.counts.get(gram, 0)

    def merge(self, other: "NGramTable") -> "NGramTable":
        if (self.max_order, self.basis) != (other.max_order, other.basis):
            raise ValueError("cannot merge tables with different order or basis")
        return NGramTable(self.max_order, self.counts + other.counts, self.basis,
                          self.rejected_lines + other.rejected_lines)

    def canonical_lines(self) -> list[str]:
        """Sorted text rendering; identical tables give identical lines."""
        return [f"{' '.join(g)}\t{c}" for g, c in sorted(self.counts.items())]


def _decode(line) -> str | None:
    if isinstance(line, bytes):
        try:
            return line.decode("utf-8")
        except UnicodeDecodeError:
            return None
    return line


def _count_shard(lines, basis, max_order) -> NGramTable:
    counts: Counter = Counter()
    rejected = 0
    for raw in lines:
        text = _decode(raw)
        if text is None:
            rejected += 1
            continue
        units = basis_units(text.rstrip("\r\n"), basis)
        n = len(units)
        for k in range(1, max_order + 1):
            for i in range(n - k + 1):
                counts[tuple(units[i:i + k])] += 1
    return NGramTable(max_order, counts, basis, rejected)


def count_ngrams(corpus: Iterable, basis: str = "word", max_order: int = 4, shards: int = 1) -> NGramTable:
    """Exact k-gram counts, 1 <= k <= max_order, never crossing a document boundary.

    ``corpus`` yields one document per item, as ``str`` or raw ``bytes``;
    bytes that are not valid UTF-8 are skipped and tallied in ``rejected_lines``.
    Sharding splits documents round-robin and merges by addition.
    """
    if max_order < 2:
        raise UsageError(f"max_order must be >= 2, got {max_order}")
    docs = list(corpus)
    shards = max(1, int(shards))
    table = NGramTable(max_order, Counter(), basis)
    for s in range(shards):
        table = table.merge(_count_shard(docs[s::shards], basis, max_order))
    if table.rejected_lines:
        logger.warning("rejected %d malformed UTF-8 lines", table.rejected_lines)
    return table


# -- lexicon induction ----------------------------------------------------------


@dataclass(frozen=True)
class LexiconCriteria:
    min_frequency: int = 16
    min_dependence: float = 0.4
    max_ngram_order: int = 4

    def __post_init__(self):
        if not 0.0 <= self.min_dependence <= 1.0:
            raise UsageError(f"min_dependence must lie in [0, 1], got {self.min_dependence}")
        if self.max_ngram_order < 2:
            raise UsageError(f"max_ngram_order must be >= 2, got {self.max_ngram_order}")
        if self.min_frequency < 0:
            raise UsageError(f"min_frequency must be >= 0, got {self.min_frequency}")


def dependence(table: NGramTable, gram: tuple) -> float:
    prefix = table.counts.get(gram[:-1], 0)
    return table.counts.get(gram, 0) / prefix if prefix else 0.0


def build_phrase_lexicon(table: NGramTable, criteria: LexiconCriteria) -> Vocabulary:
    """Coarse vocabulary: frequent singletons plus frequent, dependent n-grams.

    Entries after the specials are ordered by (length desc, count desc, surface).
    """
    order = min(criteria.max_ngram_order, table.max_order)
    kept = []
    for gram, c in table.counts.items():
        k = len(gram)
        if k > order or c < criteria.min_frequency:
            continue
        if k > 1 and dependence(table, gram) < criteria.min_dependence:
            continue
        kept.append((k, c, table.joiner.join(gram)))
    kept.sort(key=lambda e: (-e[0], -e[1], e[2]))
    return Vocabulary.from_entries("coarse", ((s, c) for _, c, s in kept))


def phrase_units(token: str, mode: str) -> int:
    """Number of basis units a coarse surface string spans."""
    return len(token) if mode == "char" else len(token.split(" "))


# -- fine vocabulary ------------------------------------------------------------


def build_fine_vocab(corpus: Iterable[str], mode: str = "subword", target_size: int = 30_522,
                     min_frequency: int = 2) -> Vocabulary:
    """Fine-grained inventory.

    ``char``: every distinct non-space character seen at least
    ``min_frequency`` times (most frequent first, capped at ``target_size``).

    ``subword``: every character needed to spell the corpus (word-initial and
    ``##`` forms), then whole words with count >= ``min_frequency`` by
    frequency, then prefix/``##`` suffix pieces of those words scored by
    characters saved, up to ``target_size`` entries in total.
    """
    if target_size <= NUM_SPECIAL:
        raise UsageError(f"target_size must exceed {NUM_SPECIAL} to hold the special tokens")
    budget = target_size - NUM_SPECIAL
    docs = [d for d in (_decode(x) for x in corpus) if d is not None]

    if mode == "char":
        chars = Counter(c for d in docs for c in normalize(d, "char") if not c.isspace())
        ranked = sorted((t for t in chars.items() if t[1] >= min_frequency), key=lambda t: (-t[1], t[0]))
        return Vocabulary.from_entries("fine", ranked[:budget])
    if mode != "subword":
        raise UsageError(f"unknown fine mode {mode!r}; expected 'char' or 'subword'")

    words = Counter(w for d in docs for w in normalize(d, "subword").split())
    pieces: Counter = Counter()
    for w, c in words.items():
        pieces[w[0]] += c
        for ch in w[1:]:
            pieces["##" + ch] += c
    chosen = sorted(pieces.items(), key=lambda t: (-t[1], t[0]))[:budget]
    have = {t for t, _ in chosen}

    frequent = [(w, c) for w, c in words.items() if c >= min_frequency and len(w) > 1]
    for w, c in sorted(frequent, key=lambda t: (-t[1], t[0])):
        if len(chosen) >= budget:
            break
        if w not in have:
            chosen.append((w, c))
            have.add(w)

    if len(chosen) < budget:
        affix: Counter = Counter()
        for w, c in frequent:
            for i in range(2, len(w)):
                affix[w[:i]] += c
            for i in range(1, len(w) - 1):
                affix["##" + w[i:]] += c
        scored = sorted(
            ((t, c) for t, c in affix.items() if t not in have),
            key=lambda t: (-t[1] * (len(t[0].removeprefix("##")) - 1), t[0]),
        )
        chosen.extend(scored[: budget - len(chosen)])
    return Vocabulary.from_entries("fine", chosen)


# -- persistence ----------------------------------------------------------------


def save_vocab(v: Vocabulary, path) -> None:
    lines = []
    for i, (tok, c) in enumerate(zip(v.tokens, v.counts)):
        if "\t" in tok or "\n" in tok or "\r" in tok:
            raise DataError(f"token {tok!r} at id {i} contains a tab or newline")
        lines.append(f"{tok}\t{i}\t{c}\n")
    Path(path).write_bytes("".join(lines).encode("utf-8"))


def load_vocab(path, granularity: str = "fine") -> Vocabulary:
    """Parse the TSV format, rejecting duplicates, gaps and missing specials by line."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 ({e})") from None
    toks, counts, seen_ids, seen_toks = [], [], {}, {}
    for lineno, line in enumerate(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected token<TAB>id<TAB>count")
        tok, sid, sc = parts
        try:
            i, c = int(sid), int(sc)
        except ValueError:
            raise DataError(f"{path}:{lineno}: id and count must be integers") from None
        if i in seen_ids:
            raise DataError(f"{path}:{lineno}: id {i} already used at line {seen_ids[i]}")
        if tok in seen_toks:
            raise DataError(f"{path}:{lineno}: token {tok!r} already defined at line {seen_toks[tok]}")
        if i != lineno - 1:
            raise DataError(f"{path}:{lineno}: ids must be dense and in order; expected {lineno - 1}, got {i}")
        if c < 0:
            raise DataError(f"{path}:{lineno}: negative count")
        seen_ids[i] = lineno
        seen_toks[tok] = lineno
        toks.append(tok)
        counts.append(c)
    for sid, special in enumerate(SPECIALS):
        if special not in seen_toks:
            raise DataError(f"{path}: missing special token {special}")
        if seen_toks[special] != sid + 1:
            raise DataError(f"{path}:{seen_toks[special]}: special token {special} must have id {sid}")
    return Vocabulary(granularity, tuple(toks), tuple(counts))
