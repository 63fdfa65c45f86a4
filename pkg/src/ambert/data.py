"""Corpus and task-file ingestion."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from ambert.errors import DataError
from ambert.tokenizer import Tokenizer, fine_char_spans
from ambert.vocab import normalize


def read_lines(path) -> list[bytes]:
    data = Path(path).read_bytes()
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    return [ln.rstrip(b"\r") for ln in lines]


def decode_lines(raw: list[bytes]) -> tuple[list[str], int]:
    out, bad = [], 0
    for ln in raw:
        try:
            out.append(ln.decode("utf-8"))
        except UnicodeDecodeError:
            bad += 1
    return out, bad


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _text_lines(path):
    for lineno, raw in enumerate(read_lines(path), 1):
        try:
            yield lineno, raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{path}:{lineno}: not valid UTF-8") from None


def read_classification(path, tokenizer: Tokenizer, num_labels: int, max_len: int = 128):
    """``text_a<TAB>text_b?<TAB>label`` lines (``text_b`` may be absent or empty)."""
    out = []
    for lineno, line in _text_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 2:
            a, b, lab = parts[0], None, parts[1]
        elif len(parts) == 3:
            a, b, lab = parts[0], parts[1] or None, parts[2]
        else:
            raise DataError(f"{path}:{lineno}: expected text_a<TAB>[text_b<TAB>]label")
        try:
            y = int(lab)
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
        if not 0 <= y < num_labels:
            raise DataError(f"{path}:{lineno}: label {y} outside [0, {num_labels})")
        out.append((tokenizer.encode(a, b, max_len, max_len), y))
    return out


def char_span_to_fine(context: str, char_start: int, char_end: int, tokenizer: Tokenizer):
    """Map a half-open character span of ``context`` to inclusive fine-token indices (0-based)."""
    if not 0 <= char_start < char_end <= len(context):
        raise ValueError(f"character span [{char_start}, {char_end}) invalid for context of {len(context)}")
    mode = tokenizer.mode
    s = len(normalize(context[:char_start], mode))
    e = len(normalize(context[:char_end], mode))
    spans = fine_char_spans(context, tokenizer.fine, mode)
    hit = [i for i, (a, b) in enumerate(spans) if a < e and b > s]
    if not hit:
        raise ValueError("character span covers no token")
    return hit[0], hit[-1]


def read_span(path, tokenizer: Tokenizer, max_len: int = 512):
    """``context<TAB>question<TAB>char_start<TAB>char_end`` lines; answers become fine positions."""
    out = []
    for lineno, line in _text_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected context<TAB>question<TAB>char_start<TAB>char_end")
        context, question, cs, ce = parts
        try:
            first, last = char_span_to_fine(context, int(cs), int(ce), tokenizer)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        pair = tokenizer.encode(context, question, max_len, max_len)
        start, end = first + 1, last + 1  # after [CLS]
        ctx_end = pair.fine_segments.index(1) - 1 if 1 in pair.fine_segments else len(pair.fine_ids) - 1
        if end >= ctx_end:
            raise DataError(f"{path}:{lineno}: answer truncated away by max length {max_len}")
        out.append((pair, (start, end)))
    return out


def nsp_examples(texts: list[str], tokenizer: Tokenizer, seed: int, max_fine_len: int, max_coarse_len: int):
    """Consecutive-line pairs: label 1 keeps the true next line, label 0 swaps in a random one."""
    rng = np.random.default_rng([seed, 17])
    pairs, labels = [], []
    for i in range(len(texts) - 1):
        if rng.random() < 0.5:
            b, y = texts[i + 1], 1
        else:
            j = int(rng.integers(len(texts)))
            b, y = texts[j], int(j == i + 1)
        pairs.append(tokenizer.encode(texts[i], b, max_fine_len, max_coarse_len))
        labels.append(y)
    return pairs, labels
