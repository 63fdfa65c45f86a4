"""Diagnostics: attention maps, distance between the two [CLS] vectors, coarse-token rate."""

from __future__ import annotations

import math

import numpy as np

from ambert import model as M
from ambert.errors import DataError, ModeError, UsageError
from ambert.tokenizer import TokenSeqPair, Tokenizer


def attention_map(params, cfg, pair: TokenSeqPair, layer: int, head: int, stream: str = "fine",
                  tokenizer: Tokenizer | None = None):
    """Attention probabilities of one layer/head with row and column token labels.

    Dual-stream models give one map per stream; hybrid gives a single map
    over the concatenated sequence (``stream`` is then ignored).
    """
    if not 0 <= layer < cfg.layers:
        raise UsageError(f"layer {layer} out of range [0, {cfg.layers})")
    if not 0 <= head < cfg.heads:
        raise UsageError(f"head {head} out of range [0, {cfg.heads})")
    out = M.forward(params, cfg, pair)
    if cfg.variant == "hybrid":
        mat = out.attention["joint"][layer][0, head]
        labels = _labels(pair.fine_ids, "fine", tokenizer) + _labels(pair.coarse_ids, "coarse", tokenizer)
        return mat, labels
    if stream not in out.attention:
        raise UsageError(f"variant {cfg.variant} has no {stream} stream")
    ids = pair.fine_ids if stream == "fine" else pair.coarse_ids
    return out.attention[stream][layer][0, head], _labels(ids, stream, tokenizer)


def _labels(ids, stream, tokenizer):
    if tokenizer is None:
        return [str(i) for i in ids]
    v = tokenizer.fine if stream == "fine" else tokenizer.coarse
    return [v.token(i) for i in ids]


def format_grid(matrix, labels) -> str:
    """Header of column tokens, then one row per token with 6-decimal probabilities."""
    labels = [lab.replace("\t", " ") for lab in labels]
    lines = ["\t" + "\t".join(labels)]
    for lab, row in zip(labels, matrix):
        lines.append(lab + "\t" + "\t".join(f"{x:.6f}" for x in row))
    return "\n".join(lines) + "\n"


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return 1.0 - float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def normalized_euclidean(u, v) -> float:
    """Euclidean distance between the L2-normalized vectors (equals sqrt(2 * cosine distance))."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(u / np.linalg.norm(u) - v / np.linalg.norm(v)))


def _pairwise_mean(xs) -> float:
    xs = list(xs)
    while len(xs) > 1:
        xs = [xs[i] + xs[i + 1] if i + 1 < len(xs) else xs[i] for i in range(0, len(xs), 2)]
    return xs[0]


def cls_distance(params, cfg, pairs, batch_size=64) -> dict:
    """Mean cosine and normalized Euclidean distance between fine and coarse [CLS] vectors."""
    if not cfg.dual:
        raise ModeError(f"{cfg.variant} checkpoints do not have two independent [CLS] representations")
    if not pairs:
        raise DataError("empty dataset")
    cds, eds = [], []
    for start in range(0, len(pairs), batch_size):
        out = M.forward(params, cfg, M.collate(pairs[start:start + batch_size]))
        for u, v in zip(out.fine_cls, out.coarse_cls):
            cds.append(cosine_distance(u, v))
            eds.append(normalized_euclidean(u, v))
    n = len(cds)
    return {"cosine_distance_mean": _pairwise_mean(cds) / n,
            "normalized_euclidean_mean": _pairwise_mean(eds) / n, "n": n}


def coarse_rate(texts, tokenizer: Tokenizer) -> float:
    """Share of coarse tokens whose surface string is missing from the fine vocabulary."""
    absent = total = 0
    for t in texts:
        _, coarse, _ = tokenizer.segment(t)
        total += len(coarse)
        absent += sum(1 for c in coarse if c not in tokenizer.fine)
    if total == 0:
        raise DataError("empty sample: no coarse tokens")
    return absent / total


def ed_from_cd(cd: float) -> float:
    return math.sqrt(max(0.0, 2.0 * cd))
