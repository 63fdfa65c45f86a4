"""Dual-encoder and single-encoder prediction, and dev-set encoder selection."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ambert import model as M
from ambert import nn
from ambert.config import ModelConfig
from ambert.errors import ModeError
from ambert.finetune import answerable_mask, best_span, head_logits, span_logits
from ambert.params import ModelParams

MODES = ("both", "fine_only", "coarse_only")
MODE_ALIASES = {"both": "both", "fine": "fine_only", "coarse": "coarse_only",
                "fine_only": "fine_only", "coarse_only": "coarse_only"}
_STREAMS = {"both": None, "fine_only": ("fine",), "coarse_only": ("coarse",)}


@dataclass
class Prediction:
    outputs: list  # labels, or inclusive (start, end) spans
    scores: np.ndarray
    flops: int


def check_mode(cfg: ModelConfig, heads: ModelParams, task: str, mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ModeError(f"unknown encoder mode {mode!r}")
    if mode != "both" and cfg.variant == "hybrid":
        raise ModeError(
            "hybrid checkpoints cannot drop an encoder: both token sequences pass through one "
            "encoder that attends across them at every layer"
        )
    if mode == "coarse_only" and cfg.variant == "bert":
        raise ModeError("single-encoder bert checkpoint has no coarse stream")
    if task == "span" and mode == "coarse_only":
        raise ModeError("span answers are fine-token positions; the coarse encoder alone cannot score them")
    need = _head_for(cfg, task, mode)
    if f"{need}.w" not in heads:
        raise ModeError(f"checkpoint has no {need} head for mode {mode}")
    return mode


def _head_for(cfg, task, mode):
    if task == "span":
        return "span_joint" if mode == "both" and len(cfg.streams) == 2 else "span_fine"
    if mode == "fine_only" or len(cfg.streams) == 1:
        return "head_x"
    return "head_z" if mode == "coarse_only" else "head_joint"


def predict(params: ModelParams, cfg: ModelConfig, heads: ModelParams, pairs, task="classification",
            mode="both", batch_size=64) -> Prediction:
    """Run the encoders the mode needs and the matching head.

    ``fine_only``/``coarse_only`` compute a single stream, so their cost is
    that of one BERT-sized encoder.
    """
    mode = check_mode(cfg, heads, task, mode)
    head = _head_for(cfg, task, mode)
    outputs, scores = [], []
    with nn.count_flops() as flops:
        for start in range(0, len(pairs), batch_size):
            batch = M.collate(pairs[start:start + batch_size])
            out = M.forward(params, cfg, batch, streams=_STREAMS[mode])
            if task == "classification":
                if head == "head_joint":
                    x = np.concatenate([out.fine_cls, out.coarse_cls], axis=-1)
                else:
                    x = out.fine_cls if head == "head_x" else out.coarse_cls
                logits, _ = head_logits(heads, head, x)
                outputs.extend(int(i) for i in logits.argmax(axis=-1))
                scores.append(logits)
            else:
                logits, _ = span_logits(out, heads, head)
                ok = answerable_mask(batch)
                for b in range(len(batch)):
                    n = len(batch.pairs[b].fine_ids)
                    outputs.append(best_span(logits[b, :n, 0], logits[b, :n, 1], ok[b, :n]))
                scores.extend(logits[b] for b in range(len(batch)))
    if task == "classification":
        scores = np.concatenate(scores) if scores else np.zeros((0, 0))
    return Prediction(outputs, scores, flops[0])


def span_f1(pred, gold):
    p = set(range(pred[0], pred[1] + 1))
    g = set(range(gold[0], gold[1] + 1))
    common = len(p & g)
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def evaluate(params, cfg, heads, examples, task="classification", mode="both") -> dict:
    pairs = [e[0] for e in examples]
    gold = [e[1] for e in examples]
    pred = predict(params, cfg, heads, pairs, task, mode)
    n = len(gold)
    if task == "classification":
        acc = sum(int(p == g) for p, g in zip(pred.outputs, gold)) / n
        return {"acc": acc, "n": n, "mode": MODE_ALIASES.get(mode, mode),
                "label_counts": dict(sorted(Counter(pred.outputs).items()))}
    em = sum(int(tuple(p) == tuple(g)) for p, g in zip(pred.outputs, gold)) / n
    f1 = sum(span_f1(p, g) for p, g in zip(pred.outputs, gold)) / n
    return {"em": em, "f1": f1, "n": n, "mode": MODE_ALIASES.get(mode, mode)}


def select_encoder(params, cfg, heads, dev, metric="acc", task="classification") -> str:
    """Pick the single encoder to keep, by dev score; ties and span tasks go to the fine encoder."""
    if not dev:
        raise ValueError("dev set must be non-empty")
    if task == "span":
        check_mode(cfg, heads, task, "fine_only")
        return "fine_only"
    fine = evaluate(params, cfg, heads, dev, task, "fine_only")[metric]
    coarse = evaluate(params, cfg, heads, dev, task, "coarse_only")[metric]
    return "coarse_only" if coarse > fine else "fine_only"
