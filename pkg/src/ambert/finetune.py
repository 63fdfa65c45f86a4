"""Task heads and the regularized fine-tuning objective.

Classification trains three heads at once: one per stream's [CLS] vector
and one on their concatenation, plus an L2 penalty pulling the two
single-stream predictive distributions together. The single-stream heads
are what single-encoder inference later uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ambert import model as M
from ambert import nn
from ambert.config import FineTuneConfig, ModelConfig
from ambert.errors import DataError, NumericError
from ambert.params import Grads, ModelParams
from ambert.vocab import SEP_ID


def init_heads(cfg: ModelConfig, task: str = "classification", num_labels: int = 2, seed: int = 0,
               dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.hidden
    heads = ModelParams()

    def lin(name, fan_in, fan_out):
        heads.add(f"{name}.w", M._trunc_normal(rng, (fan_in, fan_out), cfg.init_std, dtype))
        heads.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))

    if task == "classification":
        lin("head_x", d, num_labels)
        if len(cfg.streams) == 2:
            lin("head_z", d, num_labels)
            lin("head_joint", 2 * d, num_labels)
    else:
        lin("span_fine", d, 2)
        if len(cfg.streams) == 2:
            lin("span_joint", 2 * d, 2)
    return heads


def head_logits(heads: ModelParams, name: str, x):
    return nn.linear(x, heads[f"{name}.w"], heads[f"{name}.b"])


# -- classification -------------------------------------------------------------


@dataclass
class ClassificationBreakdown:
    ce_x: float
    ce_z: float
    ce_joint: float
    agreement: float  # sum over the batch of ||p_x - p_z||_2
    reg: float  # lambda * agreement, the term actually added
    total: float


def classification_loss(out: M.ForwardOutput, heads: ModelParams, labels, lam: float,
                        with_grad: bool = False):
    """``ce_x + ce_z + ce_joint + lam * ||softmax(x) - softmax(z)||``, summed over the batch.

    A single-stream (bert) model has only ``head_x``; the other terms are 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_labels = heads["head_x.b"].shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= num_labels):
        raise DataError(f"label outside [0, {num_labels})")
    rx = out.fine_cls
    lx, c_x = head_logits(heads, "head_x", rx)
    ce_x, cc_x = nn.cross_entropy(lx, labels)
    dual = "head_z.w" in heads
    if not dual:
        total = float(ce_x)
        res = ClassificationBreakdown(float(ce_x), 0.0, 0.0, 0.0, 0.0, total)
        if not with_grad:
            return res
        g = Grads(heads)
        dx, dw, db = nn.linear_backward(nn.cross_entropy_backward(rx.dtype.type(1.0), cc_x), c_x)
        g.add("head_x.w", dw)
        g.add("head_x.b", db)
        d_fine = np.zeros_like(out.fine_hidden)
        d_fine[:, 0] = dx
        return res, (d_fine, None, g)

    rz = out.coarse_cls
    lz, c_z = head_logits(heads, "head_z", rz)
    xj = np.concatenate([rx, rz], axis=-1)
    lj, c_j = head_logits(heads, "head_joint", xj)
    ce_z, cc_z = nn.cross_entropy(lz, labels)
    ce_j, cc_j = nn.cross_entropy(lj, labels)
    px, c_px = nn.softmax(lx)
    pz, c_pz = nn.softmax(lz)
    diff = px - pz
    norms = np.sqrt((diff * diff).sum(axis=-1))
    agreement = float(norms.sum())
    reg = lam * agreement
    total = float(ce_x) + float(ce_z) + float(ce_j) + reg
    res = ClassificationBreakdown(float(ce_x), float(ce_z), float(ce_j), agreement, reg, total)
    if not with_grad:
        return res

    one = rx.dtype.type(1.0)
    g = Grads(heads)
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    dnorm = np.where(norms[:, None] > 0, diff / safe, 0.0).astype(rx.dtype) * rx.dtype.type(lam)
    dlx = nn.cross_entropy_backward(one, cc_x) + nn.softmax_backward(dnorm, c_px)
    dlz = nn.cross_entropy_backward(one, cc_z) + nn.softmax_backward(-dnorm, c_pz)
    dlj = nn.cross_entropy_backward(one, cc_j)
    drx, dw, db = nn.linear_backward(dlx, c_x)
    g.add("head_x.w", dw)
    g.add("head_x.b", db)
    drz, dw, db = nn.linear_backward(dlz, c_z)
    g.add("head_z.w", dw)
    g.add("head_z.b", db)
    dxj, dw, db = nn.linear_backward(dlj, c_j)
    g.add("head_joint.w", dw)
    g.add("head_joint.b", db)
    d = rx.shape[-1]
    d_fine = np.zeros_like(out.fine_hidden)
    d_coarse = np.zeros_like(out.coarse_hidden)
    d_fine[:, 0] = drx + dxj[:, :d]
    d_coarse[:, 0] = drz + dxj[:, d:]
    return res, (d_fine, d_coarse, g)


# -- span detection -------------------------------------------------------------


def _cover_index(batch: M.Batch) -> np.ndarray:
    width = batch.fine_ids.shape[1]
    cov = np.zeros((len(batch), width), dtype=np.int64)
    for b, p in enumerate(batch.pairs):
        cov[b, :len(p.fine_ids)] = p.cover()
    return cov


def answerable_mask(batch: M.Batch) -> np.ndarray:
    """Fine positions a span may start/end at: interior, non-[SEP], non-padding."""
    ok = batch.fine_valid.copy()
    ok[:, 0] = False
    ok &= batch.fine_ids != SEP_ID
    return ok


def span_features(out: M.ForwardOutput, joint: bool = True):
    """``[h_fine_i, h_coarse_cover(i)]`` for every fine position (or just ``h_fine_i``)."""
    if not joint:
        return out.fine_hidden, None
    cov = _cover_index(out.batch)
    rows = np.arange(len(out.batch))[:, None]
    gathered = out.coarse_hidden[rows, cov]
    return np.concatenate([out.fine_hidden, gathered], axis=-1), cov


def span_logits(out: M.ForwardOutput, heads: ModelParams, scorer: str):
    feats, cov = span_features(out, joint=scorer == "span_joint")
    logits, c_lin = head_logits(heads, scorer, feats)
    ok = answerable_mask(out.batch)
    logits = np.where(ok[..., None], logits, M.NEG_INF).astype(logits.dtype)
    return logits, (c_lin, cov, ok)


def span_loss(out: M.ForwardOutput, heads: ModelParams, answers, scorer: str = "span_joint",
              with_grad: bool = False):
    """Start and end cross-entropies over fine positions, summed over the batch.

    ``answers`` holds inclusive (start, end) fine positions per example.
    """
    answers = np.asarray(answers, dtype=np.int64).reshape(-1, 2)
    ok = answerable_mask(out.batch)
    for b, (s, e) in enumerate(answers):
        if not (0 <= s <= e < ok.shape[1]) or not ok[b, s] or not ok[b, e]:
            raise DataError(f"example {b}: answer [{s}, {e}] is outside the fine interior")
    logits, (c_lin, cov, _) = span_logits(out, heads, scorer)
    ls, cs = nn.cross_entropy(logits[..., 0], answers[:, 0])
    le, ce = nn.cross_entropy(logits[..., 1], answers[:, 1])
    loss = float(ls) + float(le)
    if not with_grad:
        return loss
    one = logits.dtype.type(1.0)
    dlog = np.stack([nn.cross_entropy_backward(one, cs), nn.cross_entropy_backward(one, ce)], axis=-1)
    dlog = np.where(ok[..., None], dlog, 0.0).astype(logits.dtype)
    dfeat, dw, db = nn.linear_backward(dlog, c_lin)
    g = Grads(heads)
    g.add(f"{scorer}.w", dw)
    g.add(f"{scorer}.b", db)
    d = out.fine_hidden.shape[-1]
    d_fine = dfeat[..., :d].copy()
    d_coarse = None
    if cov is not None:
        d_coarse = np.zeros_like(out.coarse_hidden)
        rows = np.broadcast_to(np.arange(len(out.batch))[:, None], cov.shape)
        np.add.at(d_coarse, (rows, cov), dfeat[..., d:])
    return loss, (d_fine, d_coarse, g)


def best_span(start_logits, end_logits, ok, max_len=30):
    """Highest ``start + end`` score with start <= end < start + max_len (ties: earliest)."""
    best, arg = -np.inf, (0, 0)
    idx = np.flatnonzero(ok)
    for s in idx:
        for e in idx[(idx >= s) & (idx < s + max_len)]:
            v = start_logits[s] + end_logits[e]
            if v > best:
                best, arg = v, (int(s), int(e))
    return arg


# -- loop -----------------------------------------------------------------------


def task_loss(params, cfg, heads, out, targets, ft: FineTuneConfig, with_grad=False):
    """Total fine-tuning loss for a batch; the span task sums the joint and fine-only scorers."""
    if ft.task == "classification":
        return classification_loss(out, heads, targets, ft.reg_lambda, with_grad)
    scorers = ["span_fine"] + (["span_joint"] if "span_joint.w" in heads else [])
    total, d_fine, d_coarse, grads = 0.0, None, None, Grads(heads)
    for sc in scorers:
        r = span_loss(out, heads, targets, sc, with_grad)
        if not with_grad:
            total += r
            continue
        loss, (df, dc, g) = r
        total += loss
        d_fine = df if d_fine is None else d_fine + df
        if dc is not None:
            d_coarse = dc if d_coarse is None else d_coarse + dc
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    return (total, (d_fine, d_coarse, grads)) if with_grad else total


def _scalar(r):
    return r.total if isinstance(r, ClassificationBreakdown) else r


def finetune_loop(train, dev, params: ModelParams, cfg: ModelConfig, ft: FineTuneConfig, log=None):
    """Fresh heads, then Adam on encoder + heads for ``ft.epochs`` passes.

    ``train``/``dev`` are lists of ``(TokenSeqPair, target)``; target is a
    label (classification) or an inclusive (start, end) fine span. Returns
    ``(params, heads, dev_metrics, history)``; ``params`` is updated in place.
    """
    from ambert.inference import evaluate

    if ft.task == "classification":
        bad = [i for i, (_, y) in enumerate(train) if not 0 <= int(y) < ft.num_labels]
        if bad:
            raise DataError(f"training example {bad[0] + 1}: label {train[bad[0]][1]} exceeds num_labels {ft.num_labels}")
    heads = init_heads(cfg, ft.task, ft.num_labels, ft.seed)
    steps_per_epoch = math.ceil(len(train) / ft.batch_size)
    total_steps = steps_per_epoch * ft.epochs
    enc_opt = nn.Adam(lr=ft.learning_rate, weight_decay=ft.weight_decay,
                      warmup=int(ft.warmup_fraction * total_steps), max_steps=total_steps)
    head_opt = nn.Adam(lr=ft.learning_rate, weight_decay=ft.weight_decay,
                       warmup=int(ft.warmup_fraction * total_steps), max_steps=total_steps)
    history = []
    for epoch in range(ft.epochs):
        order = np.random.default_rng([ft.seed, epoch]).permutation(len(train))
        for k in range(steps_per_epoch):
            idx = order[k * ft.batch_size:(k + 1) * ft.batch_size]
            pairs = [train[i][0] for i in idx]
            targets = [train[i][1] for i in idx]
            step = epoch * steps_per_epoch + k + 1
            out = M.forward(params, cfg, M.collate(pairs), train=True, seed=int(ft.seed * 7919 + step))
            res, (d_fine, d_coarse, head_grads) = task_loss(params, cfg, heads, out, targets, ft, True)
            loss = _scalar(res)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            grads = M.backward(params, cfg, out, d_fine, d_coarse)
            enc_opt.step(params, grads)
            head_opt.step(heads, head_grads)
            history.append({"step": step, "epoch": epoch, "loss": loss})
            if log is not None:
                log({"step": step, "epoch": epoch, "loss": loss})
    metrics = evaluate(params, cfg, heads, dev, ft.task, "both") if dev else {}
    return params, heads, metrics, history

