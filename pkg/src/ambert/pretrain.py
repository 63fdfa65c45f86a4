"""Span-consistent masking and the two-stream masked-LM objective.

A plan masks a budget of coarse tokens; every fine token inside a masked
coarse token's span is masked with the same action, so neither stream can
read a masked unit off the other granularity.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ambert import model as M
from ambert import nn
from ambert.config import ModelConfig
from ambert.errors import DataError, NumericError
from ambert.params import Grads, ModelParams
from ambert.tokenizer import TokenSeqPair
from ambert.vocab import MASK_ID, NUM_SPECIAL, SEP_ID

logger = logging.getLogger(__name__)

MASK, RANDOM, KEEP = "mask", "random", "keep"


@dataclass(frozen=True)
class MaskPlan:
    """Which positions of each stream are masked, how, and what they were.

    ``*_flags``/``*_actions`` cover every position of the stream (``None``
    action = untouched); ``*_inputs`` are the corrupted id sequences fed to
    the encoders.
    """

    coarse_flags: tuple[bool, ...]
    fine_flags: tuple[bool, ...]
    coarse_actions: tuple
    fine_actions: tuple
    coarse_targets: tuple[int, ...]
    fine_targets: tuple[int, ...]
    coarse_inputs: tuple[int, ...]
    fine_inputs: tuple[int, ...]
    seed: int

    @property
    def coarse_positions(self):
        return [j for j, f in enumerate(self.coarse_flags) if f]

    @property
    def fine_positions(self):
        return [i for i, f in enumerate(self.fine_flags) if f]


def mask_budget(num_eligible: int, rate: float) -> int:
    """Round-half-up of ``rate * n``, at least one token when rate > 0 and n > 0."""
    if num_eligible == 0 or rate <= 0.0:
        return 0
    return min(num_eligible, max(1, math.floor(rate * num_eligible + 0.5)))


def make_mask_plan(pair: TokenSeqPair, rate: float = 0.15, seed: int = 0,
                   vocab_sizes: tuple[int, int] | None = None) -> MaskPlan:
    """Sample coarse tokens to mask and project them onto the fine stream.

    Eligible coarse tokens are the interior ones other than a separating
    [SEP]. Each chosen token is replaced by [MASK] (80%), a random
    non-special id of its stream (10%) or kept (10%); its fine span follows.
    ``vocab_sizes`` = (fine, coarse) bounds the random replacements.
    """
    rng = np.random.default_rng(seed)
    fine_in = list(pair.fine_ids)
    coarse_in = list(pair.coarse_ids)
    c_flags = [False] * len(coarse_in)
    f_flags = [False] * len(fine_in)
    c_act = [None] * len(coarse_in)
    f_act = [None] * len(fine_in)
    eligible = [j for j in range(1, len(coarse_in) - 1) if coarse_in[j] != SEP_ID]
    k = mask_budget(len(eligible), rate)
    chosen = sorted(rng.choice(len(eligible), size=k, replace=False).tolist()) if k else []
    fine_v, coarse_v = vocab_sizes or (max(fine_in) + 1, max(coarse_in) + 1)
    for idx in chosen:
        j = eligible[idx]
        u = rng.random()
        action = MASK if u < 0.8 else (RANDOM if u < 0.9 else KEEP)
        start, end = pair.alignment[j - 1]
        c_flags[j] = True
        c_act[j] = action
        if action == MASK:
            coarse_in[j] = MASK_ID
        elif action == RANDOM:
            coarse_in[j] = int(rng.integers(NUM_SPECIAL, max(coarse_v, NUM_SPECIAL + 1)))
        for i in range(start, end):
            f_flags[i] = True
            f_act[i] = action
            if action == MASK:
                fine_in[i] = MASK_ID
            elif action == RANDOM:
                fine_in[i] = int(rng.integers(NUM_SPECIAL, max(fine_v, NUM_SPECIAL + 1)))
    return MaskPlan(
        tuple(c_flags), tuple(f_flags), tuple(c_act), tuple(f_act),
        tuple(pair.coarse_ids[j] for j in range(len(c_flags)) if c_flags[j]),
        tuple(pair.fine_ids[i] for i in range(len(f_flags)) if f_flags[i]),
        tuple(coarse_in), tuple(fine_in), int(seed),
    )


def masked_batch(pairs, plans) -> M.Batch:
    return M.collate(pairs, fine_ids=[p.fine_inputs for p in plans],
                     coarse_ids=[p.coarse_inputs for p in plans])


# -- losses ---------------------------------------------------------------------


@dataclass
class LossBreakdown:
    fine_term: float
    coarse_term: float
    total: float
    fine_correct: int = 0
    fine_count: int = 0
    coarse_correct: int = 0
    coarse_count: int = 0


@dataclass
class LossGrad:
    d_fine: np.ndarray | None
    d_coarse: np.ndarray | None
    grads: Grads


def _targets(plans, stream, width):
    rows, cols, ids = [], [], []
    for b, p in enumerate(plans):
        flags = p.fine_flags if stream == "fine" else p.coarse_flags
        targets = p.fine_targets if stream == "fine" else p.coarse_targets
        pos = [i for i, f in enumerate(flags) if f]
        if pos and pos[-1] >= width:
            raise DataError(f"mask plan {b} addresses {stream} position {pos[-1]} beyond output length {width}")
        rows.extend([b] * len(pos))
        cols.extend(pos)
        ids.extend(targets)
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(ids, dtype=np.int64)


def mlm_loss(params: ModelParams, cfg: ModelConfig, out: M.ForwardOutput, plans: list[MaskPlan],
             with_grad: bool = False):
    """Cross-entropy summed over masked positions of each stream.

    Returns a :class:`LossBreakdown`, plus a :class:`LossGrad` when
    ``with_grad``. The same code covers both the independent-stream
    objective and the hybrid one: under hybrid the hidden states already
    condition on both sequences.
    """
    if len(plans) != len(out.batch):
        raise DataError(f"{len(plans)} mask plans for a batch of {len(out.batch)}")
    terms = {}
    stats = {}
    lg = LossGrad(None, None, Grads(params)) if with_grad else None
    for stream in cfg.streams:
        h = out.hidden(stream)
        if h is None:
            raise DataError(f"forward output lacks the {stream} stream")
        for b, p in enumerate(plans):
            n = len(p.fine_flags if stream == "fine" else p.coarse_flags)
            if n != int(out.batch.stream(stream)[2][b].sum()):
                raise DataError(f"mask plan {b} covers {n} {stream} positions, sequence has "
                                f"{int(out.batch.stream(stream)[2][b].sum())}")
        rows, cols, ids = _targets(plans, stream, h.shape[1])
        if len(ids) == 0:
            terms[stream] = 0.0
            stats[stream] = (0, 0)
            continue
        logits, cache = M.mlm_logits(params, cfg, stream, h[rows, cols])
        loss, ce_cache = nn.cross_entropy(logits, ids)
        terms[stream] = float(loss)
        stats[stream] = (int((logits.argmax(axis=1) == ids).sum()), len(ids))
        if with_grad:
            dlogits = nn.cross_entropy_backward(h.dtype.type(1.0), ce_cache)
            dsel = M.mlm_logits_backward(cfg, stream, dlogits, cache, lg.grads)
            dh = np.zeros_like(h)
            np.add.at(dh, (rows, cols), dsel)
            if stream == "fine":
                lg.d_fine = dh
            else:
                lg.d_coarse = dh
    fine = terms.get("fine", 0.0)
    coarse = terms.get("coarse", 0.0)
    res = LossBreakdown(fine, coarse, fine + coarse,
                        *stats.get("fine", (0, 0)), *stats.get("coarse", (0, 0)))
    return (res, lg) if with_grad else res


def nsp_loss(params: ModelParams, cfg: ModelConfig, out: M.ForwardOutput, labels, with_grad=False):
    """Two-way softmax (equivalently logistic) loss on the concatenated [CLS] vectors."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise DataError("next-sentence labels must be 0 or 1")
    if "nsp.w" not in params:
        raise DataError("model was built without an NSP head")
    feats = [out.fine_cls] + ([out.coarse_cls] if len(cfg.streams) == 2 else [])
    x = np.concatenate(feats, axis=-1)
    logits, c_lin = nn.linear(x, params["nsp.w"], params["nsp.b"])
    loss, c_ce = nn.cross_entropy(logits, labels)
    if not with_grad:
        return float(loss)
    grads = Grads(params)
    dlogits = nn.cross_entropy_backward(x.dtype.type(1.0), c_ce)
    dx, dw, db = nn.linear_backward(dlogits, c_lin)
    grads.add("nsp.w", dw)
    grads.add("nsp.b", db)
    d = cfg.hidden
    d_fine = np.zeros_like(out.fine_hidden)
    d_fine[:, 0] = dx[:, :d]
    d_coarse = None
    if len(cfg.streams) == 2:
        d_coarse = np.zeros_like(out.coarse_hidden)
        d_coarse[:, 0] = dx[:, d:]
    return float(loss), LossGrad(d_fine, d_coarse, grads)


# -- training -------------------------------------------------------------------


@dataclass
class PretrainState:
    params: ModelParams
    optimizer: nn.Adam
    step: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    def rng_state(self):
        # every random draw of step t derives from (seed, t); this pair is the full state
        return {"seed": self.seed, "next_step": self.step + 1}


def _merge(into: Grads, other: Grads):
    for k, g in other.items():
        into[k] = into[k] + g if k in into else g


def step_seeds(seed: int, step: int, batch_size: int, num_examples: int):
    """Example indices, per-example mask seeds and the dropout seed of one step."""
    rng = np.random.default_rng([seed, step])
    idx = rng.choice(num_examples, size=min(batch_size, num_examples), replace=False)
    mask_seeds = rng.integers(0, 2**31 - 1, size=len(idx))
    dropout_seed = int(rng.integers(0, 2**31 - 1))
    return idx, mask_seeds, dropout_seed


def train_step(state: PretrainState, cfg: ModelConfig, pairs: list[TokenSeqPair], batch_size: int,
               mask_rate: float = 0.15, nsp_labels=None) -> tuple[LossBreakdown, float]:
    step = state.step + 1
    idx, mask_seeds, dropout_seed = step_seeds(state.seed, step, batch_size, len(pairs))
    batch_pairs = [pairs[i] for i in idx]
    sizes = (cfg.fine_vocab_size, cfg.coarse_vocab_size)
    plans = [make_mask_plan(p, mask_rate, int(s), sizes) for p, s in zip(batch_pairs, mask_seeds)]
    out = M.forward(state.params, cfg, masked_batch(batch_pairs, plans), train=True, seed=dropout_seed)
    loss, lg = mlm_loss(state.params, cfg, out, plans, with_grad=True)
    d_fine, d_coarse, grads = lg.d_fine, lg.d_coarse, lg.grads
    total = loss.total
    if nsp_labels is not None:
        nl, ng = nsp_loss(state.params, cfg, out, [nsp_labels[i] for i in idx], with_grad=True)
        total += nl
        _merge(grads, ng.grads)
        d_fine = ng.d_fine if d_fine is None else d_fine + ng.d_fine
        if ng.d_coarse is not None:
            d_coarse = ng.d_coarse if d_coarse is None else d_coarse + ng.d_coarse
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss {total} at step {step}")
    M.backward(state.params, cfg, out, d_fine, d_coarse, grads)
    lr = state.optimizer.step(state.params, grads)
    state.step = step
    return loss, lr


def pretrain_loop(pairs: list[TokenSeqPair], cfg: ModelConfig, optimizer: nn.Adam, steps: int,
                  batch_size: int, seed: int = 0, mask_rate: float = 0.15, state: PretrainState | None = None,
                  params: ModelParams | None = None, log_interval: int = 100, checkpoint_interval: int = 1000,
                  nsp_labels=None, log=None):
    """Train until ``steps`` and yield the state at every checkpoint interval and at the end.

    Results depend only on (pairs, config, optimizer hyper-parameters, seed);
    passing a yielded ``state`` back in resumes exactly.
    """
    if state is None:
        state = PretrainState(params if params is not None else M.init_params(cfg, seed), optimizer, 0, seed)
    t0 = time.perf_counter()
    while state.step < steps:
        loss, lr = train_step(state, cfg, pairs, batch_size, mask_rate, nsp_labels)
        record = {"step": state.step, "lr": lr, "fine_term": loss.fine_term,
                  "coarse_term": loss.coarse_term, "total": loss.total}
        state.history.append(record)
        if log is not None and (state.step % log_interval == 0 or state.step == 1):
            wall = int((time.perf_counter() - t0) * 1000)
            log(json.dumps({**record, "wall_ms": wall}, sort_keys=True))
        if state.step % checkpoint_interval == 0 or state.step == steps:
            yield state


def evaluate_mlm(params: ModelParams, cfg: ModelConfig, pairs: list[TokenSeqPair], seed: int = 0,
                 mask_rate: float = 0.15, batch_size: int = 64) -> LossBreakdown:
    """Masked-LM loss and top-1 accuracy over ``pairs`` with fixed, seed-derived plans."""
    sizes = (cfg.fine_vocab_size, cfg.coarse_vocab_size)
    agg = LossBreakdown(0.0, 0.0, 0.0)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        plans = [make_mask_plan(p, mask_rate, seed * 1_000_003 + start + i, sizes) for i, p in enumerate(chunk)]
        out = M.forward(params, cfg, masked_batch(chunk, plans))
        r = mlm_loss(params, cfg, out, plans)
        agg.fine_term += r.fine_term
        agg.coarse_term += r.coarse_term
        agg.fine_correct += r.fine_correct
        agg.fine_count += r.fine_count
        agg.coarse_correct += r.coarse_correct
        agg.coarse_count += r.coarse_count
    agg.total = agg.fine_term + agg.coarse_term
    return agg
