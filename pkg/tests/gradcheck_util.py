"""End-to-end finite-difference checks over every parameter of a tiny model (float64)."""

import numpy as np

from ambert import model as M
from ambert import nn
from ambert.finetune import classification_loss, init_heads, span_loss
from ambert.pretrain import make_mask_plan, masked_batch, mlm_loss, nsp_loss
from ambert.synthetic import random_pair, span_task

from conftest import tiny_config


# Gradients whose true value is zero (a bias that shifts every logit of a softmax
# equally) come out of central differences as ~1e-11 rounding noise on an O(10)
# loss; a 1e-6 norm floor keeps that noise from reading as relative error.
FLOOR = 1e-6


def worst_error(params, loss, grads, h=1e-5):
    """Largest relative error over the storage tensors of ``params``."""
    worst = 0.0
    for key in params.keys():
        num = nn.numeric_grad(loss, params.storage(key), h)
        ana = grads.get(key, np.zeros_like(num))
        worst = max(worst, nn.rel_error(ana, num, floor=FLOOR))
    return worst


def _pairs(cfg, seed, n=2):
    rng = np.random.default_rng(seed)
    return [random_pair(rng, cfg.fine_vocab_size, cfg.coarse_vocab_size, max_words=4) for _ in range(n)]


def mlm_case(variant, seed=0, nsp=False):
    cfg = tiny_config(variant, nsp=nsp)
    params = M.init_params(cfg, seed, dtype=np.float64)
    pairs = _pairs(cfg, seed)
    # make sure every example has something to predict
    plans = [make_mask_plan(p, 0.5, seed + i, (cfg.fine_vocab_size, cfg.coarse_vocab_size))
             for i, p in enumerate(pairs)]
    batch = masked_batch(pairs, plans)
    labels = [0, 1]

    def loss():
        out = M.forward(params, cfg, batch)
        total = mlm_loss(params, cfg, out, plans).total
        if nsp:
            total += nsp_loss(params, cfg, out, labels)
        return total

    out = M.forward(params, cfg, batch)
    _, lg = mlm_loss(params, cfg, out, plans, with_grad=True)
    d_fine, d_coarse, grads = lg.d_fine, lg.d_coarse, lg.grads
    if nsp:
        _, ng = nsp_loss(params, cfg, out, labels, with_grad=True)
        for k, g in ng.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        d_fine = ng.d_fine if d_fine is None else d_fine + ng.d_fine
        if ng.d_coarse is not None:
            d_coarse = ng.d_coarse if d_coarse is None else d_coarse + ng.d_coarse
    M.backward(params, cfg, out, d_fine, d_coarse, grads)
    return worst_error(params, loss, grads)


def classification_case(variant, lam=1.0, seed=0):
    cfg = tiny_config(variant)
    params = M.init_params(cfg, seed, dtype=np.float64)
    heads = init_heads(cfg, "classification", 3, seed, dtype=np.float64)
    # larger head weights so the agreement term is far from its non-smooth zero
    for k in heads.keys():
        heads.storage(k)[...] *= 50.0
    batch = M.collate(_pairs(cfg, seed, 3))
    labels = [0, 2, 1]

    def loss():
        return classification_loss(M.forward(params, cfg, batch), heads, labels, lam).total

    out = M.forward(params, cfg, batch)
    _, (d_fine, d_coarse, hg) = classification_loss(out, heads, labels, lam, with_grad=True)
    grads = M.backward(params, cfg, out, d_fine, d_coarse)
    return max(worst_error(params, loss, grads), worst_error(heads, loss, hg))


def span_case(variant, scorer, seed=0):
    cfg = tiny_config(variant)
    params = M.init_params(cfg, seed, dtype=np.float64)
    heads = init_heads(cfg, "span", seed=seed, dtype=np.float64)
    for k in heads.keys():
        heads.storage(k)[...] *= 20.0
    examples = span_task(2, seed, cfg.fine_vocab_size, cfg.coarse_vocab_size, length=5)
    batch = M.collate([e[0] for e in examples])
    answers = [e[1] for e in examples]

    def loss():
        return span_loss(M.forward(params, cfg, batch), heads, answers, scorer)

    out = M.forward(params, cfg, batch)
    _, (d_fine, d_coarse, hg) = span_loss(out, heads, answers, scorer, with_grad=True)
    grads = M.backward(params, cfg, out, d_fine, d_coarse)
    return max(worst_error(params, loss, grads), worst_error(heads, loss, hg))
