"""Dense-tensor kernel with hand-written reverse-mode gradients.

Every op is a ``forward`` returning ``(out, cache)`` and a matching
``*_backward(dout, cache)``. Arrays keep the dtype they arrive with, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from ambert.errors import NumericError

LN_EPS = 1e-12
_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_flop_counters: list[list[int]] = []


@contextlib.contextmanager
def count_flops():
    """Count multiply-add FLOPs (2 per MAC) of every matmul issued inside the block."""
    box = [0]
    _flop_counters.append(box)
    try:
        yield box
    finally:
        _flop_counters.remove(box)


def _record(flops: int) -> None:
    for box in _flop_counters:
        box[0] += flops


def _check_shapes(op: str, a: np.ndarray, b: np.ndarray, ok: bool) -> None:
    if not ok:
        raise ValueError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Batched ``a @ b``; leading dims must match exactly (no broadcasting)."""
    _check_shapes(
        "matmul", a, b,
        a.ndim == b.ndim and a.ndim >= 2 and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2],
    )
    out = a @ b
    _record(2 * out.size * a.shape[-1])
    return out, (a, b)


def matmul_backward(dout, cache):
    a, b = cache
    return dout @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dout


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[in, out]``."""
    _check_shapes("linear", x, w, w.ndim == 2 and x.shape[-1] == w.shape[0])
    out = x @ w
    _record(2 * out.size * w.shape[0])
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


# -- elementwise ----------------------------------------------------------------


def add(a, b):
    _check_shapes("add", a, b, a.shape == b.shape)
    return a + b, None


def add_backward(dout, cache):
    return dout, dout


def gelu(x):
    """Exact (erf) GELU, as in BERT."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    return x * cdf, (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


def tanh(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


# -- normalisation --------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dout, cache):
    xhat, rstd, gamma = cache
    flat = dout.reshape(-1, dout.shape[-1])
    dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    dbeta = flat.sum(axis=0)
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# -- softmax / losses -----------------------------------------------------------


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, (p, axis)


def softmax_backward(dout, cache):
    p, axis = cache
    return p * (dout - (dout * p).sum(axis=axis, keepdims=True))


def log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Summed cross-entropy of rows of ``logits`` [N, V] against int ``targets`` [N]."""
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: incompatible shapes {tuple(logits.shape)} and {tuple(targets.shape)}"
        )
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].sum()
    return loss, (logp, targets)


def cross_entropy_backward(dloss, cache):
    logp, targets = cache
    g = np.exp(logp)
    g[np.arange(len(targets)), targets] -= 1.0
    return g * dloss


# -- embeddings / dropout -------------------------------------------------------


def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return table[ids], (ids, table.shape)


def embedding_backward(dout, cache):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable


def dropout(x, rate, rng):
    """Inverted dropout. ``rate == 0`` or ``rng is None`` is the identity."""
    if rate <= 0.0 or rng is None:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- optimiser ------------------------------------------------------------------


def learning_rate(step, peak, warmup, max_steps):
    """Linear warmup to ``peak`` then linear decay to zero at ``max_steps``.

    ``step`` is the 1-based index of the update being applied.
    """
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if max_steps <= warmup:
        return peak
    return peak * max(0.0, (max_steps - step) / (max_steps - warmup))


class Adam:
    """Adam with decoupled weight decay and the warmup/linear-decay schedule.

    Operates on storage keys of a :class:`ambert.params.ModelParams`, so a
    tensor shared by several names gets exactly one update from the summed
    gradient.
    """

    no_decay_suffixes = (".bias", ".b", ".gamma", ".beta")

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.01,
                 warmup=10_000, max_steps=500_000):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.max_steps = max_steps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self, step=None):
        step = self.step_count + 1 if step is None else step
        return learning_rate(step, self.lr, self.warmup, self.max_steps)

    def step(self, params, grads):
        """Apply one update in place. ``grads`` maps storage key -> gradient."""
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                names = ", ".join(params.aliases(key))
                raise NumericError(f"non-finite gradient for parameter {names}")
        t = self.step_count + 1
        lr = self.current_lr(t)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for key in params.keys():
            p = params.storage(key)
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not key.endswith(self.no_decay_suffixes):
                update = update + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)
        self.step_count = t
        return lr

    def hyper(self):
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "warmup": self.warmup, "max_steps": self.max_steps,
        }


def numeric_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b, floor=1e-8):
    """``|a-b| / max(|a|+|b|, floor)`` in the L2 norm.

    The floor keeps gradients that are identically zero (e.g. attention key
    biases, which softmax cancels) from turning rounding noise into error 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
