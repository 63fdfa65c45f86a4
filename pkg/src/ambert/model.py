"""AMBERT and its ablations as explicit forward/backward passes.

* ``ambert``: two streams, one set of encoder weights (shared storage), one
  token table per granularity.
* ``combo``: two streams with fully independent weights.
* ``hybrid``: one encoder over the concatenated fine+coarse sequence.
* ``bert``: a single fine-grained stream, the parameter-count baseline.

Transformer blocks are post-LN, as in the original BERT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ambert import nn
from ambert.config import ModelConfig
from ambert.errors import DataError, ModeError
from ambert.params import Grads, ModelParams
from ambert.tokenizer import TokenSeqPair
from ambert.vocab import PAD_ID

NEG_INF = -1e9

LAYER_SHAPES = (
    ("attn.q.w", "dd"), ("attn.q.b", "d"),
    ("attn.k.w", "dd"), ("attn.k.b", "d"),
    ("attn.v.w", "dd"), ("attn.v.b", "d"),
    ("attn.o.w", "dd"), ("attn.o.b", "d"),
    ("attn_ln.gamma", "d"), ("attn_ln.beta", "d"),
    ("ffn.in.w", "df"), ("ffn.in.b", "f"),
    ("ffn.out.w", "fd"), ("ffn.out.b", "d"),
    ("ffn_ln.gamma", "d"), ("ffn_ln.beta", "d"),
)


# -- naming ---------------------------------------------------------------------


def _is_per_stream(local: str) -> bool:
    return local in ("embeddings.token", "mlm.bias")


def pname(cfg: ModelConfig, stream: str, local: str) -> str:
    """Parameter name that ``stream`` uses for the component ``local``."""
    if cfg.variant == "hybrid" and not _is_per_stream(local):
        return local
    return f"{stream}.{local}"


def _shared_key(cfg: ModelConfig, local: str):
    if cfg.variant == "ambert" and not _is_per_stream(local):
        return local
    return None


# -- init -----------------------------------------------------------------------


def _trunc_normal(rng, shape, std, dtype):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, f = cfg.hidden, cfg.ffn_inner
    dims = {"d": d, "f": f}
    params = ModelParams()

    def add(stream, local, shape, kind):
        name = pname(cfg, stream, local)
        if name in params:
            return
        key = _shared_key(cfg, local)
        if key is not None and key in params.keys():
            params.add(name, params.storage(key), shared_key=key)
            return
        if kind == "normal":
            arr = _trunc_normal(rng, shape, cfg.init_std, dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        params.add(name, arr, shared_key=key)

    vocab = {"fine": cfg.fine_vocab_size, "coarse": cfg.coarse_vocab_size}
    for stream in cfg.streams:
        add(stream, "embeddings.token", (vocab[stream], d), "normal")
        add(stream, "embeddings.position", (cfg.max_positions, d), "normal")
        add(stream, "embeddings.segment", (cfg.type_vocab, d), "normal")
        if cfg.variant == "hybrid" and cfg.granularity_embedding:
            add(stream, "embeddings.granularity", (2, d), "normal")
        add(stream, "embeddings.ln.gamma", (d,), "ones")
        add(stream, "embeddings.ln.beta", (d,), "zeros")
        for k in range(cfg.layers):
            for local, spec in LAYER_SHAPES:
                shape = tuple(dims[c] for c in spec)
                kind = "normal" if local.endswith(".w") else ("ones" if local.endswith("gamma") else "zeros")
                add(stream, f"encoder.layer{k}.{local}", shape, kind)
        add(stream, "mlm.dense.w", (d, d), "normal")
        add(stream, "mlm.dense.b", (d,), "zeros")
        add(stream, "mlm.ln.gamma", (d,), "ones")
        add(stream, "mlm.ln.beta", (d,), "zeros")
        add(stream, "mlm.bias", (vocab[stream],), "zeros")
    if cfg.nsp:
        width = d * len(cfg.streams)
        params.add("nsp.w", _trunc_normal(rng, (width, 2), cfg.init_std, dtype))
        params.add("nsp.b", np.zeros(2, dtype=dtype))
    return params


def param_census(cfg: ModelConfig) -> int:
    """Closed-form parameter count, for cross-checking ``init_params``."""
    d, f, L = cfg.hidden, cfg.ffn_inner, cfg.layers
    layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    shared = cfg.max_positions * d + cfg.type_vocab * d + 2 * d + L * layer + (d * d + d) + 2 * d
    fine = cfg.fine_vocab_size * (d + 1)
    coarse = cfg.coarse_vocab_size * (d + 1)
    if cfg.variant == "bert":
        total = shared + fine
    elif cfg.variant == "ambert":
        total = shared + fine + coarse
    elif cfg.variant == "combo":
        total = 2 * shared + fine + coarse
    else:
        total = shared + fine + coarse + (2 * d if cfg.granularity_embedding else 0)
    if cfg.nsp:
        total += d * len(cfg.streams) * 2 + 2
    return total


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    fine_ids: np.ndarray
    fine_segments: np.ndarray
    fine_valid: np.ndarray
    coarse_ids: np.ndarray
    coarse_segments: np.ndarray
    coarse_valid: np.ndarray
    pairs: list = field(default_factory=list)

    def __len__(self):
        return self.fine_ids.shape[0]

    def stream(self, name):
        return getattr(self, f"{name}_ids"), getattr(self, f"{name}_segments"), getattr(self, f"{name}_valid")


def _pad(rows, width):
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(pairs: list[TokenSeqPair], fine_ids=None, coarse_ids=None) -> Batch:
    """Pad a list of pairs into arrays; ``*_ids`` override the token ids (e.g. masked copies)."""
    fine_rows = fine_ids if fine_ids is not None else [p.fine_ids for p in pairs]
    coarse_rows = coarse_ids if coarse_ids is not None else [p.coarse_ids for p in pairs]
    tf = max(len(r) for r in fine_rows)
    tc = max(len(r) for r in coarse_rows)
    fv = np.zeros((len(pairs), tf), dtype=bool)
    cv = np.zeros((len(pairs), tc), dtype=bool)
    for i, p in enumerate(pairs):
        fv[i, :len(p.fine_ids)] = True
        cv[i, :len(p.coarse_ids)] = True
    return Batch(
        _pad(fine_rows, tf), _pad([p.fine_segments for p in pairs], tf), fv,
        _pad(coarse_rows, tc), _pad([p.coarse_segments for p in pairs], tc), cv,
        list(pairs),
    )


# -- forward --------------------------------------------------------------------


@dataclass
class ForwardOutput:
    fine_hidden: np.ndarray | None
    coarse_hidden: np.ndarray | None
    attention: dict
    batch: Batch
    cache: dict = field(default=None, repr=False)

    @property
    def fine_cls(self):
        return None if self.fine_hidden is None else self.fine_hidden[:, 0]

    @property
    def coarse_cls(self):
        return None if self.coarse_hidden is None else self.coarse_hidden[:, 0]

    def hidden(self, stream):
        return self.fine_hidden if stream == "fine" else self.coarse_hidden


def _check_ids(cfg, stream, ids, valid):
    size = cfg.fine_vocab_size if stream == "fine" else cfg.coarse_vocab_size
    bad = np.argwhere(((ids < 0) | (ids >= size)) & valid)
    if bad.size:
        b, t = bad[0]
        raise DataError(f"{stream} stream: id {ids[b, t]} at example {b} position {t} is outside vocabulary of {size}")
    if ids.shape[1] > cfg.max_positions:
        raise DataError(f"{stream} stream: length {ids.shape[1]} exceeds max_positions {cfg.max_positions}")


def _embed(params, cfg, stream, ids, segs, rng, granularity=None):
    p = lambda local: params[pname(cfg, stream, local)]  # noqa: E731
    T = ids.shape[1]
    tok, c_tok = nn.embedding_lookup(p("embeddings.token"), ids)
    pos, c_pos = nn.embedding_lookup(p("embeddings.position"), np.broadcast_to(np.arange(T), ids.shape))
    seg, c_seg = nn.embedding_lookup(p("embeddings.segment"), segs)
    x = tok + pos + seg
    c_gran = None
    if granularity is not None:
        g, c_gran = nn.embedding_lookup(p("embeddings.granularity"), np.full(ids.shape, granularity))
        x = x + g
    h, c_ln = nn.layer_norm(x, p("embeddings.ln.gamma"), p("embeddings.ln.beta"))
    h, c_drop = nn.dropout(h, cfg.hidden_dropout, rng)
    return h, (c_tok, c_pos, c_seg, c_gran, c_ln, c_drop)


def _embed_backward(cfg, stream, dh, cache, grads):
    c_tok, c_pos, c_seg, c_gran, c_ln, c_drop = cache
    n = lambda local: pname(cfg, stream, local)  # noqa: E731
    dh = nn.dropout_backward(dh, c_drop)
    dx, dg, db = nn.layer_norm_backward(dh, c_ln)
    grads.add(n("embeddings.ln.gamma"), dg)
    grads.add(n("embeddings.ln.beta"), db)
    grads.add(n("embeddings.token"), nn.embedding_backward(dx, c_tok))
    grads.add(n("embeddings.position"), nn.embedding_backward(dx, c_pos))
    grads.add(n("embeddings.segment"), nn.embedding_backward(dx, c_seg))
    if c_gran is not None:
        grads.add(n("embeddings.granularity"), nn.embedding_backward(dx, c_gran))


def _split_heads(x, heads):
    B, T, d = x.shape
    return x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _layer(params, cfg, prefix, h, mask_bias, rng):
    p = lambda local: params[f"{prefix}.{local}"]  # noqa: E731
    H = cfg.heads
    scale = h.dtype.type(1.0 / math.sqrt(cfg.head_size))
    q, c_q = nn.linear(h, p("attn.q.w"), p("attn.q.b"))
    k, c_k = nn.linear(h, p("attn.k.w"), p("attn.k.b"))
    v, c_v = nn.linear(h, p("attn.v.w"), p("attn.v.b"))
    qh, kh, vh = _split_heads(q, H), _split_heads(k, H), _split_heads(v, H)
    scores, c_s = nn.matmul(qh, np.swapaxes(kh, -1, -2))
    scores = scores * scale + mask_bias
    probs, c_p = nn.softmax(scores)
    probs_d, c_pd = nn.dropout(probs, cfg.attention_dropout, rng)
    ctx, c_ctx = nn.matmul(probs_d, vh)
    a, c_o = nn.linear(_merge_heads(ctx), p("attn.o.w"), p("attn.o.b"))
    a, c_ad = nn.dropout(a, cfg.hidden_dropout, rng)
    h1, c_ln1 = nn.layer_norm(h + a, p("attn_ln.gamma"), p("attn_ln.beta"))
    f, c_f = nn.linear(h1, p("ffn.in.w"), p("ffn.in.b"))
    g, c_g = nn.gelu(f)
    f2, c_f2 = nn.linear(g, p("ffn.out.w"), p("ffn.out.b"))
    f2, c_fd = nn.dropout(f2, cfg.hidden_dropout, rng)
    h2, c_ln2 = nn.layer_norm(h1 + f2, p("ffn_ln.gamma"), p("ffn_ln.beta"))
    cache = (c_q, c_k, c_v, c_s, scale, c_p, c_pd, c_ctx, c_o, c_ad, c_ln1, c_f, c_g, c_f2, c_fd, c_ln2)
    return h2, probs, cache


def _layer_backward(cfg, prefix, dh2, cache, grads):
    (c_q, c_k, c_v, c_s, scale, c_p, c_pd, c_ctx, c_o, c_ad, c_ln1, c_f, c_g, c_f2, c_fd, c_ln2) = cache
    add = lambda local, g: grads.add(f"{prefix}.{local}", g)  # noqa: E731
    H = cfg.heads
    dsum2, dg2, db2 = nn.layer_norm_backward(dh2, c_ln2)
    add("ffn_ln.gamma", dg2)
    add("ffn_ln.beta", db2)
    df2 = nn.dropout_backward(dsum2, c_fd)
    dg, dw, db = nn.linear_backward(df2, c_f2)
    add("ffn.out.w", dw)
    add("ffn.out.b", db)
    df = nn.gelu_backward(dg, c_g)
    dh1_f, dw, db = nn.linear_backward(df, c_f)
    add("ffn.in.w", dw)
    add("ffn.in.b", db)
    dh1 = dsum2 + dh1_f
    dsum1, dg1, db1 = nn.layer_norm_backward(dh1, c_ln1)
    add("attn_ln.gamma", dg1)
    add("attn_ln.beta", db1)
    da = nn.dropout_backward(dsum1, c_ad)
    dctx_m, dw, db = nn.linear_backward(da, c_o)
    add("attn.o.w", dw)
    add("attn.o.b", db)
    dctx = _split_heads(dctx_m, H)
    dprobs_d, dvh = nn.matmul_backward(dctx, c_ctx)
    dprobs = nn.dropout_backward(dprobs_d, c_pd)
    dscores = nn.softmax_backward(dprobs, c_p) * scale
    dqh, dkhT = nn.matmul_backward(dscores, c_s)
    dkh = np.swapaxes(dkhT, -1, -2)
    dh = dsum1
    for name, dxh, c in (("q", dqh, c_q), ("k", dkh, c_k), ("v", dvh, c_v)):
        dx, dw, db = nn.linear_backward(_merge_heads(dxh), c)
        add(f"attn.{name}.w", dw)
        add(f"attn.{name}.b", db)
        dh = dh + dx
    return dh


def _mask_bias(valid, dtype):
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def _encoder(params, cfg, stream, h, valid, rng):
    bias = _mask_bias(valid, h.dtype)
    caches, attn = [], []
    for k in range(cfg.layers):
        h, probs, c = _layer(params, cfg, pname(cfg, stream, f"encoder.layer{k}"), h, bias, rng)
        caches.append(c)
        attn.append(probs)
    return h, attn, caches


def _encoder_backward(cfg, stream, dh, caches, grads):
    for k in reversed(range(cfg.layers)):
        dh = _layer_backward(cfg, pname(cfg, stream, f"encoder.layer{k}"), dh, caches[k], grads)
    return dh


def forward(params: ModelParams, cfg: ModelConfig, batch: Batch | TokenSeqPair, train: bool = False,
            seed: int | None = None, streams=None) -> ForwardOutput:
    """Contextualized representations for both streams.

    ``streams`` restricts a dual-stream model to a subset (single-encoder
    inference); hybrid models cannot run one stream alone.
    """
    if isinstance(batch, TokenSeqPair):
        batch = collate([batch])
    streams = tuple(streams or cfg.streams)
    for s in streams:
        if s not in cfg.streams:
            raise ModeError(f"variant {cfg.variant} has no {s} stream")
    if cfg.variant == "hybrid" and streams != ("fine", "coarse"):
        raise ModeError("hybrid attends across both streams jointly; it cannot run a single stream")
    rng = np.random.default_rng(seed) if train and seed is not None else (np.random.default_rng(0) if train else None)
    cache = {"streams": streams}
    hidden, attention = {}, {}

    if cfg.variant == "hybrid":
        parts, valids, embed_caches = [], [], {}
        for g, s in enumerate(("fine", "coarse")):
            ids, segs, valid = batch.stream(s)
            _check_ids(cfg, s, ids, valid)
            gran = g if cfg.granularity_embedding else None
            h, embed_caches[s] = _embed(params, cfg, s, ids, segs, rng, granularity=gran)
            parts.append(h)
            valids.append(valid)
        tf = parts[0].shape[1]
        h, attn, layers = _encoder(params, cfg, "fine", np.concatenate(parts, axis=1),
                                   np.concatenate(valids, axis=1), rng)
        hidden["fine"], hidden["coarse"] = h[:, :tf], h[:, tf:]
        attention["joint"] = attn
        cache.update(embed=embed_caches, layers=layers, split=tf)
    else:
        for s in streams:
            ids, segs, valid = batch.stream(s)
            _check_ids(cfg, s, ids, valid)
            h, ec = _embed(params, cfg, s, ids, segs, rng)
            h, attn, layers = _encoder(params, cfg, s, h, valid, rng)
            hidden[s] = h
            attention[s] = attn
            cache[s] = (ec, layers)
    return ForwardOutput(hidden.get("fine"), hidden.get("coarse"), attention, batch, cache)


def backward(params: ModelParams, cfg: ModelConfig, out: ForwardOutput, d_fine=None, d_coarse=None,
             grads: Grads | None = None) -> Grads:
    """Accumulate encoder/embedding gradients given gradients on the final hidden states."""
    grads = grads if grads is not None else Grads(params)
    c = out.cache
    if cfg.variant == "hybrid":
        parts = []
        for s, d in (("fine", d_fine), ("coarse", d_coarse)):
            parts.append(np.zeros_like(out.hidden(s)) if d is None else d)
        dh = _encoder_backward(cfg, "fine", np.concatenate(parts, axis=1), c["layers"], grads)
        tf = c["split"]
        _embed_backward(cfg, "fine", dh[:, :tf], c["embed"]["fine"], grads)
        _embed_backward(cfg, "coarse", dh[:, tf:], c["embed"]["coarse"], grads)
        return grads
    for s, d in (("fine", d_fine), ("coarse", d_coarse)):
        if s not in c["streams"] or d is None:
            continue
        ec, layers = c[s]
        dh = _encoder_backward(cfg, s, d, layers, grads)
        _embed_backward(cfg, s, dh, ec, grads)
    return grads


# -- output heads ---------------------------------------------------------------


def mlm_logits(params, cfg, stream, h):
    """Tied-weight MLM head: dense+GELU+LN transform, then ``E^T`` plus a per-stream bias."""
    p = lambda local: params[pname(cfg, stream, local)]  # noqa: E731
    t, c_t = nn.linear(h, p("mlm.dense.w"), p("mlm.dense.b"))
    g, c_g = nn.gelu(t)
    u, c_ln = nn.layer_norm(g, p("mlm.ln.gamma"), p("mlm.ln.beta"))
    emb = p("embeddings.token")
    logits, c_out = nn.linear(u, emb.T, p("mlm.bias"))
    return logits, (c_t, c_g, c_ln, c_out)


def mlm_logits_backward(cfg, stream, dlogits, cache, grads):
    c_t, c_g, c_ln, c_out = cache
    n = lambda local: pname(cfg, stream, local)  # noqa: E731
    du, dembT, dbias = nn.linear_backward(dlogits, c_out)
    grads.add(n("embeddings.token"), dembT.T)
    grads.add(n("mlm.bias"), dbias)
    dg, dgam, dbet = nn.layer_norm_backward(du, c_ln)
    grads.add(n("mlm.ln.gamma"), dgam)
    grads.add(n("mlm.ln.beta"), dbet)
    dt = nn.gelu_backward(dg, c_g)
    dh, dw, db = nn.linear_backward(dt, c_t)
    grads.add(n("mlm.dense.w"), dw)
    grads.add(n("mlm.dense.b"), db)
    return dh


def encoder_flops(cfg: ModelConfig, batch: int, length: int) -> int:
    """Analytic matmul FLOPs of one encoder stack over ``batch`` sequences of ``length``."""
    d, f, T = cfg.hidden, cfg.ffn_inner, length
    per_layer = 2 * T * d * d * 4 + 2 * T * T * d * 2 + 2 * T * d * f * 2
    return batch * cfg.layers * per_layer
