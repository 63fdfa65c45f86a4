import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck_util as G
from ambert import model as M
from ambert.config import ModelConfig
from ambert.errors import DataError, ModeError, UsageError
from ambert.synthetic import make_pair, random_pair

from conftest import tiny_config

VARIANTS = ["ambert", "combo", "hybrid", "bert"]


def desk(variant, **kw):
    return ModelConfig.desk(variant=variant, **kw)


def enumerate_count(params):
    return sum(params.storage(k).size for k in params.keys())


def perturb_coarse(pair, rng, vocab):
    ids = list(pair.coarse_ids)
    if len(ids) <= 2:
        return pair
    j = int(rng.integers(1, len(ids) - 1))
    ids[j] = 5 + (ids[j] - 5 + int(rng.integers(1, vocab - 5))) % (vocab - 5)
    return pair.__class__(pair.fine_ids, tuple(ids), pair.alignment, pair.fine_segments, pair.coarse_segments)


def test_config_validation():
    with pytest.raises(UsageError):
        ModelConfig(hidden=100, heads=12, head_size=64)
    with pytest.raises(UsageError):
        ModelConfig(variant="triple")
    cfg = ModelConfig()
    assert (cfg.layers, cfg.hidden, cfg.heads, cfg.head_size, cfg.ffn_inner) == (12, 768, 12, 64, 3072)
    assert cfg.hidden_dropout == 0.1 and cfg.max_positions == 512
    ModelConfig.desk().validate()


@pytest.mark.parametrize("variant", VARIANTS)
def test_census_matches_enumeration(variant):
    for cfg in (desk(variant), tiny_config(variant), desk(variant, nsp=True)):
        assert M.param_census(cfg) == enumerate_count(M.init_params(cfg, 0)) == M.init_params(cfg, 0).count()


@pytest.mark.parametrize("layers,hidden,heads,fv,cv", [(2, 64, 4, 100, 150), (1, 8, 2, 13, 11), (3, 32, 8, 50, 7)])
def test_ambert_excess_is_coarse_table_plus_bias(layers, hidden, heads, fv, cv):
    kw = dict(layers=layers, hidden=hidden, heads=heads, head_size=hidden // heads, ffn_inner=4 * hidden,
              max_positions=32, fine_vocab_size=fv, coarse_vocab_size=cv)
    n = {v: M.init_params(ModelConfig(variant=v, **kw), 0).count() for v in ("ambert", "combo", "bert")}
    assert n["ambert"] - n["bert"] == cv * (hidden + 1)
    assert n["combo"] > n["ambert"] > n["bert"]


def test_base_scale_census_ordering():
    # closed form only; allocating 100M+ floats is not needed to compare counts
    n = {v: M.param_census(ModelConfig(variant=v, coarse_vocab_size=77_650)) for v in ("ambert", "combo", "bert")}
    assert n["combo"] > n["ambert"] > n["bert"]
    assert n["ambert"] - n["bert"] == 77_650 * 769


def test_ambert_layers_share_storage():
    cfg = desk("ambert")
    p = M.init_params(cfg, 0)
    fine = M.pname(cfg, "fine", "encoder.layer1.attn.q.w")
    coarse = M.pname(cfg, "coarse", "encoder.layer1.attn.q.w")
    assert fine != coarse
    p[fine][0, 0] = 123.0
    assert p[coarse][0, 0] == 123.0
    assert p.key_of(fine) == p.key_of(coarse)
    # token embeddings and the output bias stay per stream
    assert p.key_of("fine.embeddings.token") != p.key_of("coarse.embeddings.token")


def test_combo_is_fully_disjoint():
    cfg = desk("combo")
    p = M.init_params(cfg, 0)
    fine = M.pname(cfg, "fine", "encoder.layer0.attn.q.w")
    coarse = M.pname(cfg, "coarse", "encoder.layer0.attn.q.w")
    before = p[coarse].copy()
    p[fine][...] += 1.0
    np.testing.assert_array_equal(p[coarse], before)
    assert all(len(p.aliases(k)) == 1 for k in p.keys())


@pytest.mark.parametrize("variant", VARIANTS)
def test_init_is_deterministic(variant):
    a, b = M.init_params(desk(variant), 7), M.init_params(desk(variant), 7)
    assert a.equal(b)
    assert not a.equal(M.init_params(desk(variant), 8))


@pytest.mark.parametrize("variant", ["ambert", "combo"])
def test_fine_stream_ignores_coarse_input(variant):
    cfg = desk(variant)
    p = M.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = random_pair(rng, cfg.fine_vocab_size, cfg.coarse_vocab_size)
        other = perturb_coarse(pair, rng, cfg.coarse_vocab_size)
        a = M.forward(p, cfg, pair).fine_hidden
        b = M.forward(p, cfg, other).fine_hidden
        assert np.array_equal(a, b)


def test_hybrid_fine_stream_sees_coarse_input():
    cfg = desk("hybrid")
    p = M.init_params(cfg, 0)
    pair = make_pair([5, 6, 7], [8, 9], [(0, 2), (2, 3)])
    other = make_pair([5, 6, 7], [8, 10], [(0, 2), (2, 3)])
    assert not np.array_equal(M.forward(p, cfg, pair).fine_hidden, M.forward(p, cfg, other).fine_hidden)


@pytest.mark.parametrize("variant", VARIANTS)
def test_attention_rows_sum_to_one(variant):
    cfg = desk(variant)
    p = M.init_params(cfg, 1)
    rng = np.random.default_rng(1)
    pairs = [random_pair(rng, cfg.fine_vocab_size, cfg.coarse_vocab_size) for _ in range(4)]
    out = M.forward(p, cfg, M.collate(pairs))
    for maps in out.attention.values():
        assert len(maps) == cfg.layers
        for a in maps:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)


def test_hybrid_joint_attention_shape():
    cfg = desk("hybrid")
    pair = make_pair([5, 6, 7, 8], [9, 10], [(0, 2), (2, 4)])
    out = M.forward(M.init_params(cfg, 0), cfg, pair)
    m, n = pair.m, pair.n
    assert out.attention["joint"][0].shape == (1, cfg.heads, m + n + 4, m + n + 4)


def test_hidden_shapes_match_inputs():
    cfg = desk("ambert")
    pair = make_pair([5, 6, 7, 8], [9, 10], [(0, 2), (2, 4)])
    out = M.forward(M.init_params(cfg, 0), cfg, pair)
    assert out.fine_hidden.shape == (1, 6, cfg.hidden)
    assert out.coarse_hidden.shape == (1, 4, cfg.hidden)


def test_padding_does_not_change_results():
    cfg = desk("ambert")
    p = M.init_params(cfg, 0)
    short = make_pair([5, 6], [7], [(0, 2)])
    long = make_pair([5, 6, 7, 8, 9], [7, 8, 9], [(0, 2), (2, 3), (3, 5)])
    alone = M.forward(p, cfg, short).fine_hidden[0]
    padded = M.forward(p, cfg, M.collate([short, long])).fine_hidden[0, :4]
    np.testing.assert_allclose(alone, padded, atol=1e-5)


def test_out_of_range_id_names_stream_and_position():
    cfg = desk("ambert")
    bad = make_pair([5, 6], [cfg.coarse_vocab_size + 3], [(0, 2)])
    with pytest.raises(DataError, match="coarse stream.*position 1"):
        M.forward(M.init_params(cfg, 0), cfg, bad)


def test_hybrid_cannot_run_single_stream():
    cfg = desk("hybrid")
    with pytest.raises(ModeError):
        M.forward(M.init_params(cfg, 0), cfg, make_pair([5], [6], [(0, 1)]), streams=("fine",))


def test_dropout_is_seeded():
    cfg = desk("ambert")
    p = M.init_params(cfg, 0)
    pair = make_pair([5, 6, 7], [8, 9], [(0, 2), (2, 3)])
    a = M.forward(p, cfg, pair, train=True, seed=3).fine_hidden
    b = M.forward(p, cfg, pair, train=True, seed=3).fine_hidden
    c = M.forward(p, cfg, pair, train=True, seed=4).fine_hidden
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@given(st.integers(0, 2**16))
def test_stream_independence_property(seed):
    cfg = tiny_config("ambert")
    p = M.init_params(cfg, 0)
    rng = np.random.default_rng(seed)
    pair = random_pair(rng, cfg.fine_vocab_size, cfg.coarse_vocab_size)
    other = perturb_coarse(pair, rng, cfg.coarse_vocab_size)
    assert np.array_equal(M.forward(p, cfg, pair).fine_hidden, M.forward(p, cfg, other).fine_hidden)


@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_mlm_gradient(variant):
    assert G.mlm_case(variant) < 1e-3
