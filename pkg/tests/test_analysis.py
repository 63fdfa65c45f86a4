import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ambert import analysis as A
from ambert import model as M
from ambert.config import ModelConfig
from ambert.errors import DataError, ModeError, UsageError
from ambert.tokenizer import Tokenizer
from ambert.vocab import Vocabulary

from conftest import tiny_config

WORDS = ["new", "york", "is", "nice", "ice", "cream", "the", "city"]
PHRASES = {("new", "york"), ("ice", "cream")}


@pytest.mark.parametrize("u,v,cd,ed", [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0, 0.0),
    ([2.0, 0.0], [0.0, 5.0], 1.0, math.sqrt(2)),
    ([1.0, -1.0], [-3.0, 3.0], 2.0, 2.0),
])
def test_distance_analytic_cases(u, v, cd, ed):
    assert A.cosine_distance(u, v) == pytest.approx(cd, abs=1e-12)
    assert A.normalized_euclidean(u, v) == pytest.approx(ed, abs=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_euclidean_is_root_two_cosine(u, v):
    u, v = np.array(u), np.array(v)
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    cd = A.cosine_distance(u, v)
    assert A.normalized_euclidean(u, v) == pytest.approx(A.ed_from_cd(cd), abs=1e-7)


def test_attention_map_rows_and_labels(toy_tokenizer):
    cfg = tiny_config("ambert", fine_vocab_size=len(toy_tokenizer.fine), coarse_vocab_size=len(toy_tokenizer.coarse))
    p = M.init_params(cfg, 0)
    pair = toy_tokenizer.encode("new york is nice")
    mat, labels = A.attention_map(p, cfg, pair, 0, 1, "coarse", toy_tokenizer)
    assert labels == ["[CLS]", "new york", "is", "nice", "[SEP]"]
    assert mat.shape == (5, 5)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)
    mat, labels = A.attention_map(p, cfg, pair, 0, 0, "fine", toy_tokenizer)
    assert labels[1:3] == ["new", "york"] and mat.shape == (6, 6)
    with pytest.raises(UsageError):
        A.attention_map(p, cfg, pair, 1, 0)
    with pytest.raises(UsageError):
        A.attention_map(p, cfg, pair, 0, 2)


def test_hybrid_attention_spans_both_sequences(toy_tokenizer):
    cfg = tiny_config("hybrid", fine_vocab_size=len(toy_tokenizer.fine), coarse_vocab_size=len(toy_tokenizer.coarse))
    pair = toy_tokenizer.encode("the ice cream is nice")
    mat, labels = A.attention_map(M.init_params(cfg, 0), cfg, pair, 0, 0, tokenizer=toy_tokenizer)
    size = pair.m + pair.n + 4
    assert mat.shape == (size, size) and len(labels) == size
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)


def test_chinese_sentence_maps_for_both_streams():
    fine = Vocabulary.from_entries("fine", [(c, 1) for c in "南京市长江大桥位于"])
    coarse = Vocabulary.from_entries("coarse", [(t, 1) for t in ["南京市", "长江大桥", "位于", "南京", "市长", "江"]])
    tok = Tokenizer(fine, coarse, "char")
    cfg = ModelConfig.desk(fine_vocab_size=len(fine), coarse_vocab_size=len(coarse))
    p = M.init_params(cfg, 0)
    pair = tok.encode("南京市长江大桥")
    f, fl = A.attention_map(p, cfg, pair, 1, 3, "fine", tok)
    c, cl = A.attention_map(p, cfg, pair, 1, 3, "coarse", tok)
    assert fl[1:-1] == list("南京市长江大桥") and cl[1:-1] == ["南京市", "长江大桥"]
    assert f.shape == (9, 9) and c.shape == (4, 4)
    grid = A.format_grid(c, cl)
    assert grid.splitlines()[0] == "\t[CLS]\t南京市\t长江大桥\t[SEP]"
    assert len(grid.splitlines()) == 5


def test_format_grid_precision():
    text = A.format_grid(np.array([[0.25, 0.75], [1.0, 0.0]]), ["a", "b\tc"])
    assert text == "\ta\tb c\na\t0.250000\t0.750000\nb c\t1.000000\t0.000000\n"


@pytest.mark.parametrize("variant", ["hybrid", "bert"])
def test_cls_distance_needs_two_streams(variant, toy_tokenizer):
    cfg = tiny_config(variant)
    with pytest.raises(ModeError):
        A.cls_distance(M.init_params(cfg, 0), cfg, [toy_tokenizer.encode("new")])


def test_cls_distance_reports_means(toy_tokenizer):
    cfg = tiny_config("ambert", fine_vocab_size=len(toy_tokenizer.fine), coarse_vocab_size=len(toy_tokenizer.coarse))
    pairs = [toy_tokenizer.encode(t) for t in ["new york is nice", "the city", "ice cream"]]
    res = A.cls_distance(M.init_params(cfg, 0), cfg, pairs, batch_size=2)
    assert res["n"] == 3
    assert 0.0 <= res["cosine_distance_mean"] <= 2.0
    with pytest.raises(DataError):
        A.cls_distance(M.init_params(cfg, 0), cfg, [])


def greedy_phrase_count(words):
    i = n = 0
    while i < len(words):
        if tuple(words[i:i + 2]) in PHRASES:
            n += 1
            i += 2
        else:
            i += 1
    return n


@given(st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=12), min_size=1, max_size=5))
def test_coarse_rate_matches_recount(toy_tokenizer, sentences):
    phrases = sum(greedy_phrase_count(s) for s in sentences)
    total = sum(len(s) for s in sentences) - phrases
    rate = A.coarse_rate([" ".join(s) for s in sentences], toy_tokenizer)
    assert rate == phrases / total


def test_coarse_rate_examples(toy_tokenizer):
    assert A.coarse_rate(["the city is nice", "new"], toy_tokenizer) == 0.0
    line = "new york is the city is nice the city is nice"
    assert len(toy_tokenizer.segment(line)[1]) == 10
    assert A.coarse_rate([line] * 4, toy_tokenizer) == pytest.approx(0.10)
    with pytest.raises(DataError):
        A.coarse_rate(["", "  "], toy_tokenizer)
