import pytest
from hypothesis import given
from hypothesis import strategies as st

from ambert.errors import UsageError
from ambert.tokenizer import Tokenizer, detokenize, tokenize_coarse, tokenize_fine
from ambert.vocab import CLS_ID, SEP_ID, UNK, LexiconCriteria, Vocabulary, build_phrase_lexicon, count_ngrams

TEXTS = st.lists(st.sampled_from(["new", "york", "is", "nice", "ice", "cream", "the", "city", "unhappiness",
                                  "zzz"]), max_size=14).map(" ".join)


def vocab(granularity, toks):
    return Vocabulary.from_entries(granularity, [(t, 1) for t in toks])


def surface_of(fine_tokens, mode="subword"):
    return detokenize(fine_tokens, mode)


def test_fine_examples():
    v = vocab("fine", ["ice", "cream", "un", "##happy", "##ness", "##happi"])
    assert tokenize_fine("ice cream", v) == ["ice", "cream"]
    assert tokenize_fine("", v) == []
    assert tokenize_fine("unhappiness", v) == ["un", "##happi", "##ness"]
    v2 = vocab("fine", ["un", "##happy", "##ness"])
    assert tokenize_fine("unhappyness", v2) == ["un", "##happy", "##ness"]
    assert tokenize_fine("qqq", v2) == [UNK]


def test_normalization_is_nfkc_and_lowercase():
    v = vocab("fine", ["ice", "cream", "ｉ"])
    assert tokenize_fine("ICE  Cream", v) == ["ice", "cream"]
    # full-width letters fold to ASCII under NFKC
    assert tokenize_fine("ＩＣＥ", v) == ["ice"]


def test_coarse_example():
    lex = vocab("coarse", ["new york", "new", "york", "is", "nice"])
    coarse, align = tokenize_coarse(["new", "york", "is", "nice"], lex)
    assert coarse == ["new york", "is", "nice"]
    assert align == [(0, 2), (2, 3), (3, 4)]
    assert tokenize_coarse([], lex) == ([], [])


def test_chinese_bridge_sentence():
    fine = vocab("fine", list("南京市长江大桥位于"))
    lex = vocab("coarse", ["南京市", "长江大桥", "位于", "南京", "市长", "江"])
    chars = tokenize_fine("南京市长江大桥", fine, "char")
    assert chars == list("南京市长江大桥")
    coarse, align = tokenize_coarse(chars, lex, "char")
    assert coarse == ["南京市", "长江大桥"]
    assert align == [(0, 3), (3, 7)]


def test_chinese_is_not_lowercased():
    fine = vocab("fine", ["A", "b"])
    assert tokenize_fine("Ab", fine, "char") == ["A", "b"]


def test_encode_examples(toy_tokenizer):
    p = toy_tokenizer.encode("ice cream")
    v = toy_tokenizer
    assert p.fine_ids == (CLS_ID, v.fine.id("ice"), v.fine.id("cream"), SEP_ID)
    assert p.coarse_ids == (CLS_ID, v.coarse.id("ice cream"), SEP_ID)
    assert p.alignment == ((1, 3),)
    e = toy_tokenizer.encode("")
    assert e.fine_ids == (CLS_ID, SEP_ID) and e.coarse_ids == (CLS_ID, SEP_ID) and e.alignment == ()


def test_encode_pair_segments(toy_tokenizer):
    p = toy_tokenizer.encode("new york", "is nice")
    p.validate()
    assert p.fine_segments == (0, 0, 0, 0, 1, 1, 1)
    assert p.coarse_segments == (0, 0, 0, 1, 1, 1)
    # the separating [SEP] of the fine stream is covered by the coarse [SEP]
    assert p.alignment[1] == (3, 4)


def test_truncation_to_exact_length(toy_tokenizer):
    text = " ".join(["the city is nice"] * 10)
    p = toy_tokenizer.encode(text, max_fine_len=8)
    p.validate()
    assert len(p.fine_ids) == 8


def test_truncation_drops_whole_phrases(toy_tokenizer):
    p = toy_tokenizer.encode("the new york", max_fine_len=4)
    p.validate()
    # "new york" cannot be split, so only "the" survives
    assert toy_tokenizer.fine.token(p.fine_ids[1]) == "the"
    assert len(p.fine_ids) == 3


def test_max_length_floor(toy_tokenizer):
    with pytest.raises(UsageError):
        toy_tokenizer.encode("nice", max_fine_len=2)


@given(TEXTS, st.sampled_from([None, "is nice", "new york city"]), st.integers(3, 20), st.integers(3, 20))
def test_nesting_and_tiling(toy_tokenizer, text, text_b, mf, mc):
    p = toy_tokenizer.encode(text, text_b, mf, mc)
    p.validate()
    assert len(p.fine_ids) <= mf and len(p.coarse_ids) <= mc
    fine_toks = [toy_tokenizer.fine.token(i) for i in p.fine_ids]
    for j, (s, e) in enumerate(p.alignment, 1):
        c = toy_tokenizer.coarse.token(p.coarse_ids[j])
        if c not in ("[UNK]", "[SEP]"):
            assert surface_of(fine_toks[s:e]) == c
    cover = p.cover()
    assert cover[0] == 0 and cover[-1] == len(p.coarse_ids) - 1
    assert cover == sorted(cover)


@given(TEXTS)
def test_round_trip(toy_tokenizer, text):
    toks = toy_tokenizer.tokenize_fine(text)
    if UNK not in toks:
        assert detokenize(toks) == " ".join(text.lower().split())


@given(TEXTS)
def test_determinism(toy_tokenizer, text):
    assert toy_tokenizer.encode(text) == toy_tokenizer.encode(text)


@given(st.lists(TEXTS, min_size=1, max_size=8))
def test_coarse_tokens_come_from_lexicon(corpus):
    lex = build_phrase_lexicon(count_ngrams(corpus, max_order=3), LexiconCriteria(1, 0.0, 3))
    fine = vocab("fine", ["new", "york", "is", "nice", "ice", "cream", "the", "city", "un", "##happiness", "zzz"])
    tok = Tokenizer(fine, lex)
    for line in corpus:
        _, coarse, align = tok.segment(line)
        assert UNK not in coarse
        assert sum(e - s for s, e in align) == len(tok.tokenize_fine(line))


def test_greedy_prefers_longest():
    lex = vocab("coarse", ["a b", "a b c", "c d", "a", "b", "c", "d"])
    coarse, _ = tokenize_coarse(["a", "b", "c", "d"], lex)
    assert coarse == ["a b c", "d"]
