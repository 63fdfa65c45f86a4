import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ambert.config import ModelConfig
from ambert.tokenizer import Tokenizer
from ambert.vocab import Vocabulary

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(variant="ambert", **kw):
    """One layer, d=8: small enough for finite differences over every parameter."""
    base = dict(variant=variant, layers=1, hidden=8, heads=2, head_size=4, ffn_inner=16, max_positions=32,
                fine_vocab_size=13, coarse_vocab_size=11, hidden_dropout=0.0, attention_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_tokenizer():
    fine = Vocabulary.from_entries("fine", [(t, 1) for t in
                                            ["new", "york", "is", "nice", "ice", "cream", "un", "##happy",
                                             "##ness", "the", "city"]])
    coarse = Vocabulary.from_entries("coarse", [(t, 1) for t in
                                                ["new york", "ice cream", "new", "york", "is", "nice", "ice",
                                                 "cream", "the", "city"]])
    return Tokenizer(fine, coarse, "subword")
