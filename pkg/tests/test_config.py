from pathlib import Path

import pytest

from ambert.config import FineTuneConfig, ModelConfig, RunConfig
from ambert.errors import UsageError

DATA = Path(__file__).parent / "data"


@pytest.mark.parametrize("language", ["en", "zh"])
def test_defaults_match_reference_table(language):
    ref = RunConfig.load(DATA / f"reference_{language}.cfg")
    assert RunConfig.base(language) == ref
    assert ref.digest() == RunConfig.parse(ref.dumps()).digest()


def test_language_switches_column():
    zh = RunConfig.parse("language = zh\n")
    assert (zh.batch_size, zh.max_steps, zh.fine_mode) == (512, 1_000_000, "char")
    en = RunConfig.parse("")
    assert (en.batch_size, en.max_steps, en.fine_mode) == (1024, 500_000, "subword")


def test_explicit_keys_override_and_comments_are_ignored():
    rc = RunConfig.parse("language = zh  # the other column\nbatch_size = 8\n\nmax_steps = 2e3\nnsp = yes\n")
    assert rc.batch_size == 8 and rc.max_steps == 2000 and rc.nsp is True


@pytest.mark.parametrize("text,match", [
    ("hidden = 64\n", "unknown key"),
    ("batch_size 32\n", "expected key = value"),
    ("batch_size = lots\n", "bad value"),
    ("nsp = maybe\n", "bad value"),
    ("learning_rate_decay = cosine\n", "linear"),
    ("mask_rate = 1.5\n", "mask_rate"),
])
def test_bad_lines_rejected(text, match):
    with pytest.raises(UsageError, match=match):
        RunConfig.parse(text)


def test_model_config_from_run_config():
    mc = RunConfig.parse("num_layers = 2\nhidden_size = 64\nattention_heads = 4\nattention_head_size = 16\n"
                         "ffn_inner_hidden_size = 256\nmax_seq_length = 128\nmax_coarse_length = 96\n"
                         ).model_config(100, 80)
    assert (mc.layers, mc.hidden, mc.max_positions, mc.fine_vocab_size, mc.coarse_vocab_size) == (2, 64, 128, 100, 80)
    assert ModelConfig.from_dict(mc.to_dict()) == mc
    with pytest.raises(UsageError, match="unknown model config keys"):
        ModelConfig.from_dict({**mc.to_dict(), "depth": 3})


def test_finetune_defaults():
    ft = FineTuneConfig()
    assert (ft.batch_size, ft.learning_rate) == (32, 2e-5)
    with pytest.raises(UsageError):
        FineTuneConfig(task="ranking")
    with pytest.raises(UsageError):
        FineTuneConfig(num_labels=1)
    assert FineTuneConfig.desk(epochs=3).epochs == 3
