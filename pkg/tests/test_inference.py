import numpy as np
import pytest

from ambert import inference as I
from ambert import model as M
from ambert import nn
from ambert.config import FineTuneConfig, ModelConfig
from ambert.errors import ModeError
from ambert.finetune import finetune_loop, head_logits, init_heads
from ambert.synthetic import coarse_informative_task, make_pair, random_pair, span_task


def desk(variant="ambert"):
    return ModelConfig.desk(variant=variant, fine_vocab_size=40, coarse_vocab_size=40)


@pytest.mark.parametrize("variant", ["ambert", "combo"])
def test_single_stream_is_bitwise_sub_computation(variant):
    cfg = desk(variant)
    p = M.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = M.collate([random_pair(rng, 40, 40) for _ in range(5)])
    both = M.forward(p, cfg, batch)
    fine = M.forward(p, cfg, batch, streams=("fine",))
    coarse = M.forward(p, cfg, batch, streams=("coarse",))
    assert np.array_equal(both.fine_hidden, fine.fine_hidden) and coarse.fine_hidden is None
    assert np.array_equal(both.coarse_hidden, coarse.coarse_hidden) and fine.coarse_hidden is None


def test_single_stream_prediction_uses_own_head():
    cfg = desk()
    p = M.init_params(cfg, 0)
    heads = init_heads(cfg, "classification", 3, 0)
    pairs = [random_pair(np.random.default_rng(i), 40, 40) for i in range(4)]
    pred = I.predict(p, cfg, heads, pairs, mode="fine")
    logits, _ = head_logits(heads, "head_x", M.forward(p, cfg, M.collate(pairs)).fine_cls)
    assert np.array_equal(pred.scores, logits)
    assert pred.outputs == [int(i) for i in logits.argmax(axis=1)]


def test_joint_prediction_is_shift_invariant():
    cfg = desk()
    p = M.init_params(cfg, 0)
    heads = init_heads(cfg, "classification", 3, 0)
    pairs = [random_pair(np.random.default_rng(i), 40, 40) for i in range(6)]
    a = I.predict(p, cfg, heads, pairs).outputs
    heads["head_joint.b"][...] += 7.0
    assert I.predict(p, cfg, heads, pairs).outputs == a


def test_rejected_modes():
    hy = desk("hybrid")
    with pytest.raises(ModeError, match="hybrid"):
        I.check_mode(hy, init_heads(hy), "classification", "fine")
    bert = desk("bert")
    with pytest.raises(ModeError):
        I.check_mode(bert, init_heads(bert), "classification", "coarse")
    cfg = desk()
    with pytest.raises(ModeError, match="fine-token positions"):
        I.check_mode(cfg, init_heads(cfg, "span"), "span", "coarse")
    with pytest.raises(ModeError, match="no head_x head"):
        I.check_mode(cfg, init_heads(cfg, "span"), "classification", "fine")


def test_fine_only_costs_half_of_both():
    cfg = desk()
    p = M.init_params(cfg, 0)
    heads = init_heads(cfg, "classification", 2, 0)
    # one coarse token per fine token, so both encoders see equal lengths
    pairs = [make_pair([5, 6, 7, 8], [5, 6, 7, 8], [(i, i + 1) for i in range(4)]) for _ in range(3)]
    both = I.predict(p, cfg, heads, pairs, mode="both").flops
    fine = I.predict(p, cfg, heads, pairs, mode="fine").flops
    coarse = I.predict(p, cfg, heads, pairs, mode="coarse").flops
    assert fine == coarse == both // 2 and both % 2 == 0


def test_counted_encoder_flops_match_census():
    cfg = desk()
    p = M.init_params(cfg, 0)
    pairs = [make_pair([5, 6, 7], [5, 6, 7], [(i, i + 1) for i in range(3)]) for _ in range(2)]
    with nn.count_flops() as box:
        M.forward(p, cfg, M.collate(pairs), streams=("fine",))
    assert box[0] == M.encoder_flops(cfg, 2, 5)


def test_span_f1():
    assert I.span_f1((2, 4), (2, 4)) == 1.0
    assert I.span_f1((1, 1), (3, 4)) == 0.0
    assert I.span_f1((2, 3), (3, 4)) == pytest.approx(0.5)


def test_select_encoder_ties_go_to_fine():
    cfg = desk()
    p = M.init_params(cfg, 0)
    heads = init_heads(cfg, "classification", 2, 0)
    for k in heads.keys():
        heads.storage(k)[...] = 0.0
    dev = coarse_informative_task(20, 0, 40, 40)
    assert I.select_encoder(p, cfg, heads, dev) == "fine_only"


def test_select_encoder_span_is_fine():
    cfg = desk()
    p = M.init_params(cfg, 0)
    heads = init_heads(cfg, "span", seed=0)
    dev = span_task(8, 0, 40, 40)
    assert I.select_encoder(p, cfg, heads, dev, "f1", "span") == "fine_only"
    res = I.evaluate(p, cfg, heads, dev, "span", "fine")
    assert set(res) == {"em", "f1", "n", "mode"} and 0.0 <= res["em"] <= res["f1"] <= 1.0


def test_select_encoder_prefers_coarse_when_only_coarse_is_informative():
    cfg = desk()
    train = coarse_informative_task(256, 0, 40, 40)
    dev = coarse_informative_task(128, 1, 40, 40)
    p, heads, _, _ = finetune_loop(train, dev, M.init_params(cfg, 0), cfg, FineTuneConfig.desk())
    picks = {I.select_encoder(p, cfg, heads, dev) for _ in range(2)}
    assert picks == {"coarse_only"}
