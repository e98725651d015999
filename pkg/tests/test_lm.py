import math

import numpy as np
import pytest

from ctca import numerics as nm
from ctca.lm import (
    LmConfig, LmTrainConfig, init_lm_params, initial_lm_state,
    lm_state_from_bytes, lm_state_to_bytes, lm_step, lm_train, lr_for_epoch,
    perplexity, sentence_token_nlls,
)
from ctca.subword import bpe_train

TINY = LmConfig(layers=2, cells=4, embed_dim=3)


def vocab_and_params(corpus, merges=0, seed=0, cfg=TINY):
    v = bpe_train(corpus, merges)
    return v, init_lm_params(cfg, v.size, seed)


def test_zero_params_uniform_log_distribution():
    v, params = vocab_and_params(["a b c"])
    for p in params.values():
        p.data[...] = 0.0
    state = initial_lm_state(TINY)
    _, logp = lm_step(state, v.sos_id, params, TINY)
    assert np.allclose(logp.data, -math.log(v.size), atol=1e-14)


def test_invalid_id_rejected():
    v, params = vocab_and_params(["a b"])
    with pytest.raises(ValueError, match="out of range"):
        lm_step(initial_lm_state(TINY), v.size, params, TINY)


def test_state_round_trip_identical_continuation():
    v, params = vocab_and_params(["a b c"], seed=3)
    state = initial_lm_state(TINY)
    for uid in [v.sos_id, 4, 5]:
        state, _ = lm_step(state, uid, params, TINY)
    restored = lm_state_from_bytes(lm_state_to_bytes(state))
    _, logp_a = lm_step(state, 6, params, TINY)
    _, logp_b = lm_step(restored, 6, params, TINY)
    assert logp_a.data.tobytes() == logp_b.data.tobytes()


def test_one_step_gradient():
    v, params = vocab_and_params(["a b c"], seed=5)
    names = sorted(params)

    def loss():
        state = initial_lm_state(TINY)
        state, logp = lm_step(state, v.sos_id, params, TINY)
        state, logp = lm_step(state, 4, params, TINY)
        return nm.neg(nm.reshape(nm.narrow(logp, 0, 5, 1), ()))

    assert nm.grad_check(loss, [params[n] for n in names]) <= 1e-5


def test_memorization_run_reaches_low_perplexity():
    corpus = ["a b c"]
    v = bpe_train(corpus, 0)
    cfg = LmConfig(cells=64, embed_dim=32)
    params, losses = lm_train(corpus, v, cfg, LmTrainConfig(epochs=50), seed=1)
    assert perplexity(params, corpus, v, cfg) <= 1.1
    # loss is non-increasing over any 5-epoch window (1e-6 slack)
    assert all(losses[i + 5] <= losses[i] + 1e-6 for i in range(len(losses) - 5))


def test_training_deterministic():
    corpus = ["a b a", "b a b"]
    v = bpe_train(corpus, 0)
    a, _ = lm_train(corpus, v, TINY, LmTrainConfig(epochs=3), seed=9)
    b, _ = lm_train(corpus, v, TINY, LmTrainConfig(epochs=3), seed=9)
    for n in a:
        assert a[n].data.tobytes() == b[n].data.tobytes()


def test_lr_schedule():
    cfg = LmTrainConfig()
    assert lr_for_epoch(0, cfg) == 1.0
    assert lr_for_epoch(1, cfg) == 1.0
    assert lr_for_epoch(2, cfg) == pytest.approx(0.9, abs=0)
    assert lr_for_epoch(4, cfg) == pytest.approx(0.81, abs=1e-15)


def test_uniform_perplexity_equals_vocab_size_exactly():
    # 13 single-letter words -> 13 base units + 4 specials = 17, and the
    # two lines predict 16 tokens total, so the mean NLL is bit-exact.
    corpus = ["a b c d e f g", "h i j k l m a"]
    v = bpe_train(corpus, 0)
    assert v.size == 17
    params = init_lm_params(LmConfig(cells=4, embed_dim=3), v.size, 0)
    for p in params.values():
        p.data[...] = 0.0
    cfg = LmConfig(cells=4, embed_dim=3)
    assert perplexity(params, corpus, v, cfg) == float(v.size)


def test_perplexity_at_least_one():
    corpus = ["a b", "b a a"]
    v, params = vocab_and_params(corpus, seed=11)
    assert perplexity(params, corpus, v, TINY) >= 1.0


def test_perplexity_counts_eos():
    v, params = vocab_and_params(["a"], seed=13)
    # single word -> one unit + eos = 2 predicted tokens
    nlls = sentence_token_nlls(params, [4], v, TINY)
    assert len(nlls) == 2


def test_empty_corpus_rejected():
    v, params = vocab_and_params(["a"])
    with pytest.raises(ValueError, match="empty"):
        perplexity(params, ["   "], v, TINY)
    with pytest.raises(ValueError, match="empty"):
        lm_train(["  "], v, TINY, LmTrainConfig(epochs=1), seed=0)
