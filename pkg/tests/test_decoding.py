import itertools
import logging
import math

import numpy as np
import pytest
from conftest import random_source, tiny_model

from kdst import decoding as D
from kdst import tensor as T
from kdst.errors import ConfigError
from kdst.models import forward
from kdst.tensor import Tensor
from kdst.text import BOS_ID, EOS_ID, PAD_ID, build_codec


def biased(model, token, value=50.0):
    model.params["dec.out.b"].data[token] = value
    return model


def step_logprobs(model, src, prefix):
    """Log-probabilities of the next token after ``prefix`` from an independent full forward pass."""
    with T.no_grad():
        logits, _ = forward(model, src, np.array([BOS_ID] + list(prefix)))
    row = T.log_softmax(Tensor(logits.data[-1].astype(np.float64))).data
    return row


def test_forced_eos_gives_empty_output(rng):
    model = biased(tiny_model(), EOS_ID)
    hyp = D.greedy_decode(model, random_source(model, rng))
    assert hyp.tokens == [] and hyp.finished


def test_constant_argmax_repeats_until_max_len(rng):
    model = biased(tiny_model(), 6)
    hyp = D.greedy_decode(model, random_source(model, rng), max_len=5)
    assert hyp.tokens == [6] * 5 and not hyp.finished


def test_pad_and_bos_are_never_emitted(rng):
    model = biased(biased(tiny_model(), PAD_ID, 80.0), BOS_ID, 90.0)
    src = random_source(model, rng)
    for hyp in (D.greedy_decode(model, src, 6), D.beam_search(model, src, 3, 6)):
        assert PAD_ID not in hyp.tokens and BOS_ID not in hyp.tokens
    batch = D.greedy_decode_batch(model, src[None], np.array([len(src)]), 6)
    assert PAD_ID not in batch[0] and BOS_ID not in batch[0]


def test_max_len_is_capped_by_model_limit(rng):
    model = biased(tiny_model(max_tgt_len=6), 5)
    assert len(D.greedy_decode(model, random_source(model, rng), max_len=100).tokens) == 5
    assert len(D.beam_search(model, random_source(model, rng), 2, max_len=100).tokens) == 5


def test_beam_one_equals_greedy_on_random_inputs(rng):
    for i in range(100):
        model = tiny_model("MT" if i % 2 else "ST", seed=i % 7)
        src = random_source(model, rng)
        g, b = D.greedy_decode(model, src, 8), D.beam_search(model, src, 1, 8)
        assert g.tokens == b.tokens
        assert g.logprob == pytest.approx(b.logprob, abs=1e-9)


def brute_force_best(model, src, max_len):
    """Score every sequence the search can return: up to max_len-1 tokens plus eos, or max_len tokens."""
    emit = [t for t in range(model.cfg.tgt_vocab) if t not in (PAD_ID, BOS_ID, EOS_ID)]
    best = None
    for n in range(max_len + 1):
        for seq in itertools.product(emit, repeat=n):
            total = 0.0
            for t in range(n):
                total += step_logprobs(model, src, seq[:t])[seq[t]]
            if n < max_len:
                cand = (-(total + step_logprobs(model, src, seq)[EOS_ID]), list(seq))
            else:
                cand = (-total, list(seq))
            if best is None or cand < best:
                best = cand
    return best


@pytest.mark.parametrize("seed", range(5))
def test_large_beam_equals_exhaustive_search(seed, rng):
    # six ids in total: pad and bos are never emitted, leaving four choices per step
    model = tiny_model("MT", seed=seed, vocab=6, dtype=np.float64)
    model.params["dec.out.b"].data[EOS_ID] = -1.0 + seed * 0.5
    src = random_source(model, rng)
    neg, tokens = brute_force_best(model, src, 3)
    hyp = D.beam_search(model, src, beam_size=64, max_len=3, alpha=0.0)
    assert hyp.tokens == tokens
    assert hyp.logprob == pytest.approx(-neg, abs=1e-9)


def test_beam_dominates_greedy(rng):
    for i in range(50):
        model = tiny_model(seed=i % 5)
        src = random_source(model, rng)
        assert D.beam_search(model, src, 4, 8).logprob >= D.greedy_decode(model, src, 8).logprob - 1e-9


def test_length_penalty_changes_ranking_only():
    h = D.Hypothesis([4, 5, 6], -3.0, True)
    assert h.score(0.0) == -3.0 and h.score(1.0) == pytest.approx(-0.75)
    with pytest.raises(ConfigError):
        D.beam_search(tiny_model(), np.array([4, 5]), beam_size=0)


def test_ensemble_of_one_and_of_copies(rng):
    model = tiny_model(seed=3)
    for _ in range(10):
        src = random_source(model, rng)
        single = D.beam_search(model, src, 3, 8)
        assert D.ensemble_decode([model], [src], 3, 8) == single
        assert D.ensemble_decode([model, model.copy(), model], [src] * 3, 3, 8) == single


def test_two_model_ensemble_matches_probability_average_oracle(rng):
    a, b = tiny_model("MT", seed=1, dtype=np.float64), tiny_model("ST", seed=2, dtype=np.float64)
    src_a, src_b = random_source(a, rng), random_source(b, rng)
    prefix, total = [], 0.0
    for _ in range(3):
        pa = [math.exp(v) for v in step_logprobs(a, src_a, prefix)]
        pb = [math.exp(v) for v in step_logprobs(b, src_b, prefix)]
        avg = [(x + y) / 2 for x, y in zip(pa, pb)]
        allowed = [k for k in range(len(avg)) if k not in (PAD_ID, BOS_ID)]
        tok = max(allowed, key=lambda k: (avg[k], -k))
        total += math.log(avg[tok])
        if tok == EOS_ID:
            break
        prefix.append(tok)
    hyp = D.ensemble_decode([a, b], [src_a, src_b], beam_size=1, max_len=3)
    assert hyp.tokens == prefix
    assert hyp.logprob == pytest.approx(total, abs=1e-9)


def test_ensemble_vocab_mismatch():
    with pytest.raises(ConfigError):
        D.ensemble_decode([tiny_model(), tiny_model(vocab=11)], [np.array([4]), np.array([4])])


def test_batched_greedy_matches_single(rng):
    model = tiny_model("ST", seed=4)
    srcs = [random_source(model, rng, n) for n in (3, 5, 2)]
    batch = np.zeros((3, 5, model.cfg.feat_dim), dtype=np.float32)
    for i, s in enumerate(srcs):
        batch[i, : len(s)] = s
    out = D.greedy_decode_batch(model, batch, np.array([3, 5, 2]), 7)
    for s, toks in zip(srcs, out):
        assert toks == D.greedy_decode(model, s, 7).tokens


@pytest.fixture
def word_codec():
    return build_codec(["un deux trois", "one two three"], 0)


def test_pipeline_with_oracle_transcript_equals_mt(monkeypatch, word_codec, rng):
    v = len(word_codec.vocab)
    asr, mt = tiny_model("ASR", seed=1, vocab=v), tiny_model("MT", seed=2, vocab=v)
    gold = "one three two"
    gold_ids = word_codec.encode(gold)[:-1]
    real = D.beam_search

    def fake(model, enc, beam_size=4, max_len=50, alpha=0.0):
        if model is asr:
            return D.Hypothesis(gold_ids, 0.0, True)
        return real(model, enc, beam_size, max_len, alpha)

    monkeypatch.setattr(D, "beam_search", fake)
    feats = random_source(asr, rng)
    out = D.pipeline_translate(asr, mt, feats, word_codec, beam_size=3, max_len=6)
    assert out == real(mt, np.array(word_codec.encode(gold)), 3, 6).tokens
    assert out == D.pipeline_translate(asr, mt, feats, word_codec, beam_size=3, max_len=6)


def test_pipeline_empty_transcript_warns(word_codec, rng, caplog):
    v = len(word_codec.vocab)
    asr = biased(tiny_model("ASR", vocab=v), EOS_ID)
    with caplog.at_level(logging.WARNING, logger="kdst.decoding"):
        assert D.pipeline_translate(asr, tiny_model("MT", vocab=v), random_source(asr, rng), word_codec) == []
    assert "empty" in caplog.text


def test_attention_export_files(tmp_path, rng):
    model = tiny_model("ST", seed=1, n_decoder_layers=2)
    src = random_source(model, rng, 6)
    target = np.array([4, 7, 5, EOS_ID])
    dump = D.export_attention(model, src, target, tmp_path, "ST", "ex1")
    assert len(dump.files) == 2 * 2 * 2
    for layer in range(2):
        for head in range(2):
            stem = tmp_path / f"ST_ex1_L{layer}_H{head}"
            m = D.read_attention_csv(stem.with_suffix(".csv"))
            assert m.shape == (4, 6)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-5)
            np.testing.assert_array_equal(m, dump.weights[layer][head].astype(np.float64))
            pixels = D.read_pgm(stem.with_suffix(".pgm"))
            np.testing.assert_array_equal(pixels, np.rint(255 * m).astype(np.uint8))
