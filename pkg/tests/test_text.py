import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdst.errors import ContractError, InputError
from kdst.text import (BOS_ID, EOS_ID, PAD_ID, UNK_ID, BpeModel, TextCodec, Vocab, bpe_apply, bpe_train,
                       build_codec, decode_ids, detokenize, encode_ids, normalize_text)

TOY = ["low"] * 5 + ["lower"] * 2 + ["newest"] * 6 + ["widest"] * 3


def test_bpe_merges_hand_derived():
    # pair counts worked out by hand; ties resolved by the smallest pair
    model = bpe_train([" ".join(TOY)], 5)
    assert model.merges == [("e", "s"), ("es", "t</w>"), ("l", "o"), ("e", "w"), ("ew", "est</w>")]


def test_bpe_apply_unseen_word():
    model = bpe_train([" ".join(TOY)], 5)
    assert bpe_apply(model, "lowest") == ["lo", "w", "est</w>"]
    assert detokenize(bpe_apply(model, "lowest newest")) == "lowest newest"


def test_bpe_stops_when_no_pair_repeats():
    assert len(bpe_train(["ab cd"], 10)) == 0
    with pytest.raises(InputError):
        bpe_train([""], 3)
    with pytest.raises(ContractError):
        bpe_train(["a"], -1)


def test_bpe_save_load(tmp_path):
    model = bpe_train([" ".join(TOY)], 8)
    model.save(tmp_path / "m")
    assert BpeModel.load(tmp_path / "m") == model


def test_normalize_text():
    assert normalize_text("Hello,  World!") == "hello , world !"
    assert normalize_text("  Ça va?\n") == "ça va ?"
    assert normalize_text("naïve".encode("utf-8")) == "naïve"
    with pytest.raises(InputError):
        normalize_text(b"\xff\xfe")


def test_vocab_reserved_ids_and_round_trip(tmp_path):
    v = Vocab(["b", "a"])
    assert (v.stoi["<pad>"], v.stoi["<s>"], v.stoi["</s>"], v.stoi["<unk>"]) == (PAD_ID, BOS_ID, EOS_ID, UNK_ID)
    assert v.itos[4:] == ["b", "a"]
    v.save(tmp_path / "v")
    assert Vocab.load(tmp_path / "v") == v
    (tmp_path / "bad").write_text("x\t0\n", encoding="utf-8")
    with pytest.raises(InputError):
        Vocab.load(tmp_path / "bad")


def test_encode_decode_ids():
    v = Vocab(["a</w>", "b</w>"])
    assert encode_ids(v, ["a</w>", "zz", "b</w>"]) == [4, UNK_ID, 5, EOS_ID]
    assert decode_ids(v, [BOS_ID, 4, PAD_ID, 5, EOS_ID, 4]) == ["a</w>", "b</w>"]
    with pytest.raises(ContractError):
        decode_ids(v, [99])


def test_codec_round_trip(tmp_path):
    codec = build_codec(["Un deux trois.", "trois quatre"], 50)
    ids = codec.encode("Trois deux!")
    assert ids[-1] == EOS_ID and UNK_ID in ids  # "!" never seen
    assert codec.decode(codec.encode("deux trois .")) == "deux trois ."
    codec.save(tmp_path / "c")
    other = TextCodec.load(tmp_path / "c")
    assert other.encode("un quatre") == codec.encode("un quatre")


words = st.text(alphabet="abcde", min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=12), st.integers(0, 30), st.lists(words, min_size=1, max_size=5))
def test_segmentation_round_trips(corpus, merges, sentence):
    model = bpe_train([" ".join(corpus)], merges)
    text = " ".join(sentence)
    pieces = bpe_apply(model, text)
    assert detokenize(pieces) == text
    assert sum(p.endswith("</w>") for p in pieces) == len(sentence)


@settings(max_examples=30, deadline=None)
@given(st.lists(words, min_size=2, max_size=10))
def test_training_corpus_is_never_unknown(corpus):
    codec = build_codec([" ".join(corpus)], 20)
    ids = np.array(codec.encode(" ".join(corpus)))
    assert UNK_ID not in ids


def test_single_merge_takes_the_most_frequent_pair():
    # the word-final symbol carries the end-of-word marker
    assert bpe_train(["ab ab ab"], 1).merges == [("a", "b</w>")]


def test_tied_pairs_then_full_word():
    model = bpe_train(["abc abc"], 2)
    # (a, b) and (b, c</w>) both occur twice; the smaller pair goes first
    assert model.merges == [("a", "b"), ("ab", "c</w>")]
    assert bpe_apply(model, "abc") == ["abc</w>"]


def random_lines(n, seed=0):
    rng = np.random.default_rng(seed)
    letters = list("abcdefghijklmnopqrstuvwxyzéç")
    lines = []
    for _ in range(n):
        words = ["".join(rng.choice(letters, size=rng.integers(1, 8))) for _ in range(rng.integers(1, 9))]
        lines.append(" ".join(words))
    return lines


def test_thousand_line_corpus_round_trips_and_normalizes_idempotently():
    lines = random_lines(1000)
    model = bpe_train(lines[:300], 150)
    for line in lines:
        assert detokenize(bpe_apply(model, line)) == line
    messy = [f"  {line.upper()}!?, " for line in lines]
    once = [normalize_text(s) for s in messy]
    assert [normalize_text(s) for s in once] == once
