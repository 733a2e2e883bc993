"""Vocabulary building, the normalization rule, and encode/decode."""

import pytest
from hypothesis import given, settings, strategies as st

from genuda.tokenizer import (BLANK_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID,
                              SPECIAL_TOKENS, Vocab, VocabError, build_vocab,
                              decode, encode, normalize)


def test_special_ids_are_fixed():
    assert (PAD_ID, UNK_ID, EOS_ID, SEP_ID, BLANK_ID) == (0, 1, 2, 3, 4)


def test_normalization_rule():
    assert normalize("The movie was so cool!") == \
        ["the", "movie", "was", "so", "cool", "!"]


def test_counting_example_min_count():
    # "A a a. b" -> a:3, .:1, b:1; min_count=2 keeps only "a"
    vocab = build_vocab([["A a a. b"]], max_vocab=64, min_count=2)
    assert "a" in vocab.token_to_id
    assert "b" not in vocab.token_to_id
    assert "." not in vocab.token_to_id


def test_oov_maps_to_unk():
    vocab = build_vocab([["a a b"]], max_vocab=64, min_count=2)
    assert encode("a b", vocab) == [vocab.id_of("a"), UNK_ID]


def test_build_is_deterministic():
    texts = ["the movie was cool", "was it cool ?", "so so so fine"]
    v1 = build_vocab([texts], max_vocab=64)
    v2 = build_vocab([texts], max_vocab=64)
    assert v1.id_to_token == v2.id_to_token


def test_frequency_then_lexicographic_order():
    vocab = build_vocab([["b b c c a"]], max_vocab=64)
    # b and c tie at 2 -> b first; a last
    assert vocab.id_to_token[5:] == ("b", "c", "a")


def test_max_vocab_caps_total_ids():
    vocab = build_vocab([["a b c d e f g h i j k l m n o p"]], max_vocab=16)
    assert len(vocab) == 16


def test_max_vocab_too_small():
    with pytest.raises(VocabError):
        build_vocab([["a"]], max_vocab=15)


def test_truncation_to_max_seq_len():
    words = " ".join(f"w{i}" for i in range(300))
    vocab = build_vocab([[words]], max_vocab=512)
    assert len(encode(words, vocab, max_seq_len=256)) == 256


def test_empty_string_encodes_empty():
    vocab = build_vocab([["a"]], max_vocab=64)
    assert encode("", vocab) == []


def test_raw_specials_are_escaped():
    vocab = build_vocab([["x <sep> y _ z <eos>"]], max_vocab=64)
    ids = encode("x <sep> y _ z <eos>", vocab)
    assert all(i >= 5 for i in ids)


def test_template_path_keeps_specials():
    vocab = build_vocab([["x y"]], max_vocab=64)
    ids = encode("<sep> x _ <eos>", vocab, keep_specials=True)
    assert ids == [SEP_ID, vocab.id_of("x"), BLANK_ID, EOS_ID]


def test_serialization_round_trip():
    vocab = build_vocab([["the movie was so cool !"]], max_vocab=64)
    again = Vocab.from_text(vocab.to_text())
    assert again.id_to_token == vocab.id_to_token
    assert vocab.to_text().splitlines()[:5] == list(SPECIAL_TOKENS)


@given(st.lists(st.from_regex(r"[a-z]{1,8}", fullmatch=True), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_decode_encode_identity_without_unk(words):
    text = " ".join(words)
    vocab = build_vocab([[text]], max_vocab=4096)
    ids = encode(text, vocab, max_seq_len=64)
    assert decode(ids, vocab) == " ".join(normalize(text)[:64])
