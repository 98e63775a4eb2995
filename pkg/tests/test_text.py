import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wearlang import captions as C
from wearlang import data as D
from wearlang import text as T


def test_split_keeps_numbers_whole_and_splits_punctuation():
    assert T.split_words("Run was detected during minutes 1270 to 1319.") == [
        "run", "was", "detected", "during", "minutes", "1270", "to", "1319", "."]
    assert T.split_words("mean of 88.7, std -0.5 (min -3.2)") == [
        "mean", "of", "88.7", ",", "std", "-0.5", "(", "min", "-3.2", ")"]
    assert T.split_words("the 680-960 minute range") == ["the", "680", "-", "960", "minute", "range"]


def test_normalize_is_idempotent_on_captions():
    day, ev = D.synthesize_day(3, [(D.ACTIVITY_PROFILES["Run"], 100, 150)], [("Happy", 7)])
    for variant in C.ALL_VARIANTS:
        cap = C.compose_caption(day, ev, variant, np.random.default_rng(0)).text
        norm = T.normalize_text(cap)
        assert T.normalize_text(norm) == norm
        assert norm == cap.lower()


_word = st.sampled_from(["heart", "rate", "88.7", "-0.5", "1270", "(", ")", ".", ",", "run",
                         "max", "-", "min", "at", "minute"])


@given(st.lists(_word, min_size=1, max_size=30))
def test_tokenize_detokenize_round_trip(words):
    text = T.join_words(words)
    vocab = T.build_vocab([text])
    ids = vocab.tokenize(text)
    assert T.normalize_text(vocab.detokenize(ids)) == T.normalize_text(text)


def test_vocab_order_specials_and_unknown(tmp_path):
    vocab = T.build_vocab(["b a a", "c a b"])
    assert vocab.itos == T.SPECIALS + ("a", "b", "c")
    assert vocab.id("zzz") == T.UNK
    vocab.save(tmp_path / "v.txt")
    assert T.Vocabulary.load(tmp_path / "v.txt") == vocab
    assert T.build_vocab(["x y y z"], min_freq=2).itos == T.SPECIALS + ("y",)
    with pytest.raises(ValueError):
        T.build_vocab([])
    with pytest.raises(ValueError):
        T.Vocabulary(("a", "b"))


def test_encoder_and_decoder_layouts():
    vocab = T.build_vocab(["walk was observed"])
    w, was, obs = (vocab.id(t) for t in ("walk", "was", "observed"))
    assert T.encoder_ids(vocab, "Walk was observed", 7) == [T.START, w, was, obs, T.END, 0, 0]
    assert T.encoder_ids(vocab, "Walk was observed", 4) == [T.START, w, was, T.END]
    inp, tgt = T.decoder_pair(vocab, "Walk was observed", 6)
    assert inp == [T.START, w, was, obs, 0, 0]
    assert tgt == [w, was, obs, T.END, 0, 0]
    assert inp[1:4] == tgt[:3]


def test_detokenize_stops_at_end_and_skips_pad():
    vocab = T.build_vocab(["a b"])
    a, b = vocab.id("a"), vocab.id("b")
    assert vocab.detokenize([T.START, a, T.PAD, b, T.END, a]) == "a b"


def test_prompt_sets():
    ps = T.make_prompt_set("Outdoor Bike")
    assert len(ps.prompts) == 30 == len(set(ps.prompts))
    assert all("Outdoor Bike" in p for p in ps.prompts)
    assert ps.prompts[0] == "A period of Outdoor Bike was observed during the session."
    with pytest.raises(ValueError):
        T.PromptSet("Run", ("only one",))
