import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rpattn import ndcore as nd
from rpattn import textenc as te
from rpattn.errors import EmptySentenceError

GOLDEN_SENTENCE = "A man is riding a surfboard on a wave"


def test_tokenize():
    assert te.tokenize("A man swinging a baseball bat.") == ["a", "man", "swinging", "a", "baseball", "bat"]
    assert te.tokenize("Three sheep!") == ["three", "sheep"]
    with pytest.raises(EmptySentenceError):
        te.tokenize("  ")


def test_pos_tag_golden_sentence():
    tags = te.pos_tag(te.tokenize(GOLDEN_SENTENCE))
    assert tags == [
        ("a", "ARTICLE"), ("man", "NOUN"), ("is", "VERB"), ("riding", "VERB"), ("a", "ARTICLE"),
        ("surfboard", "NOUN"), ("on", "PREP"), ("a", "ARTICLE"), ("wave", "NOUN"),
    ]


def test_pos_tag_adjective_and_unknown():
    assert te.pos_tag(["a", "green", "apple"]) == [("a", "ARTICLE"), ("green", "ADJ"), ("apple", "NOUN")]
    assert te.pos_tag(["zzz"]) == [("zzz", "OTHER")]


def test_group_phrases_golden_sentence():
    s = te.parse(GOLDEN_SENTENCE)
    assert s.phrases() == ["a man", "a surfboard", "a wave"]


def test_group_phrases_rules():
    assert te.group_phrases(["ADJ", "NOUN"]) == [(0, 2)]
    assert te.group_phrases(["VERB", "VERB", "PREP"]) == []
    # a dangling "the red" is dropped
    assert te.group_phrases(["ARTICLE", "ADJ", "VERB"]) == []
    assert te.group_phrases(["ARTICLE", "ADJ", "ADJ", "NOUN", "OTHER", "NOUN"]) == [(0, 4), (5, 6)]


tag_lists = st.lists(st.sampled_from(te.TAGS), max_size=15)


@given(tag_lists)
def test_spans_obey_grammar(tags):
    spans = te.group_phrases(tags)
    prev_end = 0
    for s, e in spans:
        assert prev_end <= s < e <= len(tags)
        assert te.phrase_grammar_ok(tags, (s, e))
        assert tags[s:e].count("NOUN") == 1
        prev_end = e


@given(tag_lists)
def test_grouping_is_deterministic(tags):
    assert te.group_phrases(tags) == te.group_phrases(list(tags))


def test_lexicon_file_and_pretagged(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text("blorp\tNOUN\nshiny\tADJ\n", encoding="utf-8")
    lex = te.load_lexicon(path)
    assert te.pos_tag(["the", "shiny", "blorp"], lex) == [("the", "ARTICLE"), ("shiny", "ADJ"), ("blorp", "NOUN")]
    s = te.from_pretagged(json.dumps([["The", "ARTICLE"], ["cat", "NOUN"], ["sat", "VERB"]]))
    assert s.phrases() == ["the cat"]
    with pytest.raises(ValueError):
        te.from_pretagged([["x", "NOPE"]])


@pytest.fixture
def encoder():
    return te.TextEncoder(te.Vocab.from_lexicon(), dim=8, emb_dim=6, rng=nd.RngStream(3))


def test_encode_words_shapes(encoder):
    e, ebar = encoder.encode_words(["a", "red", "square"])
    assert e.shape == (3, 8) and ebar.shape == (8,)


def test_zero_params_give_zero_features(encoder):
    for p in encoder.parameters():
        p.data[:] = 0
    e, ebar = encoder.encode_words(["a", "red", "square"])
    assert not e.data.any() and not ebar.data.any()
    p = encoder.encode_phrases(e, [(0, 3)])
    assert not p.data.any()


def test_single_token_sentence_embedding_equals_word(encoder):
    e, ebar = encoder.encode_words(["circle"])
    np.testing.assert_array_equal(e.data[0], ebar.data)


def test_reversal_swaps_directions(encoder):
    # With the two LSTMs exchanged, the reversed sentence yields the same
    # per-word states with forward/backward halves swapped.
    swapped = te.TextEncoder(encoder.vocab, dim=8, emb_dim=6)
    swapped.load_state_dict(encoder.state_dict())
    swapped.fwd, swapped.bwd = encoder.bwd, encoder.fwd
    s1, _ = encoder.encode_words(["red", "circle"])
    s2, _ = swapped.encode_words(["circle", "red"])
    np.testing.assert_allclose(s1.data[:, :4], s2.data[::-1, 4:], rtol=1e-6)
    np.testing.assert_allclose(s1.data[:, 4:], s2.data[::-1, :4], rtol=1e-6)


def test_padding_does_not_change_features(encoder):
    short = te.parse("a red square")
    long = te.parse("two green triangles left of a yellow square")
    alone = encoder.encode([short])
    batched = encoder.encode([short, long])
    np.testing.assert_allclose(batched.words.data[0, :3], alone.words.data[0], rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(batched.sentence.data[0], alone.sentence.data[0], rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(batched.phrases.data[0, :1], alone.phrases.data[0, :1], rtol=1e-6, atol=1e-7)
    assert not batched.words.data[0, 3:].any()
    assert not batched.phrases.data[0, 1:].any()


def test_one_token_span_is_one_lstm_step(encoder):
    e, _ = encoder.encode_words(["a", "circle"])
    p = encoder.encode_phrases(e, [(1, 2)])
    zero = nd.Tensor(np.zeros((1, 8)))
    h, _ = nd.lstm_step(e[1:2], (zero, zero), encoder.phrase)
    np.testing.assert_allclose(p.data, h.data, rtol=1e-6)


def test_identical_spans_identical_rows(encoder):
    e, _ = encoder.encode_words(["a", "red", "circle"])
    p = encoder.encode_phrases(e, [(0, 3), (0, 3)])
    np.testing.assert_array_equal(p.data[0], p.data[1])


def test_no_spans_gives_zero_rows(encoder):
    e, _ = encoder.encode_words(["is", "riding"])
    assert encoder.encode_phrases(e, []).shape == (0, 8)
    assert te.encode_phrases_mean(e, []).shape == (0, 8)


def test_mean_phrase_encoder():
    r1, r2 = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    e = nd.Tensor(np.stack([r1, r2, r1]))
    np.testing.assert_allclose(te.encode_phrases_mean(e, [(0, 2)]).data[0], (r1 + r2) / 2)
    same = nd.Tensor(np.stack([r1, r1]))
    np.testing.assert_allclose(te.encode_phrases_mean(same, [(0, 2)]).data[0], r1)


def test_empty_sentence_rejected(encoder):
    with pytest.raises(EmptySentenceError):
        encoder.encode_words([])


def test_oov_maps_to_unk(encoder):
    v = encoder.vocab
    assert v.ids(["qwertyuiop"]) == [v.stoi[te.UNK]]


def test_text_encoder_gradients():
    enc = te.TextEncoder(te.Vocab(["a", "red", "square", "circle"]), dim=4, emb_dim=3, rng=nd.RngStream(1))
    sents = [te.parse("a red square"), te.parse("circle")]
    w = np.random.default_rng(0).standard_normal((2, 3, 4))

    def fn():
        out = enc.encode(sents)
        return (out.words * nd.Tensor(w)).sum() + (out.sentence ** 2).sum() + (out.phrases ** 2).sum()

    assert nd.gradcheck(fn, enc.parameters(), max_per_tensor=40) <= 1e-4
