import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netable.autodiff import Graph, ParamSet, constant
from netable.encoders import (
    PAD,
    EmbeddingTable,
    LstmEncoder,
    RnnEncoder,
    Token,
    Vocabulary,
    bow_encode,
    plain,
    rnn_encode,
    tokenize,
    window_extract,
)
from netable.errors import ConfigError, ContractError, DataError


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_vocabulary_reserved_and_unk():
    v = Vocabulary(tokens=["alpha", "beta"])
    assert v.pad_id == 0
    assert v.unk_id == 1
    assert v.id("alpha") == 2
    assert v.id("missing") == v.unk_id
    assert "beta" in v and "missing" not in v


def test_vocabulary_roundtrip(tmp_path):
    v = Vocabulary(tokens=["alpha", "beta", "gamma"])
    path = tmp_path / "vocab.txt"
    v.save(path)
    v2 = Vocabulary.load(path)
    assert v2.tokens() == v.tokens()
    assert v2.id("gamma") == v.id("gamma")


def test_vocabulary_lookup_tracing():
    v = Vocabulary(tokens=["alpha"])
    v.trace_lookups = True
    v.id("alpha")
    v.id("zzz")
    assert v.lookup_log == ["alpha", "zzz"]


def test_tokenize_preserves_named_forms():
    toks = tokenize("Course Number EECS545 Credits ?", preserve={"EECS545"})
    assert toks == ["course", "number", "EECS545", "credits", "?"]


def test_window_extract_plain_slice():
    story = plain(list("ABCDEF"))
    win = window_extract(story, 2, 5)
    assert [t.text for t in win] == ["A", "B", "C", "D", "E"]


def test_window_extract_boundary_padding():
    story = plain(list("ABCDEF"))
    win = window_extract(story, 0, 5)
    assert [t.text for t in win] == [PAD, PAD, "A", "B", "C"]


def test_window_extract_rejects_even_size():
    with pytest.raises(ConfigError):
        window_extract(plain(list("ABC")), 1, 4)


def _embedder(params, rng, dim=6):
    vocab = Vocabulary(tokens=["a", "b", "c", "d", "number", "course", "?"])
    table = EmbeddingTable(params, "emb", vocab, dim, rng)

    def embed(graph, text):
        return table.embed_vector(graph, text)

    return vocab, table, embed


def test_rnn_empty_sequence_is_zero_state(rng):
    ps = ParamSet()
    _, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)
    g = Graph()
    h, states, gen = rnn_encode(g, rnn, [], mode="without_ne", embed_fn=embed)
    np.testing.assert_array_equal(h.data, np.zeros(6))
    assert states == [] and gen == []


def test_rnn_hook_receives_state_before_entity(rng):
    ps = ParamSet()
    _, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)
    tokens = [
        Token("course"),
        Token("number"),
        Token("EECS545", is_ne=True, ne_type="course_number"),
        Token("credits"),
        Token("?"),
    ]
    seen = []

    def hook(graph, h, tok, pos):
        seen.append((pos, tok.text, h.data.copy()))
        return constant(np.zeros(6))

    g = Graph()
    _, states, gen = rnn_encode(g, rnn, tokens, mode="with_ne", embed_fn=embed, ne_hook=hook)
    assert len(seen) == 1
    pos, text, ctx = seen[0]
    assert pos == 2 and text == "EECS545"
    # context is the hidden state after consuming "number"
    np.testing.assert_array_equal(ctx, states[1].data)
    assert len(gen) == 1


def test_rnn_without_ne_never_calls_hook(rng):
    ps = ParamSet()
    vocab, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)
    tokens = [Token("course"), Token("EECS545", is_ne=True, ne_type="course_number")]
    calls = []

    def hook(graph, h, tok, pos):
        calls.append(pos)
        return constant(np.zeros(6))

    vocab.trace_lookups = True
    g = Graph()
    rnn_encode(g, rnn, tokens, mode="with_ne", embed_fn=embed, ne_hook=hook)
    assert calls == [1]
    assert "EECS545" not in vocab.lookup_log

    vocab.lookup_log.clear()
    g = Graph()
    rnn_encode(g, rnn, tokens, mode="without_ne", embed_fn=embed, ne_hook=hook)
    assert calls == [1]  # unchanged
    assert "EECS545" in vocab.lookup_log  # consumed as a vocabulary lookup


def test_rnn_dialog_mode_requires_type_tag(rng):
    ps = ParamSet()
    _, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)

    def type_embed(graph, name):
        return constant(np.zeros(6))

    tokens = [Token("london", is_ne=True, ne_type=None)]
    with pytest.raises(DataError):
        g = Graph()
        rnn_encode(
            g, rnn, tokens, mode="without_ne", embed_fn=embed, type_embed_fn=type_embed
        )


def test_lstm_zero_weights_give_zero_output(rng):
    ps = ParamSet()
    lstm = LstmEncoder(ps, "lstm", 4, 4, np.random.default_rng(0))
    for _, t in ps.items():
        t.data[:] = 0.0
    g = Graph()
    out = lstm.encode(g, [constant(rng.normal(size=4)) for _ in range(3)])
    np.testing.assert_allclose(out.data, np.zeros(4))


def _lstm_oracle(wx, wh, b, xs):
    """Independent plain-numpy recurrence."""

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    h = np.zeros(len(b["i"]))
    c = np.zeros_like(h)
    for x in xs:
        i = sig(wx["i"] @ x + wh["i"] @ h + b["i"])
        f = sig(wx["f"] @ x + wh["f"] @ h + b["f"])
        o = sig(wx["o"] @ x + wh["o"] @ h + b["o"])
        ct = np.tanh(wx["c"] @ x + wh["c"] @ h + b["c"])
        c = f * c + i * ct
        h = o * np.tanh(c)
    return h


def test_lstm_matches_direct_recurrence(rng):
    ps = ParamSet()
    lstm = LstmEncoder(ps, "lstm", 5, 5, rng)
    xs = [rng.normal(size=5) for _ in range(4)]
    g = Graph()
    out = lstm.encode(g, [constant(x) for x in xs])
    wx = {k: v.data for k, v in lstm.wx.items()}
    wh = {k: v.data for k, v in lstm.wh.items()}
    b = {k: v.data for k, v in lstm.b.items()}
    np.testing.assert_allclose(out.data, _lstm_oracle(wx, wh, b, xs), rtol=1e-12)


def test_lstm_state_evolves_with_repetition(rng):
    ps = ParamSet()
    lstm = LstmEncoder(ps, "lstm", 4, 4, rng)
    x = rng.normal(size=4)
    outs = []
    for k in (1, 3, 6):
        g = Graph()
        outs.append(lstm.encode(g, [constant(x)] * k).data.copy())
    assert not np.allclose(outs[0], outs[1])
    assert not np.allclose(outs[1], outs[2])


def test_lstm_batch_path_matches_sequential(rng):
    ps = ParamSet()
    lstm = LstmEncoder(ps, "lstm", 4, 3, rng)
    seqs = [[rng.normal(size=4) for _ in range(3)] for _ in range(5)]
    g = Graph()
    batch = lstm.encode_batch(
        g, [constant(np.stack([s[t] for s in seqs])) for t in range(3)], n=5
    )
    for i, s in enumerate(seqs):
        g2 = Graph()
        single = lstm.encode(g2, [constant(x) for x in s])
        np.testing.assert_allclose(batch.data[i], single.data, rtol=1e-12)


def test_bow_empty_window_is_zero():
    g = Graph()
    out = bow_encode(g, [], dim=7)
    np.testing.assert_array_equal(out.data, np.zeros(7))


@settings(max_examples=25, deadline=None)
@given(perm=st.permutations(list(range(5))))
def test_bow_is_permutation_invariant(perm):
    rng = np.random.default_rng(9)
    vecs = [rng.normal(size=6) for _ in range(5)]
    g = Graph()
    base = bow_encode(g, [constant(v) for v in vecs]).data
    g2 = Graph()
    shuffled = bow_encode(g2, [constant(vecs[i]) for i in perm]).data
    np.testing.assert_allclose(base, shuffled, rtol=1e-12)


def test_bow_direct_sum_oracle(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    g = Graph()
    out = bow_encode(g, [constant(a), constant(b)])
    np.testing.assert_allclose(out.data, a + b, rtol=1e-12)


def test_rnn_and_lstm_are_order_sensitive(rng):
    # witness pair demonstrating the encoders are not permutation invariant
    ps = ParamSet()
    _, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)
    lstm = LstmEncoder(ps, "lstm", 6, 6, rng)
    fwd = plain(["a", "b", "c"])
    rev = plain(["c", "b", "a"])
    g = Graph()
    h1, _, _ = rnn_encode(g, rnn, fwd, mode="without_ne", embed_fn=embed)
    h2, _, _ = rnn_encode(g, rnn, rev, mode="without_ne", embed_fn=embed)
    assert not np.allclose(h1.data, h2.data)
    e1 = lstm.encode(g, [embed(g, t.text) for t in fwd])
    e2 = lstm.encode(g, [embed(g, t.text) for t in rev])
    assert not np.allclose(e1.data, e2.data)


def test_with_ne_mode_requires_hook(rng):
    ps = ParamSet()
    _, _, embed = _embedder(ps, rng)
    rnn = RnnEncoder(ps, "rnn", 6, 6, rng)
    tokens = [Token("EECS545", is_ne=True, ne_type="course_number")]
    with pytest.raises(ContractError):
        rnn_encode(Graph(), rnn, tokens, mode="with_ne", embed_fn=embed)
