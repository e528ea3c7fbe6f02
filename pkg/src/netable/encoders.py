"""Vocabulary, embeddings, and the sequence encoders shared by all tasks.

Three encoders cover every model here: a tanh RNN with an injection hook
for on-the-fly entity embeddings, a standard LSTM, and bag-of-words. Raw
token streams carry entity annotations (`Token.is_ne`, `Token.ne_type`)
produced upstream by the task generators or the table-membership rule.
"""

from __future__ import annotations

import re
from typing import NamedTuple

import numpy as np

from .autodiff import constant
from .errors import ConfigError, ContractError, DataError

PAD = "<pad>"
UNK = "<unk>"
NE_PLACEHOLDER = "<ne>"


class Token(NamedTuple):
    text: str
    is_ne: bool = False
    ne_type: str | None = None


def plain(texts):
    """Tokens with no entity annotations."""
    return [Token(t) for t in texts]


_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")


def tokenize(text, preserve=()):
    """Whitespace + punctuation split; lowercase except preserved forms."""
    keep = set(preserve)
    out = []
    for raw in _TOKEN_RE.findall(text):
        out.append(raw if raw in keep else raw.lower())
    return out


class Vocabulary:
    """Dense token -> id map with reserved <pad>/<unk> slots.

    When `trace_lookups` is on, every `id()` call is recorded; tests use
    this to prove that entity surface forms never reach the embedding
    table on the generated-embedding path.
    """

    def __init__(self, tokens=(), extra_reserved=()):
        self._index: dict[str, int] = {}
        self.trace_lookups = False
        self.lookup_log: list[str] = []
        for t in (PAD, UNK, *extra_reserved):
            self._add(t)
        for t in tokens:
            self._add(t)

    def _add(self, token):
        if token not in self._index:
            self._index[token] = len(self._index)

    @classmethod
    def build(cls, token_iter, extra_reserved=()):
        seen = []
        seen_set = set()
        for t in token_iter:
            if t not in seen_set:
                seen_set.add(t)
                seen.append(t)
        return cls(tokens=seen, extra_reserved=extra_reserved)

    def id(self, token):
        if self.trace_lookups:
            self.lookup_log.append(token)
        return self._index.get(token, self._index[UNK])

    def __contains__(self, token):
        return token in self._index

    def __len__(self):
        return len(self._index)

    @property
    def pad_id(self):
        return self._index[PAD]

    @property
    def unk_id(self):
        return self._index[UNK]

    def tokens(self):
        return list(self._index)

    def save(self, path):
        with open(path, "w") as f:
            for t in self._index:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            toks = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if toks[:2] != [PAD, UNK]:
            raise DataError(f"vocabulary file {path} missing reserved tokens")
        v = cls.__new__(cls)
        v._index = {t: i for i, t in enumerate(toks)}
        v.trace_lookups = False
        v.lookup_log = []
        return v


class EmbeddingTable:
    """Trainable (vocab x dim) matrix addressed through a Vocabulary.

    Rows are initialized at unit scale (a lookup's fan-in is the single
    active input), which keeps dot-product attention in a trainable range
    at the small embedding sizes used here.
    """

    def __init__(self, params, name, vocab, dim, rng):
        self.vocab = vocab
        self.dim = dim
        self.matrix = params.add(name, (len(vocab), dim), rng, fan_in=1)

    def embed_token(self, graph, token_text):
        return graph.gather_rows(self.matrix, [self.vocab.id(token_text)])

    def embed_vector(self, graph, token_text):
        row = self.embed_token(graph, token_text)
        return graph.sum_rows(row)

    def embed_ids(self, graph, ids):
        return graph.gather_rows(self.matrix, ids)


class TypeEmbeddingTable:
    """One embedding row per entity-type tag."""

    def __init__(self, params, name, type_names, dim, rng):
        self.index = {t: i for i, t in enumerate(type_names)}
        self.dim = dim
        self.matrix = params.add(name, (len(type_names), dim), rng, fan_in=1)

    def embed(self, graph, type_name):
        if type_name not in self.index:
            raise DataError(f"unknown entity type {type_name!r}")
        return graph.sum_rows(graph.gather_rows(self.matrix, [self.index[type_name]]))


class RnnEncoder:
    """Plain tanh recurrence: h' = tanh(Wx x + Wh h + b)."""

    def __init__(self, params, name, input_size, hidden_size, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.wx = params.add(f"{name}.wx", (hidden_size, input_size), rng)
        self.wh = params.add(f"{name}.wh", (hidden_size, hidden_size), rng)
        self.b = params.zeros(f"{name}.b", (hidden_size,))

    def initial_state(self):
        return constant(np.zeros(self.hidden_size))

    def step(self, graph, x, h):
        return graph.tanh(
            graph.add(graph.affine(self.wx, x, self.b), graph.matvec(self.wh, h))
        )


class LstmEncoder:
    """Standard LSTM with per-gate weight matrices; supports a batched path
    that runs many equal-length sequences as matrix ops."""

    GATES = ("i", "f", "o", "c")

    def __init__(self, params, name, input_size, hidden_size, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.wx = {}
        self.wh = {}
        self.b = {}
        for gate in self.GATES:
            self.wx[gate] = params.add(f"{name}.wx_{gate}", (hidden_size, input_size), rng)
            self.wh[gate] = params.add(f"{name}.wh_{gate}", (hidden_size, hidden_size), rng)
            self.b[gate] = params.zeros(f"{name}.b_{gate}", (hidden_size,))

    def initial_state(self):
        z = constant(np.zeros(self.hidden_size))
        return z, z

    def step(self, graph, x, state):
        h, c = state
        pre = {
            gate: graph.add(
                graph.affine(self.wx[gate], x, self.b[gate]),
                graph.matvec(self.wh[gate], h),
            )
            for gate in self.GATES
        }
        i = graph.sigmoid(pre["i"])
        f = graph.sigmoid(pre["f"])
        o = graph.sigmoid(pre["o"])
        c_tilde = graph.tanh(pre["c"])
        c_new = graph.add(graph.mul(f, c), graph.mul(i, c_tilde))
        h_new = graph.mul(o, graph.tanh(c_new))
        return h_new, c_new

    def encode(self, graph, inputs):
        """inputs: list of (input_size,) tensors; returns final hidden."""
        state = self.initial_state()
        for x in inputs:
            state = self.step(graph, x, state)
        return state[0]

    def encode_batch(self, graph, step_inputs, n):
        """step_inputs: list over time of (n, input_size) matrices.

        Returns the (n, hidden) final hidden matrix. Equivalent to running
        `encode` independently per row.
        """
        h = constant(np.zeros((n, self.hidden_size)))
        c = constant(np.zeros((n, self.hidden_size)))
        for x in step_inputs:
            pre = {
                gate: graph.add_rowvec(
                    graph.add(
                        graph.matmat(x, graph.transpose(self.wx[gate])),
                        graph.matmat(h, graph.transpose(self.wh[gate])),
                    ),
                    self.b[gate],
                )
                for gate in self.GATES
            }
            i = graph.sigmoid(pre["i"])
            f = graph.sigmoid(pre["f"])
            o = graph.sigmoid(pre["o"])
            c_tilde = graph.tanh(pre["c"])
            c = graph.add(graph.mul(f, c), graph.mul(i, c_tilde))
            h = graph.mul(o, graph.tanh(c))
        return h


def rnn_encode(graph, rnn, tokens, mode, embed_fn, ne_hook=None, type_embed_fn=None):
    """Encode an annotated token sequence with the tanh RNN.

    mode="with_ne": at each entity position the hook is handed the hidden
    state accumulated so far (the state after the token just before the
    entity) and must return the generated embedding used as that step's
    input; a type embedding is added when `type_embed_fn` is given.
    mode="without_ne": entity tokens go through the vocabulary like any
    other word, plus the type embedding when given.

    Returns (final hidden state, per-step states, hook results).
    """
    if mode not in ("with_ne", "without_ne"):
        raise ContractError(f"unknown encode mode {mode!r}")
    h = rnn.initial_state()
    states = []
    generated = []
    for pos, tok in enumerate(tokens):
        if tok.is_ne and mode == "with_ne":
            if ne_hook is None:
                raise ContractError("with_ne encoding requires an ne_hook")
            gen = ne_hook(graph, h, tok, pos)
            generated.append((pos, tok, gen))
            x = gen
            if type_embed_fn is not None:
                if tok.ne_type is None:
                    raise DataError(f"entity token {tok.text!r} lacks a type tag")
                x = graph.add(x, type_embed_fn(graph, tok.ne_type))
        else:
            x = embed_fn(graph, tok.text)
            if tok.is_ne and type_embed_fn is not None:
                if tok.ne_type is None:
                    raise DataError(f"entity token {tok.text!r} lacks a type tag")
                x = graph.add(x, type_embed_fn(graph, tok.ne_type))
        h = rnn.step(graph, x, h)
        states.append(h)
    return h, states, generated


def bow_encode(graph, vectors, dim=None):
    """Order-invariant sum of embedding vectors; empty input gives zeros."""
    if not vectors:
        if dim is None:
            raise ContractError("bow_encode of empty input needs an explicit dim")
        return constant(np.zeros(dim))
    if len(vectors) == 1:
        return vectors[0]
    return graph.add_n(list(vectors))


def window_extract(story_tokens, center, size):
    """Window of `size` tokens centered on `center`, <pad>-padded at edges."""
    if size % 2 == 0:
        raise ConfigError(f"window size must be odd, got {size}")
    if not 0 <= center < len(story_tokens):
        raise ContractError(f"window center {center} outside story of length {len(story_tokens)}")
    half = size // 2
    pad = Token(PAD)
    out = []
    for i in range(center - half, center + half + 1):
        out.append(story_tokens[i] if 0 <= i < len(story_tokens) else pad)
    return out
