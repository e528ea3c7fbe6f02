"""Per-instance key-value table of generated entity embeddings.

Every question/dialog/story gets its own fresh table. Each entity
occurrence contributes one entry: the key is an embedding produced from
the occurrence's context by a small MLP, the value is the verbatim
surface string. Retrieval attends over the keys and returns a value, so
the exact string survives even when it was never in any vocabulary.
"""

from __future__ import annotations

import numpy as np

from .autodiff import constant
from .errors import ConfigError, ContractError, RetrievalError, ShapeError


class NeEntry:
    __slots__ = ("key", "value", "ne_type", "context_id")

    def __init__(self, key, value, ne_type=None, context_id=None):
        self.key = key
        self.value = value
        self.ne_type = ne_type
        self.context_id = context_id


class NeTable:
    """Ordered, append-only entry list scoped to one task instance."""

    def __init__(self, key_dim):
        self.key_dim = key_dim
        self.entries: list[NeEntry] = []

    def insert(self, key, value, ne_type=None, context_id=None):
        if key.shape != (self.key_dim,):
            raise ShapeError(
                f"entity key has shape {key.shape}, table expects ({self.key_dim},)"
            )
        self.entries.append(NeEntry(key, value, ne_type, context_id))

    def __len__(self):
        return len(self.entries)

    def values(self):
        return [e.value for e in self.entries]

    def value_mask(self, gold_value):
        """0/1 mask over entries whose value equals `gold_value` exactly."""
        return np.array([1.0 if e.value == gold_value else 0.0 for e in self.entries])

    def key_matrix(self, graph):
        if not self.entries:
            raise RetrievalError("entity table is empty")
        return graph.stack([e.key for e in self.entries])

    def debug_dump(self):
        """Inspection view: one dict per entry, insertion order."""
        return [
            {
                "value": e.value,
                "ne_type": e.ne_type,
                "context_id": e.context_id,
                "key_norm": float(np.linalg.norm(e.key.data)),
            }
            for e in self.entries
        ]


class NeGenerator:
    """Context embedding -> fresh entity embedding (one-hidden-layer MLP)."""

    def __init__(self, params, name, context_size, embed_size, rng):
        self.context_size = context_size
        self.embed_size = embed_size
        self.w1 = params.add(f"{name}.w1", (embed_size, context_size), rng)
        self.b1 = params.zeros(f"{name}.b1", (embed_size,))
        self.w2 = params.add(f"{name}.w2", (embed_size, embed_size), rng)
        self.b2 = params.zeros(f"{name}.b2", (embed_size,))

    def __call__(self, graph, context):
        if context.shape != (self.context_size,):
            raise ShapeError(
                f"generator context has shape {context.shape}, "
                f"expected ({self.context_size},)"
            )
        hidden = graph.tanh(graph.affine(self.w1, context, self.b1))
        return graph.affine(self.w2, hidden, self.b2)

    def batch(self, graph, contexts):
        """(n, context_size) -> (n, embed_size), same map per row."""
        if contexts.shape[1] != self.context_size:
            raise ShapeError(f"generator batch has shape {contexts.shape}")
        hidden = graph.tanh(
            graph.add_rowvec(graph.matmat(contexts, graph.transpose(self.w1)), self.b1)
        )
        return graph.add_rowvec(graph.matmat(hidden, graph.transpose(self.w2)), self.b2)


class NeRetriever:
    """Task state -> query vector attending over table keys.

    Scores are plain dot products against the keys. Attention is softmax
    by default, which commits to a single retrieved value; the sigmoid
    variant scores entries independently for multi-select experiments.
    """

    def __init__(self, params, name, state_size, embed_size, rng, attention="softmax"):
        if attention not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown table attention {attention!r}")
        self.state_size = state_size
        self.embed_size = embed_size
        self.attention = attention
        self.w1 = params.add(f"{name}.w1", (embed_size, state_size), rng)
        self.b1 = params.zeros(f"{name}.b1", (embed_size,))
        self.w2 = params.add(f"{name}.w2", (embed_size, embed_size), rng)
        self.b2 = params.zeros(f"{name}.b2", (embed_size,))

    def query(self, graph, state):
        if state.shape != (self.state_size,):
            raise ShapeError(
                f"retriever state has shape {state.shape}, expected ({self.state_size},)"
            )
        hidden = graph.tanh(graph.affine(self.w1, state, self.b1))
        return graph.affine(self.w2, hidden, self.b2)

    def scores(self, graph, table, state):
        keys = table.key_matrix(graph)
        return graph.matvec(keys, self.query(graph, state))

    def retrieve(self, graph, table, state, mode):
        """mode="train": attention node for the supervision loss.
        mode="infer": (attention weights array, argmax entry's value)."""
        if not table.entries:
            raise RetrievalError("cannot retrieve from an empty entity table")
        scores = self.scores(graph, table, state)
        attn = graph.softmax(scores) if self.attention == "softmax" else graph.sigmoid(scores)
        if mode == "train":
            return attn
        if mode == "infer":
            pick = int(np.argmax(attn.data))
            return attn.data.copy(), table.entries[pick].value
        raise ContractError(f"unknown retrieve mode {mode!r}")

    def loss(self, graph, table, state, gold_value):
        """Cross-entropy crediting every entry that holds the gold value."""
        mask = table.value_mask(gold_value)
        if not mask.any():
            raise ContractError(f"gold value {gold_value!r} not present in table")
        attn = self.retrieve(graph, table, state, mode="train")
        if self.attention == "softmax":
            gold_mass = graph.dot(attn, constant(mask))
            return graph.cross_entropy(graph.vec1(gold_mass), 0, kind="softmax")
        return graph.cross_entropy(attn, mask, kind="sigmoid")
