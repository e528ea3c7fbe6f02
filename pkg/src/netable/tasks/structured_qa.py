"""Course-offerings lookup task: one-line structured questions against a
single 100-row table, answered by the 3-step retrieval mechanism.

Questions follow `<key-column-type> <key-value> <answer-column-type> ?`
with the key value drawn from one of the two entity columns. The dataset
is 500 pairs sampled from the table and split 400/100, so some test keys
never occur in training.
"""

from __future__ import annotations

import json

import numpy as np

from ..autodiff import Graph, ParamSet
from ..db import DbRetriever, DbTable, RetrievalContext, RetrievalGold
from ..encoders import EmbeddingTable, RnnEncoder, Token, Vocabulary, rnn_encode
from ..errors import DataError
from ..ne_table import NeGenerator, NeTable

HEADINGS = ["course number", "course name", "department", "credits"]
IS_NE = [True, True, False, False]
N_ROWS = 100
N_UNIQUE_NUMBERS = 100
N_UNIQUE_NAMES = 96
N_DEPARTMENTS = 10
N_CREDIT_VALUES = 4

DEPARTMENTS = [
    "engineering", "mathematics", "physics", "chemistry", "biology",
    "history", "economics", "psychology", "statistics", "linguistics",
]
DEPT_CODES = [
    "EECS", "MATH", "PHYS", "CHEM", "BIOL",
    "HIST", "ECON", "PSYC", "STAT", "LING",
]
NAME_HEADS = [
    "Intro_to", "Advanced", "Applied", "Modern", "Classical", "Quantitative",
    "Computational", "Empirical", "Theoretical", "Foundations_of", "Topics_in",
    "Principles_of",
]
NAME_TAILS = [
    "Optimization", "Algebra", "Mechanics", "Thermodynamics", "Genetics",
    "Networks", "Inference", "Dynamics", "Rhetoric", "Markets", "Statistics",
    "Programming", "Circuits", "Ecology", "Cognition", "Algorithms",
]
CREDIT_VALUES = ["1", "2", "3", "4"]


def generate_course_db(rng):
    """100 courses; numbers unique, 96 distinct names, 10 departments."""
    numbers = []
    for i in range(N_ROWS):
        dept = i % N_DEPARTMENTS
        while True:
            num = f"{DEPT_CODES[dept]}{rng.integers(100, 1000)}"
            if num not in numbers:
                numbers.append(num)
                break
    all_names = [f"{h}_{t}" for h in NAME_HEADS for t in NAME_TAILS]
    picked = list(rng.choice(len(all_names), size=N_UNIQUE_NAMES, replace=False))
    names = [all_names[i] for i in picked]
    doubled = list(rng.choice(N_UNIQUE_NAMES, size=N_ROWS - N_UNIQUE_NAMES, replace=False))
    name_cells = names + [names[i] for i in doubled]
    name_cells = [name_cells[i] for i in rng.permutation(N_ROWS)]
    credit_cells = [CREDIT_VALUES[rng.integers(0, N_CREDIT_VALUES)] for _ in range(N_ROWS)]
    for i, v in enumerate(CREDIT_VALUES):  # guarantee all credit values occur
        credit_cells[i] = v
    rows = [
        [numbers[i], name_cells[i], DEPARTMENTS[i % N_DEPARTMENTS], credit_cells[i]]
        for i in range(N_ROWS)
    ]
    db = DbTable(HEADINGS, IS_NE, rows)
    _validate_course_db(db)
    return db


def _validate_course_db(db):
    counts = {
        "course number": (0, N_UNIQUE_NUMBERS),
        "course name": (1, N_UNIQUE_NAMES),
        "department": (2, N_DEPARTMENTS),
        "credits": (3, N_CREDIT_VALUES),
    }
    for heading, (c, want) in counts.items():
        got = len(set(db.column(c)))
        if got != want:
            raise DataError(f"{heading}: {got} unique values, need {want}")


class QaPair:
    __slots__ = ("tokens", "gold")

    def __init__(self, tokens, gold):
        self.tokens = tokens  # list[Token]
        self.gold = gold  # dict, see generate_qa_pairs

    def to_json(self):
        return {
            "tokens": [t.text for t in self.tokens],
            "ne": [
                {"pos": i, "value": t.text, "type": t.ne_type}
                for i, t in enumerate(self.tokens)
                if t.is_ne
            ],
            "gold": self.gold,
        }

    @classmethod
    def from_json(cls, record):
        ne_at = {e["pos"]: e for e in record["ne"]}
        tokens = [
            Token(t, is_ne=i in ne_at, ne_type=ne_at[i]["type"] if i in ne_at else None)
            for i, t in enumerate(record["tokens"])
        ]
        return cls(tokens, record["gold"])


def generate_qa_pairs(rng, db, total=500, train=400):
    """Sample distinct (row, key column, answer column) triples."""
    combos = [
        (r, c1, c2)
        for r in range(db.n_rows)
        for c1 in (0, 1)
        for c2 in range(db.n_cols)
        if c2 != c1
    ]
    picked = rng.choice(len(combos), size=total, replace=False)
    pairs = []
    for k in picked:
        r, c1, c2 = combos[int(k)]
        value = db.rows[r][c1]
        tokens = [Token(w) for w in db.headings[c1].split()]
        tokens.append(Token(value, is_ne=True, ne_type=db.type_name(c1)))
        tokens.extend(Token(w) for w in db.headings[c2].split())
        tokens.append(Token("?"))
        rows = db.filter_rows({c1: value})
        if r not in rows:
            raise DataError("sampled row missing from its own filter result")
        cells = db.project(rows, [c2])
        answers = sorted({v for _, _, v in cells})
        gold = {
            "acc": [c2],
            "acr": [c1],
            "ne_values": {str(c1): value},
            "rows": rows,
            "cells": [[rr, cc] for rr, cc, _ in cells],
            "answers": answers,
        }
        pairs.append(QaPair(tokens, gold))
    order = rng.permutation(total)
    shuffled = [pairs[i] for i in order]
    return shuffled[:train], shuffled[train:]


def save_jsonl(pairs, path):
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps(p.to_json()) + "\n")


def load_jsonl(path):
    with open(path) as f:
        return [QaPair.from_json(json.loads(line)) for line in f if line.strip()]


def build_vocabulary(db, train_pairs, mode):
    """Vocabulary for one model variant.

    without_ne: headings, every table cell, and all training-question
    tokens. with_ne: entity surface forms are excluded everywhere.
    """
    tokens = []
    for heading in db.headings:
        tokens.extend(heading.split())
    for c in range(db.n_cols):
        if mode == "without_ne" or not db.is_ne[c]:
            tokens.extend(db.column(c))
    for p in train_pairs:
        for t in p.tokens:
            if mode == "without_ne" or not t.is_ne:
                tokens.append(t.text)
    return Vocabulary.build(tokens)


class QaModel:
    """Question encoder + retrieval assembly for one mode."""

    def __init__(self, mode, db, vocab, embed_size=20, hidden_size=20, rng=None,
                 table_attention="softmax"):
        if mode not in ("with_ne", "without_ne"):
            raise DataError(f"unknown mode {mode!r}")
        self.mode = mode
        self.db = db
        self.vocab = vocab
        self.embed_size = embed_size
        self.hidden_size = hidden_size
        self.params = ParamSet()
        self.embeddings = EmbeddingTable(self.params, "emb", vocab, embed_size, rng)
        self.rnn = RnnEncoder(self.params, "rnn", embed_size, hidden_size, rng)
        if mode == "with_ne":
            families = ("acc", "acr", "arr_ne")
            self.generator = NeGenerator(self.params, "gen", hidden_size, embed_size, rng)
        else:
            families = ("acc", "acr", "arr_non_ne")
            self.generator = None
        self.retriever = DbRetriever(
            self.params, "db", hidden_size, embed_size, rng,
            families=families, table_attention=table_attention,
        )
        self._heading_token_ids = [
            np.array([vocab.id(w) for w in h.split()]) for h in db.headings
        ]
        self._cell_ids = {
            c: np.array([vocab.id(v) for v in db.column(c)])
            for c in range(db.n_cols)
            if mode == "without_ne" or not db.is_ne[c]
        }
        self.ne_cols = set(db.ne_columns()) if mode == "with_ne" else set()

    def _embed_token(self, graph, text):
        return self.embeddings.embed_vector(graph, text)

    def _heading_embs(self, graph):
        return [
            graph.sum_rows(self.embeddings.embed_ids(graph, ids))
            for ids in self._heading_token_ids
        ]

    def _context(self, graph, ne_table):
        def cell_matrix_fn(g, c):
            return self.embeddings.embed_ids(g, self._cell_ids[c])

        return RetrievalContext(
            self.db, self._heading_embs(graph), self.ne_cols, cell_matrix_fn, ne_table
        )

    def encode(self, graph, pair):
        table = NeTable(self.embed_size) if self.mode == "with_ne" else None

        def hook(g, h, tok, pos):
            key = self.generator(g, h)
            table.insert(key, tok.text, tok.ne_type, context_id=f"q:{pos}")
            return key

        state, _, _ = rnn_encode(
            graph,
            self.rnn,
            pair.tokens,
            mode=self.mode,
            embed_fn=self._embed_token,
            ne_hook=hook if self.mode == "with_ne" else None,
        )
        return state, table

    def _gold(self, pair):
        g = pair.gold
        acr_mask = np.zeros(self.db.n_cols)
        acr_mask[g["acr"]] = 1.0
        acc_mask = np.zeros(self.db.n_cols)
        acc_mask[g["acc"]] = 1.0
        if self.mode == "with_ne":
            ne_values = {int(c): v for c, v in g["ne_values"].items()}
            non_ne_cols = []
            row_mask = None
        else:
            ne_values = {}
            non_ne_cols = list(g["acr"])
            row_mask = np.zeros(self.db.n_rows)
            row_mask[g["rows"]] = 1.0
        return RetrievalGold(
            acr_mask=acr_mask,
            acc_mask=acc_mask,
            ne_values=ne_values,
            non_ne_cols=non_ne_cols,
            non_ne_row_mask=row_mask,
        )

    def instance_loss(self, graph, pair):
        state, table = self.encode(graph, pair)
        ctx = self._context(graph, table)
        loss, _ = self.retriever.supervision_loss(graph, state, ctx, self._gold(pair))
        return loss

    def predict(self, pair):
        graph = Graph()
        state, table = self.encode(graph, pair)
        ctx = self._context(graph, table)
        result, metrics = self.retriever.evaluate_point(
            graph, state, ctx, self._gold(pair)
        )
        gold_cells = {(r, c) for r, c in pair.gold["cells"]}
        predicted = {(r, c) for r, c, _ in result.cells} if result else set()
        correct = result is not None and predicted == gold_cells
        return correct, metrics, result


def evaluate(model, pairs):
    """Cell-retrieval accuracy plus per-step attention accuracies (%)."""
    n = len(pairs)
    correct = 0
    step_totals = {"acc": 0, "acr": 0, "arr_ne": 0, "arr_non_ne": 0}
    step_counts = {"acc": 0, "acr": 0, "arr_ne": 0, "arr_non_ne": 0}
    for pair in pairs:
        ok, metrics, _ = model.predict(pair)
        correct += ok
        for key in ("acc", "acr", "arr_non_ne"):
            if key in metrics:
                step_counts[key] += 1
                step_totals[key] += bool(metrics[key])
        if "arr_ne" in metrics:
            for flag in metrics["arr_ne"].values():
                step_counts["arr_ne"] += 1
                step_totals["arr_ne"] += bool(flag)
    out = {"retrieval": 100.0 * correct / n}
    for key, count in step_counts.items():
        out[key] = 100.0 * step_totals[key] / count if count else None
    return out
