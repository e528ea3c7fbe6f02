"""Single-relation table plus the multiple-attention retrieval module.

Retrieval selects cells in three steps: pick the answer column(s) by
attention over column headings, pick the columns that represent rows by a
second heading attention, then select rows. Rows are selected two ways
and intersected: entity columns retrieve a verbatim value from the
instance's entity table and exact-match it down the column, while the
remaining columns form weighted row embeddings scored against a learned
key. The intersection of row sets crossed with the answer columns gives
the final cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, RetrievalError, ShapeError
from .ne_table import NeRetriever

NE_FLAG = "NE"
WORD_FLAG = "WORD"
SELECT_THRESHOLD = 0.5  # strictly-greater selection; an exact 0.5 is not selected


def canon(value):
    """Canonical surface form for exact matching: trimmed, case preserved."""
    return value.strip()


class DbTable:
    """Rectangular relation with named headings and per-column entity flags."""

    def __init__(self, headings, is_ne, rows):
        if len(headings) != len(set(headings)):
            raise DataError("column headings must be unique")
        if len(is_ne) != len(headings):
            raise DataError("one entity flag per column required")
        for r in rows:
            if len(r) != len(headings):
                raise DataError("table is not rectangular")
        self.headings = list(headings)
        self.is_ne = list(is_ne)
        self.rows = [list(r) for r in rows]

    @property
    def n_rows(self):
        return len(self.rows)

    @property
    def n_cols(self):
        return len(self.headings)

    def column_index(self, heading):
        try:
            return self.headings.index(heading)
        except ValueError:
            raise DataError(f"no column named {heading!r}") from None

    def column(self, c):
        return [r[c] for r in self.rows]

    def ne_columns(self):
        return [c for c, flag in enumerate(self.is_ne) if flag]

    def type_name(self, c):
        return self.headings[c].replace(" ", "_")

    def ne_type_of(self, token):
        """Membership rule: a token found in an entity column is an entity
        of that column's type; first matching column wins."""
        for c in self.ne_columns():
            if token in self._ne_value_sets()[c]:
                return self.type_name(c)
        return None

    def _ne_value_sets(self):
        cached = getattr(self, "_ne_sets", None)
        if cached is None:
            cached = {c: set(self.column(c)) for c in self.ne_columns()}
            self._ne_sets = cached
        return cached

    def exact_match_rows(self, c, value):
        """Row ids whose cell in column c equals `value` byte-for-byte."""
        v = canon(value)
        return [r for r in range(self.n_rows) if canon(self.rows[r][c]) == v]

    def filter_rows(self, constraints):
        """Declarative conjunctive filter; the brute-force oracle.

        constraints: {heading or column index: value}.
        """
        cols = {
            (k if isinstance(k, int) else self.column_index(k)): canon(v)
            for k, v in constraints.items()
        }
        return [
            r
            for r in range(self.n_rows)
            if all(canon(self.rows[r][c]) == v for c, v in cols.items())
        ]

    def project(self, row_ids, col_ids):
        """Cells at the intersection of the given rows and columns."""
        return sorted(
            (r, c, self.rows[r][c]) for r in row_ids for c in col_ids
        )

    # -- TSV round-trip -----------------------------------------------------

    def save_tsv(self, path):
        for r in self.rows:
            for v in r:
                if "\t" in v or "\n" in v:
                    raise DataError(f"cell value {v!r} cannot be stored in TSV")
        lines = ["\t".join(self.headings)]
        lines.append("\t".join(NE_FLAG if f else WORD_FLAG for f in self.is_ne))
        lines.extend("\t".join(r) for r in self.rows)
        with open(path, "w", newline="") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load_tsv(cls, path):
        with open(path, newline="") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 2:
            raise DataError(f"{path}: TSV needs a heading row and a flag row")
        headings = lines[0].split("\t")
        flags = lines[1].split("\t")
        if len(flags) != len(headings):
            raise DataError(f"{path}: flag row length mismatch")
        is_ne = []
        for fl in flags:
            if fl not in (NE_FLAG, WORD_FLAG):
                raise DataError(f"{path}: unknown column flag {fl!r}")
            is_ne.append(fl == NE_FLAG)
        rows = [line.split("\t") for line in lines[2:]]
        return cls(headings, is_ne, rows)


@dataclass
class RetrievalGold:
    """Supervision targets for one retrieval point."""

    acr_mask: np.ndarray
    acc_mask: np.ndarray | None = None
    ne_values: dict[int, str] = field(default_factory=dict)
    non_ne_cols: list[int] = field(default_factory=list)
    non_ne_row_mask: np.ndarray | None = None
    rows: list[int] = field(default_factory=list)
    cells: list[tuple[int, int]] | None = None


@dataclass
class RetrievalResult:
    answer_cols: list[int] | None
    row_rep_cols: list[int]
    ne_values: dict[int, str]
    ne_rows: dict[int, list[int]]
    non_ne_rows: list[int] | None
    rows: list[int]
    cells: list[tuple[int, int, str]]
    scores: dict = field(default_factory=dict)


class RetrievalContext:
    """Per-instance bundle: the table as one model variant sees it."""

    def __init__(self, table, heading_embs, ne_cols, cell_matrix_fn, ne_table=None):
        self.table = table
        self.heading_embs = heading_embs
        self.ne_cols = set(ne_cols)
        self._cell_matrix_fn = cell_matrix_fn
        self.ne_table = ne_table
        self._cell_cache = {}
        self._heading_cache = {}

    def cell_matrix(self, graph, c):
        key = (id(graph), c)
        if key not in self._cell_cache:
            self._cell_cache[key] = self._cell_matrix_fn(graph, c)
        return self._cell_cache[key]

    def heading_matrix(self, graph):
        key = id(graph)
        if key not in self._heading_cache:
            self._heading_cache[key] = graph.stack(self.heading_embs)
        return self._heading_cache[key]


def finalize(row_sets, answer_cols, table):
    """Intersect the computed row sets and cross with the answer columns."""
    if not row_sets:
        raise RetrievalError("no row representation was computed")
    rows = set(row_sets[0])
    for s in row_sets[1:]:
        rows &= set(s)
    rows = sorted(rows)
    cells = table.project(rows, sorted(answer_cols)) if answer_cols is not None else []
    return rows, cells


def mechanical_retrieve(table, acr_cols, ne_values, non_ne_rows, answer_cols):
    """Run the selection plumbing with attention outcomes supplied directly.

    Bypasses every learned component: entity columns exact-match their
    given values, the non-entity row set is taken as given, and the result
    is the usual intersection crossed with the answer columns.
    """
    row_sets = []
    ne_rows = {}
    for c in acr_cols:
        if c in ne_values:
            matched = table.exact_match_rows(c, ne_values[c])
            ne_rows[c] = matched
            row_sets.append(matched)
    if non_ne_rows is not None:
        row_sets.append(list(non_ne_rows))
    rows, cells = finalize(row_sets, answer_cols, table)
    return RetrievalResult(
        answer_cols=sorted(answer_cols) if answer_cols is not None else None,
        row_rep_cols=sorted(acr_cols),
        ne_values=dict(ne_values),
        ne_rows=ne_rows,
        non_ne_rows=sorted(non_ne_rows) if non_ne_rows is not None else None,
        rows=rows,
        cells=cells,
    )


class DbRetriever:
    """Learned key generators for the three attention steps.

    A shared trunk maps the task state to a hidden vector; each key family
    is a one-hidden-layer MLP on top. Column-key families condition on the
    column's heading embedding so one module serves any number of columns.
    """

    def __init__(
        self,
        params,
        name,
        state_size,
        embed_size,
        rng,
        families=("acc", "acr", "arr_ne", "arr_non_ne"),
        table_attention="softmax",
    ):
        self.state_size = state_size
        self.embed_size = embed_size
        self.families = tuple(families)
        d = embed_size
        self.trunk_w = params.add(f"{name}.trunk_w", (d, state_size), rng)
        self.trunk_b = params.zeros(f"{name}.trunk_b", (d,))
        self._col_mlps = {}
        for fam in ("acc", "acr"):
            if fam in self.families:
                self._col_mlps[fam] = self._make_mlp(params, f"{name}.{fam}", 2 * d, d, rng)
        if "arr_non_ne" in self.families:
            self._row_mlp = self._make_mlp(params, f"{name}.arr_non_ne", d, d, rng)
        if "arr_ne" in self.families:
            self.ne_retriever = NeRetriever(
                params, f"{name}.arr_ne", 2 * d, d, rng, attention=table_attention
            )

    @staticmethod
    def _make_mlp(params, name, in_size, out_size, rng):
        return {
            "w1": params.add(f"{name}.w1", (out_size, in_size), rng),
            "b1": params.zeros(f"{name}.b1", (out_size,)),
            "w2": params.add(f"{name}.w2", (out_size, out_size), rng),
            "b2": params.zeros(f"{name}.b2", (out_size,)),
        }

    @staticmethod
    def _mlp(graph, mlp, x):
        hidden = graph.tanh(graph.affine(mlp["w1"], x, mlp["b1"]))
        return graph.affine(mlp["w2"], hidden, mlp["b2"])

    def trunk(self, graph, state):
        if state.shape != (self.state_size,):
            raise ShapeError(
                f"retriever state has shape {state.shape}, expected ({self.state_size},)"
            )
        return graph.tanh(graph.affine(self.trunk_w, state, self.trunk_b))

    def column_scores(self, graph, family, trunk_out, ctx):
        """Per-column sigmoid scores: dot(key_c, heading_emb_c).

        One key per column, generated from the trunk output conditioned on
        that column's heading embedding; all columns run as one matrix op.
        """
        mlp = self._col_mlps[family]
        headings = ctx.heading_matrix(graph)
        n = len(ctx.heading_embs)
        inputs = graph.hconcat(graph.repeat_row(trunk_out, n), headings)
        hidden = graph.tanh(
            graph.add_rowvec(graph.matmat(inputs, graph.transpose(mlp["w1"])), mlp["b1"])
        )
        keys = graph.add_rowvec(
            graph.matmat(hidden, graph.transpose(mlp["w2"])), mlp["b2"]
        )
        return graph.sigmoid(graph.rowdot(keys, headings))

    def non_ne_row_scores(self, graph, trunk_out, ctx, acr_scores, cols):
        """Sigmoid row scores from weighted cell-embedding sums."""
        if not cols:
            raise RetrievalError("no row representation: no non-entity columns")
        parts = []
        for c in cols:
            weight = graph.index(acr_scores, c)
            parts.append(graph.scale(ctx.cell_matrix(graph, c), weight))
        row_mat = parts[0] if len(parts) == 1 else graph.add_n(parts)
        key = self._mlp(graph, self._row_mlp, trunk_out)
        return graph.sigmoid(graph.matvec(row_mat, key))

    def ne_query_state(self, graph, trunk_out, ctx, c):
        return graph.concat([trunk_out, ctx.heading_embs[c]])

    def retrieve_ne_value(self, graph, trunk_out, ctx, c):
        """Retrieve one value from the entity table for column c."""
        if ctx.ne_table is None or len(ctx.ne_table) == 0:
            raise RetrievalError("entity table is empty at a retrieval step")
        state = self.ne_query_state(graph, trunk_out, ctx, c)
        _, value = self.ne_retriever.retrieve(graph, ctx.ne_table, state, mode="infer")
        return value

    # -- training ------------------------------------------------------------

    def supervision_loss(self, graph, state, ctx, gold):
        """Sum of per-step cross-entropies; returns (loss, per-step dict)."""
        trunk_out = self.trunk(graph, state)
        terms = []
        parts = {}
        acr_scores = self.column_scores(graph, "acr", trunk_out, ctx)
        if gold.acr_mask.shape != acr_scores.shape:
            raise ShapeError(
                f"acr mask length {gold.acr_mask.shape} vs {acr_scores.shape}"
            )
        terms.append(graph.cross_entropy(acr_scores, gold.acr_mask, kind="sigmoid"))
        parts["acr"] = terms[-1]
        if gold.acc_mask is not None:
            acc_scores = self.column_scores(graph, "acc", trunk_out, ctx)
            terms.append(graph.cross_entropy(acc_scores, gold.acc_mask, kind="sigmoid"))
            parts["acc"] = terms[-1]
        for c, value in sorted(gold.ne_values.items()):
            q_state = self.ne_query_state(graph, trunk_out, ctx, c)
            terms.append(self.ne_retriever.loss(graph, ctx.ne_table, q_state, value))
            parts[f"arr_ne:{c}"] = terms[-1]
        if gold.non_ne_cols:
            row_scores = self.non_ne_row_scores(
                graph, trunk_out, ctx, acr_scores, gold.non_ne_cols
            )
            terms.append(
                graph.cross_entropy(row_scores, gold.non_ne_row_mask, kind="sigmoid")
            )
            parts["arr_non_ne"] = terms[-1]
        loss = terms[0] if len(terms) == 1 else graph.add_n(terms)
        return loss, parts

    # -- inference -------------------------------------------------------------

    def infer(self, graph, state, ctx, use_acc=True):
        """Full thresholded 3-step retrieval."""
        trunk_out = self.trunk(graph, state)
        scores = {}
        answer_cols = None
        if use_acc and "acc" in self.families:
            acc_scores = self.column_scores(graph, "acc", trunk_out, ctx)
            scores["acc"] = acc_scores.data.copy()
            answer_cols = [
                c for c, s in enumerate(acc_scores.data) if s > SELECT_THRESHOLD
            ]
        acr_scores = self.column_scores(graph, "acr", trunk_out, ctx)
        scores["acr"] = acr_scores.data.copy()
        selected = [c for c, s in enumerate(acr_scores.data) if s > SELECT_THRESHOLD]
        if not selected:
            raise RetrievalError("no row representation: nothing selected")
        ne_sel = [c for c in selected if c in ctx.ne_cols and "arr_ne" in self.families]
        non_ne_sel = [
            c
            for c in selected
            if c not in ctx.ne_cols and "arr_non_ne" in self.families
        ]
        row_sets = []
        ne_values = {}
        ne_rows = {}
        for c in ne_sel:
            value = self.retrieve_ne_value(graph, trunk_out, ctx, c)
            ne_values[c] = value
            matched = ctx.table.exact_match_rows(c, value)
            ne_rows[c] = matched
            row_sets.append(matched)
        non_ne_rows = None
        if non_ne_sel:
            row_scores = self.non_ne_row_scores(
                graph, trunk_out, ctx, acr_scores, non_ne_sel
            )
            scores["arr_non_ne"] = row_scores.data.copy()
            non_ne_rows = [
                r for r, s in enumerate(row_scores.data) if s > SELECT_THRESHOLD
            ]
            row_sets.append(non_ne_rows)
        rows, cells = finalize(row_sets, answer_cols, ctx.table)
        return RetrievalResult(
            answer_cols=answer_cols,
            row_rep_cols=selected,
            ne_values=ne_values,
            ne_rows=ne_rows,
            non_ne_rows=non_ne_rows,
            rows=rows,
            cells=cells,
            scores=scores,
        )

    def evaluate_point(self, graph, state, ctx, gold, use_acc=True):
        """Inference plus per-step correctness against the gold targets.

        Returns (result, metrics): `result` is None when the predicted
        pipeline could not produce a row set (counted as a retrieval
        failure, not a crash). Row-level step metrics are judged under
        gold column routing so they stay defined even when the column
        attention mis-selected.
        """
        trunk_out = self.trunk(graph, state)
        metrics = {}
        scores = {}
        answer_cols = None
        if use_acc and "acc" in self.families:
            acc_scores = self.column_scores(graph, "acc", trunk_out, ctx)
            scores["acc"] = acc_scores.data.copy()
            answer_cols = [
                c for c, s in enumerate(acc_scores.data) if s > SELECT_THRESHOLD
            ]
            if gold.acc_mask is not None:
                metrics["acc"] = answer_cols == [
                    c for c, m in enumerate(gold.acc_mask) if m > 0.5
                ]
        acr_scores = self.column_scores(graph, "acr", trunk_out, ctx)
        scores["acr"] = acr_scores.data.copy()
        selected = [c for c, s in enumerate(acr_scores.data) if s > SELECT_THRESHOLD]
        metrics["acr"] = selected == [
            c for c, m in enumerate(gold.acr_mask) if m > 0.5
        ]

        ne_value_memo = {}

        def value_of(c):
            if c not in ne_value_memo:
                try:
                    ne_value_memo[c] = self.retrieve_ne_value(graph, trunk_out, ctx, c)
                except RetrievalError:
                    ne_value_memo[c] = None
            return ne_value_memo[c]

        row_memo = {}

        def rows_for(cols):
            key = tuple(cols)
            if key not in row_memo:
                row_scores = self.non_ne_row_scores(
                    graph, trunk_out, ctx, acr_scores, list(cols)
                )
                row_memo[key] = [
                    r for r, s in enumerate(row_scores.data) if s > SELECT_THRESHOLD
                ]
            return row_memo[key]

        if gold.ne_values:
            metrics["arr_ne"] = {
                c: value_of(c) == v for c, v in sorted(gold.ne_values.items())
            }
        if gold.non_ne_cols and "arr_non_ne" in self.families:
            gold_rows = [
                r for r, m in enumerate(gold.non_ne_row_mask) if m > 0.5
            ]
            metrics["arr_non_ne"] = rows_for(tuple(gold.non_ne_cols)) == gold_rows

        # predicted pipeline
        result = None
        ne_sel = [c for c in selected if c in ctx.ne_cols and "arr_ne" in self.families]
        non_ne_sel = [
            c for c in selected if c not in ctx.ne_cols and "arr_non_ne" in self.families
        ]
        row_sets = []
        ne_values = {}
        ne_rows = {}
        failed = False
        for c in ne_sel:
            v = value_of(c)
            if v is None:
                failed = True
                break
            ne_values[c] = v
            matched = ctx.table.exact_match_rows(c, v)
            ne_rows[c] = matched
            row_sets.append(matched)
        non_ne_rows = None
        if not failed and non_ne_sel:
            non_ne_rows = rows_for(tuple(non_ne_sel))
            row_sets.append(non_ne_rows)
        if not failed and row_sets:
            rows, cells = finalize(row_sets, answer_cols, ctx.table)
            result = RetrievalResult(
                answer_cols=answer_cols,
                row_rep_cols=selected,
                ne_values=ne_values,
                ne_rows=ne_rows,
                non_ne_rows=non_ne_rows,
                rows=rows,
                cells=cells,
                scores=scores,
            )
        return result, metrics
