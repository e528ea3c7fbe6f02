"""End-to-end memory over encoded slots: attention reads and a residual
state update per hop, plus candidate scoring and the cloze answer head."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class MemoryBank:
    """Encoded slots plus provenance (turn index or window occurrence id)."""

    def __init__(self, slots=None, provenance=None):
        self.slots = list(slots or [])
        self.provenance = list(provenance or [])
        if self.provenance and len(self.provenance) != len(self.slots):
            raise ContractError("one provenance record per slot required")

    def append(self, slot, provenance=None):
        self.slots.append(slot)
        self.provenance.append(provenance)

    def __len__(self):
        return len(self.slots)


def hop(graph, state, bank, slot_matrix=None):
    """One attention read: softmax(dot(state, slot_i)) -> residual update.

    An empty memory passes the state through unchanged. Returns the new
    state and the attention weights (None when memory is empty).
    """
    if len(bank) == 0:
        return state, None
    slots = slot_matrix if slot_matrix is not None else graph.stack(bank.slots)
    weights = graph.softmax(graph.matvec(slots, state))
    read = graph.weighted_sum(weights, slots)
    return graph.add(state, read), weights


def run_hops(graph, state, bank, k):
    """k rounds of hop(); the slot matrix is built once and shared."""
    if len(bank) == 0:
        return state, []
    slots = graph.stack(bank.slots)
    weights_per_hop = []
    for _ in range(k):
        state, w = hop(graph, state, bank, slot_matrix=slots)
        weights_per_hop.append(w)
    return state, weights_per_hop


def score_candidates(graph, state, candidate_encodings):
    """Softmax over dot(state, candidate encoding)."""
    if not candidate_encodings:
        raise ContractError("candidate set is empty")
    if len(candidate_encodings) == 1:
        scores = graph.vec1(graph.dot(state, candidate_encodings[0]))
    else:
        scores = graph.matvec(graph.stack(candidate_encodings), state)
    return graph.softmax(scores)


def candidate_loss(graph, state, candidate_encodings, gold_index):
    probs = score_candidates(graph, state, candidate_encodings)
    return graph.cross_entropy(probs, gold_index, kind="softmax")


def predict_candidate(graph, state, candidate_encodings):
    probs = score_candidates(graph, state, candidate_encodings)
    return int(np.argmax(probs.data)), probs.data.copy()


def answer_from_table(graph, state, retriever, table, candidate_values=None):
    """Cloze answer via retrieval over the story's entity table.

    Returns (value, masked_value): the argmax entry's value over all
    entries, and the argmax restricted to entries whose value is in the
    candidate set (None restriction keeps them identical).
    """
    attn, value = retriever.retrieve(graph, table, state, mode="infer")
    masked_value = value
    if candidate_values is not None:
        allowed = set(candidate_values)
        best, best_score = None, -np.inf
        for score, entry in zip(attn, table.entries):
            if entry.value in allowed and score > best_score:
                best, best_score = entry.value, score
        if best is not None:
            masked_value = best
    return value, masked_value
