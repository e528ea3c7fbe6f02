import numpy as np
import pytest

from netable.autodiff import Graph, ParamSet, constant
from netable.errors import ContractError
from netable.memory import (
    MemoryBank,
    answer_from_table,
    candidate_loss,
    hop,
    predict_candidate,
    run_hops,
    score_candidates,
)
from netable.ne_table import NeRetriever, NeTable

DIM = 5


@pytest.fixture
def rng():
    return np.random.default_rng(17)


def test_single_slot_gets_full_weight(rng):
    bank = MemoryBank([constant(rng.normal(size=DIM))], ["s0"])
    g = Graph()
    state = constant(rng.normal(size=DIM))
    new_state, w = hop(g, state, bank)
    assert w.data.shape == (1,)
    assert w.data[0] == pytest.approx(1.0)
    np.testing.assert_allclose(new_state.data, state.data + bank.slots[0].data)


def test_empty_memory_passes_state_through(rng):
    g = Graph()
    state = constant(rng.normal(size=DIM))
    new_state, w = hop(g, state, MemoryBank())
    assert new_state is state and w is None
    out, weights = run_hops(g, state, MemoryBank(), k=3)
    assert out is state and weights == []


def test_aligned_slot_wins_attention(rng):
    slots = []
    for i in range(4):
        v = np.zeros(DIM)
        v[i] = 1.5
        slots.append(constant(v))
    bank = MemoryBank(slots, [f"s{i}" for i in range(4)])
    state = np.zeros(DIM)
    state[2] = 1.0
    g = Graph()
    _, w = hop(g, constant(state), bank)
    assert int(np.argmax(w.data)) == 2
    assert abs(w.data.sum() - 1.0) < 1e-12


def test_hop_output_size_independent_of_memory_length(rng):
    g = Graph()
    state = constant(rng.normal(size=DIM))
    for n in (1, 4, 9):
        bank = MemoryBank([constant(rng.normal(size=DIM)) for _ in range(n)])
        out, _ = hop(g, state, bank)
        assert out.shape == (DIM,)


def test_run_hops_k3(rng):
    bank = MemoryBank([constant(rng.normal(size=DIM)) for _ in range(6)])
    g = Graph()
    out, weights = run_hops(g, constant(rng.normal(size=DIM)), bank, k=3)
    assert len(weights) == 3
    for w in weights:
        assert abs(w.data.sum() - 1.0) < 1e-12


def test_candidate_scoring_alignment(rng):
    cands = []
    for i in range(5):
        v = np.zeros(DIM)
        v[i] = 1.0
        cands.append(constant(v))
    state = constant(cands[3].data * 4.0)
    g = Graph()
    pick, probs = predict_candidate(g, state, cands)
    assert probs.shape == (5,)
    # equal-norm orthogonal candidates: the aligned one wins
    assert pick == 3


def test_candidate_loss_decreases_for_matching_state(rng):
    cands = [constant(rng.normal(size=DIM)) for _ in range(4)]
    g = Graph()
    good = candidate_loss(g, constant(cands[1].data * 3), cands, 1)
    bad = candidate_loss(g, constant(cands[2].data * 3), cands, 1)
    assert float(good.data) < float(bad.data)


def test_empty_candidate_set_rejected(rng):
    with pytest.raises(ContractError):
        score_candidates(Graph(), constant(np.zeros(DIM)), [])


def test_answer_from_table_value_level(rng):
    ps = ParamSet()
    ret = NeRetriever(ps, "ret", DIM, DIM, rng)
    table = NeTable(DIM)
    for i, v in enumerate(["Enrico", "Maria", "Enrico"]):
        key = np.zeros(DIM)
        key[i] = 1.0
        table.insert(constant(key), v)
    g = Graph()
    value, masked = answer_from_table(g, constant(rng.normal(size=DIM)), ret, table)
    assert value in {"Enrico", "Maria"}
    assert masked == value


def test_answer_from_table_candidate_mask(rng):
    ps = ParamSet()
    ret = NeRetriever(ps, "ret", DIM, DIM, rng)
    table = NeTable(DIM)
    for i, v in enumerate(["a", "b", "c"]):
        key = np.zeros(DIM)
        key[i] = 1.0
        table.insert(constant(key), v)
    g = Graph()
    state = constant(rng.normal(size=DIM))
    value, masked = answer_from_table(g, state, ret, table, candidate_values={"b"})
    assert masked == "b"
