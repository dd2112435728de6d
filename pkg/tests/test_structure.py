import itertools
import math

import numpy as np
import pytest

from bncausal.bn import BayesNet, Dag, fit_mle, log_likelihood, sample
from bncausal.data import NodeTable, VariableMeta
from bncausal.errors import ArityMismatch
from bncausal.structure import (
    ScoreCache,
    SearchTrace,
    TabuConfig,
    free_parameters,
    is_acyclic,
    parse_arc,
    score,
    tabu_search,
    to_dot,
)

from conftest import acyclic_by_permutation, all_dags, binary_nodes, brute_force_score, random_table


def _copy_table(n):
    rng = np.random.default_rng(1)
    x = rng.integers(0, 2, n)
    return NodeTable(np.column_stack([x, x]), binary_nodes(2))


def test_aic_single_node():
    t = NodeTable(np.array([[0], [0], [0], [1]]), binary_nodes(1))
    expect = 3 * math.log(3 / 4) + math.log(1 / 4) - 1
    assert score(Dag.empty(t.nodes), t, "aic") == pytest.approx(expect, abs=1e-12)
    assert score(Dag.empty(t.nodes), t, "bic") == pytest.approx(expect + 1 - 0.5 * math.log(4), abs=1e-12)


def test_unknown_score_kind():
    t = _copy_table(10)
    with pytest.raises(ValueError):
        score(Dag.empty(t.nodes), t, "mdl")


def test_copy_data_one_arc_beats_empty():
    t = _copy_table(100)
    s = {arcs: score(Dag.from_arcs(t.nodes, arcs), t, "bic") for arcs in all_dags(2)}
    assert s[((0, 1),)] > s[()]
    assert s[((1, 0),)] > s[()]
    assert s[((0, 1),)] == pytest.approx(s[((1, 0),)], abs=1e-9)


def test_copy_data_tabu_picks_lexicographic_orientation():
    t = _copy_table(100)
    dag = tabu_search(t, "bic")
    assert dag.arcs() == [(0, 1)]


@pytest.mark.parametrize("seed", range(10))
def test_reversal_is_score_equivalent(seed):
    rng = np.random.default_rng(seed)
    t = random_table(rng, 50, (int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    for kind in ("aic", "bic"):
        a = score(Dag.from_arcs(t.nodes, [(0, 1)]), t, kind)
        b = score(Dag.from_arcs(t.nodes, [(1, 0)]), t, kind)
        assert a == pytest.approx(b, abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_score_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    ar = tuple(int(a) for a in rng.integers(2, 4, 3))
    t = random_table(rng, 120, ar)
    for arcs in all_dags(3):
        dag = Dag.from_arcs(t.nodes, arcs)
        for kind in ("aic", "bic"):
            assert score(dag, t, kind) == pytest.approx(brute_force_score(t.codes, ar, arcs, kind), abs=1e-8)


def test_unobserved_rows_count_in_penalty():
    # X takes 3 levels but only two appear; the CPT of T | X still has 3 rows
    nodes = (VariableMeta.binary("T"), VariableMeta.numbered("X", 3))
    t = NodeTable(np.array([[0, 0], [1, 0], [1, 1], [1, 1]]), nodes)
    dag = Dag.from_arcs(nodes, [(1, 0)])
    assert free_parameters(dag) == 3 + 2
    # T|X=0 has counts (1,1), T|X=1 has (0,2), X marginal (2,2,0)
    ll = 2 * math.log(0.5) + 0.0 + 4 * math.log(0.5)
    assert score(dag, t, "aic") == pytest.approx(ll - 5, abs=1e-12)


def test_score_equals_mle_loglik_minus_penalty():
    rng = np.random.default_rng(4)
    t = random_table(rng, 300, (2, 3, 2, 2))
    dag = Dag.from_arcs(t.nodes, [(0, 1), (1, 2), (0, 3)])
    ll = log_likelihood(fit_mle(dag, t), t).value
    k = free_parameters(dag)
    assert score(dag, t, "aic") == pytest.approx(ll - k, abs=1e-8)
    assert score(dag, t, "bic") == pytest.approx(ll - 0.5 * k * math.log(300), abs=1e-8)


def test_score_arity_mismatch():
    rng = np.random.default_rng(0)
    t = random_table(rng, 20, (2, 2))
    other = random_table(rng, 20, (2, 3))
    with pytest.raises(ArityMismatch):
        score(Dag.empty(other.nodes), t)


def test_decomposability():
    rng = np.random.default_rng(8)
    t = random_table(rng, 200, (2, 3, 2, 2))
    cache = ScoreCache(t, "bic")
    dag = Dag.from_arcs(t.nodes, [(0, 1), (1, 2)])
    total = score(dag, t, "bic")
    assert total == pytest.approx(sum(cache.local(l, dag.parents[l]) for l in range(4)), abs=1e-10)
    dag2 = Dag.from_arcs(t.nodes, [(0, 1), (1, 2), (0, 3)])
    delta = score(dag2, t, "bic") - total
    assert delta == pytest.approx(cache.local(3, (0,)) - cache.local(3, ()), abs=1e-10)


def test_independent_columns_give_empty_dag():
    rng = np.random.default_rng(12)
    t = random_table(rng, 20_000, (2, 3, 2))
    s = {arcs: score(Dag.from_arcs(t.nodes, arcs), t, "bic") for arcs in all_dags(3)}
    assert max(s, key=s.get) == ()
    assert tabu_search(t, "bic").arcs() == []


def _four_node_bn():
    nodes = binary_nodes(4)
    dag = Dag.from_arcs(nodes, [(0, 1), (0, 2), (1, 3), (2, 3)])
    tabs = [
        [0.4, 0.6],
        [[0.8, 0.2], [0.25, 0.75]],
        [[0.3, 0.7], [0.85, 0.15]],
        [[0.9, 0.1], [0.4, 0.6], [0.5, 0.5], [0.1, 0.9]],
    ]
    return BayesNet.from_tables(dag, tabs)


def _skeleton(arcs):
    return {frozenset(a) for a in arcs}


def test_recovers_four_node_net():
    bn = _four_node_bn()
    t = sample(bn, 50_000, seed=99)
    learned = tabu_search(t, "bic")
    s_true = score(bn.dag, t, "bic")
    assert score(learned, t, "bic") >= s_true - 1e-9
    assert _skeleton(learned.arcs()) == _skeleton(bn.dag.arcs())
    # exhaustive oracle: the learned structure attains the global optimum
    best = max(score(Dag.from_arcs(t.nodes, a), t, "bic") for a in all_dags(4))
    assert score(learned, t, "bic") == pytest.approx(best, abs=1e-9)


def test_is_acyclic():
    assert is_acyclic([(), (), ()])
    assert not is_acyclic([(1,), (0,)])
    assert is_acyclic(Dag.empty(binary_nodes(3)))
    assert not is_acyclic({0: [2], 1: [0], 2: [1]})


@pytest.mark.parametrize("seed", range(30))
def test_back_arc_creates_cycle(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 7))
    order = rng.permutation(m)
    parents = [set() for _ in range(m)]
    for i, j in itertools.combinations(range(m), 2):
        if rng.random() < 0.5:
            parents[order[j]].add(int(order[i]))
    # make sure a path first -> last exists along the order, then close it
    for i in range(m - 1):
        parents[order[i + 1]].add(int(order[i]))
    assert is_acyclic(parents)
    parents[order[0]].add(int(order[-1]))
    arcs = [(p, c) for c, ps in enumerate(parents) for p in ps]
    assert not acyclic_by_permutation(m, arcs)
    assert not is_acyclic(parents)


def test_search_monotone_and_deterministic():
    rng = np.random.default_rng(5)
    t = random_table(rng, 300, (2, 3, 2, 2, 2))
    tr = SearchTrace()
    d1 = tabu_search(t, "aic", TabuConfig(tabu_len=5), trace=tr)
    assert tr.best == sorted(tr.best)
    assert all(b >= c - 1e-12 for b, c in zip(tr.best, tr.current))
    d2 = tabu_search(t, "aic", TabuConfig(tabu_len=5))
    assert d1 == d2
    assert score(d1, t, "aic") == pytest.approx(tr.best[-1], abs=1e-9)


def test_constraints_respected():
    bn = _four_node_bn()
    t = sample(bn, 5000, seed=3)
    cfg = TabuConfig(forbidden={(0, 1), (1, 0)}, required={(3, 2)})
    d = tabu_search(t, "bic", cfg)
    assert (0, 1) not in d.arcs() and (1, 0) not in d.arcs()
    assert (3, 2) in d.arcs()
    with pytest.raises(ValueError):
        TabuConfig(tabu_len=0)
    with pytest.raises(ValueError):
        TabuConfig(forbidden={(0, 1)}, required={(0, 1)})


def test_max_iter_caps_moves():
    bn = _four_node_bn()
    t = sample(bn, 5000, seed=3)
    tr = SearchTrace()
    tabu_search(t, "bic", TabuConfig(max_iter=2), trace=tr)
    assert len(tr.moves) <= 2


def _random_bn(rng, m):
    nodes = binary_nodes(m)
    dags = all_dags(m)
    dag = Dag.from_arcs(nodes, dags[int(rng.integers(len(dags)))])
    tabs = []
    for l in range(m):
        q = 2 ** len(dag.parents[l])
        p = rng.uniform(0.05, 0.95, q)
        tabs.append(np.column_stack([1 - p, p]))
    return BayesNet.from_tables(dag, tabs)


def test_tabu_reaches_exhaustive_optimum_mostly():
    rng = np.random.default_rng(2024)
    dags4 = all_dags(4)
    hits = 0
    trials = 40
    for _ in range(trials):
        bn = _random_bn(rng, 4)
        t = sample(bn, int(rng.integers(100, 2000)), seed=int(rng.integers(1 << 30)))
        kind = "aic" if rng.random() < 0.5 else "bic"
        cache = ScoreCache(t, kind)
        best = max(cache.total(Dag.from_arcs(t.nodes, a).parents) for a in dags4)
        got = cache.total(tabu_search(t, kind, cache=cache).parents)
        hits += got >= best - 1e-9
    assert hits / trials >= 0.95


def test_dot_and_arc_parsing():
    d = Dag.from_arcs(binary_nodes(3), [(0, 2), (1, 2)])
    dot = to_dot(d)
    assert '"V0" -> "V2";' in dot and '"V1" -> "V2";' in dot
    assert parse_arc("V1->V2", d.names) == (1, 2)
    with pytest.raises(ValueError):
        parse_arc("V1-V2", d.names)
    with pytest.raises(ValueError):
        parse_arc("V1->Q", d.names)
