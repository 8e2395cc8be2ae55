import json

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from mfdiff import graph
from mfdiff.graph import (
    DirectedGraph,
    EmptyEdgeSetError,
    GraphGenSpec,
    GraphSpecError,
    degree_distribution,
    generate,
    sample_edge,
)


def test_chain_construction():
    g = generate(GraphGenSpec("chain", 4))
    assert g.edge_count == 3
    assert set(map(tuple, g.edges.tolist())) == {(1, 0), (2, 1), (3, 2)}
    assert g.in_degrees[0] == 0


def test_tree_construction():
    g = generate(GraphGenSpec("tree", 7, tree_branching=2))
    assert g.edge_count == 6
    # node i listens to its parent (i-1)//2
    assert (3, 1) in set(map(tuple, g.edges.tolist()))
    assert g.in_degrees[0] == 0 and g.out_degrees[0] == 2


def test_ba_is_tree():
    g = generate(GraphGenSpec("ba", 50, seed=3))
    assert g.edge_count == 49
    # weak connectivity over the undirected version
    adj = [[] for _ in range(50)]
    for i, j in g.edges.tolist():
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    assert len(seen) == 50  # 50 nodes, 49 edges, connected => tree (acyclic)


def test_powerlaw_degrees_within_clip():
    g = generate(GraphGenSpec("powerlaw", 400, gamma=2.7, edge_clip=10, seed=1))
    out = g.out_degrees
    assert out.min() >= 1 and out.max() <= 10


def test_powerlaw_exponent_mle():
    # independent oracle: truncated discrete power-law MLE on the out-degrees
    g = generate(GraphGenSpec("powerlaw", 100000, gamma=2.7, edge_clip=50, seed=0))
    sample = g.out_degrees.astype(float)
    support = np.arange(1, 51, dtype=float)
    log_support = np.log(support)
    sum_log = np.log(sample).sum()
    n = len(sample)

    def nll(gam):
        z = np.exp(-gam * log_support).sum()
        return gam * sum_log + n * np.log(z)

    res = minimize_scalar(nll, bounds=(1.05, 10.0), method="bounded")
    assert 2.5 <= res.x <= 2.9


def test_er_mean_degrees():
    g = generate(GraphGenSpec("er", 200, er_p=0.05, seed=2))
    assert g.in_degrees.sum() == g.edge_count
    assert g.out_degrees.sum() == g.edge_count
    assert abs(g.in_degrees.mean() - g.edge_count / 200) < 1e-12


def test_generate_deterministic():
    spec = GraphGenSpec("powerlaw", 300, seed=11)
    g1, g2 = generate(spec), generate(spec)
    assert np.array_equal(g1.edges, g2.edges)


def test_generator_invariants_random_specs():
    rng = np.random.default_rng(5)
    for _ in range(25):
        model = str(rng.choice(["powerlaw", "ba", "er", "chain", "tree"]))
        n = int(rng.integers(1, 60))
        spec = GraphGenSpec(model, n, gamma=float(rng.uniform(1.5, 4.0)),
                            edge_clip=int(rng.integers(1, 20)),
                            er_p=float(rng.uniform(0, 0.3)),
                            tree_branching=int(rng.integers(1, 4)),
                            seed=int(rng.integers(1000)))
        generate(spec)  # constructor enforces the invariants


def test_invalid_specs():
    with pytest.raises(GraphSpecError):
        GraphGenSpec("powerlaw", 0)
    with pytest.raises(GraphSpecError):
        GraphGenSpec("powerlaw", 10, gamma=1.0)
    with pytest.raises(GraphSpecError):
        GraphGenSpec("er", 10, er_p=1.5)
    with pytest.raises(GraphSpecError):
        GraphGenSpec("nope", 10)


def test_graph_validation():
    with pytest.raises(GraphSpecError):
        DirectedGraph(3, np.array([[0, 0]]))  # self loop
    with pytest.raises(GraphSpecError):
        DirectedGraph(3, np.array([[0, 1], [0, 1]]))  # duplicate
    with pytest.raises(GraphSpecError):
        DirectedGraph(3, np.array([[0, 7]]))  # out of range


def test_degree_distribution_chain():
    q = degree_distribution(generate(GraphGenSpec("chain", 4)))
    assert q.entries == {(0, 1): 0.25, (1, 1): 0.5, (1, 0): 0.25}


def test_degree_distribution_empty():
    q = degree_distribution(DirectedGraph(5, np.zeros((0, 2), dtype=int)))
    assert q.entries == {(0, 0): 1.0}


def test_degree_distribution_sums_and_means():
    g = generate(GraphGenSpec("powerlaw", 500, seed=9))
    q = degree_distribution(g)
    assert abs(sum(q.entries.values()) - 1.0) <= 1e-12
    # both degree means equal |E| / n, exact as integer counts
    assert g.in_degrees.sum() == g.edge_count == g.out_degrees.sum()
    assert abs(q.mean_in_degree - g.edge_count / 500) < 1e-12
    assert abs(q.total_edge_weight - g.edge_count / 500) < 1e-12


def test_conditional_in_given_out():
    q = degree_distribution(generate(GraphGenSpec("powerlaw", 300, seed=4)))
    for m in q.out_marginal:
        cond = q.conditional_in_given_out(m)
        assert abs(sum(cond.values()) - 1.0) < 1e-12


def test_sample_edge_single():
    g = DirectedGraph(2, np.array([[1, 0]]))
    rng = np.random.default_rng(0)
    assert sample_edge(g, rng) == (1, 0)


def test_sample_edge_uniform():
    g = generate(GraphGenSpec("chain", 4))
    rng = np.random.default_rng(123)
    hits = np.zeros(3)
    for _ in range(30000):
        listener, _ = sample_edge(g, rng)
        hits[listener - 1] += 1
    freqs = hits / 30000
    assert np.all(np.abs(freqs - 1 / 3) <= 0.01)


def test_sample_edge_deterministic():
    g = generate(GraphGenSpec("powerlaw", 50, seed=8))
    rng1, rng2 = np.random.default_rng(42), np.random.default_rng(42)
    assert [sample_edge(g, rng1) for _ in range(20)] == [sample_edge(g, rng2) for _ in range(20)]


def test_empty_edge_sample_raises():
    g = DirectedGraph(3, np.zeros((0, 2), dtype=int))
    with pytest.raises(EmptyEdgeSetError):
        sample_edge(g, np.random.default_rng(0))


def test_graph_json_roundtrip(tmp_path):
    g = generate(GraphGenSpec("powerlaw", 40, seed=6))
    path = tmp_path / "g.json"
    g.save(path)
    loaded = DirectedGraph.load(path)
    assert loaded.node_count == g.node_count
    assert np.array_equal(loaded.edges, g.edges)
    raw = json.loads(path.read_text())
    assert set(raw) == {"node_count", "edges"}
