"""Directed influence networks and their joint degree distributions.

Edges are stored as (listener, influencer) pairs: the pair (i, j) means
node j influences node i.  In-degree counts influencers, out-degree counts
listeners, so high out-degree nodes are the broadcasters of the network.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

GRAPH_MODELS = ("powerlaw", "ba", "er", "chain", "tree")


class GraphSpecError(ValueError):
    """Invalid graph-generation parameters."""


class EmptyEdgeSetError(ValueError):
    """An operation required at least one edge."""


@dataclass(frozen=True)
class DirectedGraph:
    """Simple directed graph over nodes 0..node_count-1.

    ``edges`` is an (E, 2) integer array; row (i, j) means j influences i.
    No self-loops, no duplicate edges.
    """

    node_count: int
    edges: np.ndarray

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphSpecError("node_count must be >= 1")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise GraphSpecError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphSpecError("self-loops are not allowed")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise GraphSpecError("duplicate edges are not allowed")

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.node_count)

    @cached_property
    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.node_count)

    @cached_property
    def _in_csr(self) -> tuple[np.ndarray, np.ndarray]:
        # influencer lists grouped by listener: (indptr, flat influencers)
        order = np.argsort(self.edges[:, 0], kind="stable")
        flat = self.edges[order, 1]
        listeners = self.edges[order, 0]
        indptr = np.searchsorted(listeners, np.arange(self.node_count + 1))
        return indptr, flat

    def in_neighbors(self, i: int) -> np.ndarray:
        """Influencers of node i (the nodes i listens to)."""
        indptr, flat = self._in_csr
        return flat[indptr[i]:indptr[i + 1]]

    def to_dict(self) -> dict:
        return {"node_count": self.node_count, "edges": self.edges.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DirectedGraph":
        return cls(int(data["node_count"]), np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DirectedGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class JointDegreeDistribution:
    """Empirical joint law of (in-degree, out-degree) node pairs."""

    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        total = 0.0
        for (l, m), p in self.entries.items():
            if l < 0 or m < 0:
                raise ValueError("degrees must be nonnegative")
            if p < 0:
                raise ValueError("probability masses must be nonnegative")
            total += p
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"masses must sum to 1, got {total!r}")

    @property
    def l_max(self) -> int:
        return max((l for l, _ in self.entries), default=0)

    @property
    def m_max(self) -> int:
        return max((m for _, m in self.entries), default=0)

    @cached_property
    def in_marginal(self) -> dict:
        out: dict[int, float] = {}
        for (l, _), p in self.entries.items():
            out[l] = out.get(l, 0.0) + p
        return out

    @cached_property
    def out_marginal(self) -> dict:
        out: dict[int, float] = {}
        for (_, m), p in self.entries.items():
            out[m] = out.get(m, 0.0) + p
        return out

    def conditional_in_given_out(self, m: int) -> dict:
        pm = self.out_marginal.get(m, 0.0)
        if pm <= 0:
            raise ValueError(f"out-degree {m} has zero marginal")
        return {l: p / pm for (l, mm), p in self.entries.items() if mm == m}

    @cached_property
    def edge_weight_by_in_degree(self) -> dict:
        """w_l = sum_m m Q(l, m): out-degree mass carried by in-degree class l."""
        out: dict[int, float] = {}
        for (l, m), p in self.entries.items():
            out[l] = out.get(l, 0.0) + m * p
        return out

    @property
    def total_edge_weight(self) -> float:
        """Mean out-degree, equal to |edges| / node_count on an empirical graph."""
        return sum(m * p for (_, m), p in self.entries.items())

    @property
    def mean_in_degree(self) -> float:
        return sum(l * p for (l, _), p in self.entries.items())

    def to_dict(self) -> dict:
        return {"entries": [[l, m, p] for (l, m), p in sorted(self.entries.items())]}

    @classmethod
    def from_dict(cls, data: dict) -> "JointDegreeDistribution":
        return cls({(int(l), int(m)): float(p) for l, m, p in data["entries"]})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "JointDegreeDistribution":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GraphGenSpec:
    """Parameters for the random-graph generators."""

    model: str
    node_count: int
    gamma: float = 2.7
    edge_clip: int = 50
    er_p: float = 0.1
    tree_branching: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.model not in GRAPH_MODELS:
            raise GraphSpecError(f"unknown graph model {self.model!r}")
        if self.node_count < 1:
            raise GraphSpecError("node_count must be >= 1")
        if self.model == "powerlaw":
            if self.gamma <= 1:
                raise GraphSpecError("gamma must be > 1")
            if self.edge_clip < 1:
                raise GraphSpecError("edge_clip must be >= 1")
        if self.model == "er" and not 0.0 <= self.er_p <= 1.0:
            raise GraphSpecError("er_p must be in [0, 1]")
        if self.model == "tree" and self.tree_branching < 1:
            raise GraphSpecError("tree_branching must be >= 1")


def generate(spec: GraphGenSpec) -> DirectedGraph:
    """Generate a directed influence network per the spec'd model, deterministically in seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.node_count
    if spec.model == "powerlaw":
        edges = _powerlaw_edges(n, spec.gamma, spec.edge_clip, rng)
    elif spec.model == "ba":
        edges = _ba_edges(n, rng)
    elif spec.model == "er":
        edges = _er_edges(n, spec.er_p, rng)
    elif spec.model == "chain":
        edges = [(i, i - 1) for i in range(1, n)]
    elif spec.model == "tree":
        edges = [(i, (i - 1) // spec.tree_branching) for i in range(1, n)]
    else:  # pragma: no cover - guarded by GraphGenSpec
        raise GraphSpecError(spec.model)
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return DirectedGraph(n, arr)


def _powerlaw_edges(n, gamma, clip, rng):
    # Out-degree sampled on {1..min(clip, n-1)} with P(d) proportional to d^-gamma,
    # then that many distinct listeners drawn uniformly (duplicates rejected).
    hi = min(clip, n - 1)
    if hi < 1:
        return []
    support = np.arange(1, hi + 1)
    weights = support.astype(float) ** (-gamma)
    probs = weights / weights.sum()
    out_deg = rng.choice(support, size=n, p=probs)
    edges = []
    for j in range(n):
        chosen: set[int] = set()
        while len(chosen) < out_deg[j]:
            cand = int(rng.integers(n))
            if cand == j or cand in chosen:
                continue
            chosen.add(cand)
            edges.append((cand, j))
    return edges


def _ba_edges(n, rng):
    # Preferential attachment, one edge per arriving node; the newcomer
    # listens to the chosen existing node, so old hubs accumulate out-degree.
    if n == 1:
        return []
    edges = [(1, 0)]
    repeated = [0, 1]  # one entry per edge endpoint, undirected degree weighting
    for s in range(2, n):
        t = repeated[int(rng.integers(len(repeated)))]
        edges.append((s, t))
        repeated.extend((t, s))
    return edges


def _er_edges(n, p, rng):
    edges = []
    for i in range(n):
        hits = rng.random(n) < p
        hits[i] = False
        for j in np.nonzero(hits)[0]:
            edges.append((i, int(j)))
    return edges


def degree_distribution(g: DirectedGraph) -> JointDegreeDistribution:
    """Empirical Q(l, m) = fraction of nodes with in-degree l and out-degree m."""
    counts = Counter(zip(g.in_degrees.tolist(), g.out_degrees.tolist()))
    n = g.node_count
    return JointDegreeDistribution({lm: c / n for lm, c in counts.items()})


def sample_edge(g: DirectedGraph, rng) -> tuple[int, int]:
    """Draw one (listener, influencer) pair uniformly from the edge list."""
    if g.edge_count == 0:
        raise EmptyEdgeSetError("graph has no edges")
    k = int(rng.integers(g.edge_count))
    return int(g.edges[k, 0]), int(g.edges[k, 1])
