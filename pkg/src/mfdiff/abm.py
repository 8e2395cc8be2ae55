"""Stochastic agent-based simulation on a directed influence network.

Sequential mode replays the edge-event process: one uniformly sampled edge
per step, whose listener re-draws its state from the transition kernel
evaluated on its full current in-neighborhood.  Parallel mode updates every
node with at least one influencer once per round, synchronously.  Nodes with
no influencers never update in either mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import DirectedGraph, EmptyEdgeSetError
from .rum import TransitionRecord

PLACEMENTS = ("random", "top_in_degree", "top_out_degree", "chain_head", "tree_root", "explicit")


class InitSpecError(ValueError):
    """Invalid initial-state specification."""


class SimSpecError(ValueError):
    """Invalid simulation specification."""


@dataclass
class NetworkState:
    """Mutable per-node state vector plus event/round counters."""

    states: np.ndarray
    n_states: int
    step: int = 0
    round: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(self.states.copy(), self.n_states, self.step, self.round)


@dataclass(frozen=True)
class InitSpec:
    """How initial states are distributed over the network.

    ``distribution`` fixes the per-state quotas (largest-remainder rounding);
    ``placement`` decides which nodes receive the first-listed state's quota.
    The remaining quotas are spread over the remaining nodes uniformly at
    random.  ``nodes`` is required for (and only for) explicit placement.
    """

    distribution: tuple[float, ...]
    placement: str = "random"
    nodes: tuple[int, ...] | None = None

    def __post_init__(self):
        dist = tuple(float(p) for p in self.distribution)
        object.__setattr__(self, "distribution", dist)
        if any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
            raise InitSpecError("distribution must be a probability vector")
        if self.placement not in PLACEMENTS:
            raise InitSpecError(f"unknown placement {self.placement!r}")
        if self.nodes is not None:
            object.__setattr__(self, "nodes", tuple(int(i) for i in self.nodes))
        if self.placement == "explicit" and self.nodes is None:
            raise InitSpecError("explicit placement requires a node list")


@dataclass(frozen=True)
class ModelAssignment:
    """Partition of nodes into capability classes, each with its own kernel."""

    node_class: np.ndarray
    class_kernels: tuple

    def __post_init__(self):
        object.__setattr__(self, "node_class", np.asarray(self.node_class, dtype=int))
        object.__setattr__(self, "class_kernels", tuple(self.class_kernels))
        if self.node_class.min() < 0 or self.node_class.max() >= len(self.class_kernels):
            raise SimSpecError("node_class indexes outside class_kernels")
        k = {kern.n_states for kern in self.class_kernels}
        if len(k) != 1:
            raise SimSpecError("all class kernels must share one state space")

    @property
    def n_states(self) -> int:
        return self.class_kernels[0].n_states

    @property
    def labels(self):
        return self.class_kernels[0].labels

    def kernel_of(self, node: int):
        return self.class_kernels[self.node_class[node]]


def assign_capability_classes(g: DirectedGraph, fractions, kernels,
                              placement: str = "top_out_degree", rng=None) -> ModelAssignment:
    """Split nodes into classes by quota; class 0's quota lands per placement."""
    if placement not in ("random", "top_in_degree", "top_out_degree"):
        raise SimSpecError(f"unsupported class placement {placement!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    n = g.node_count
    quotas = _quotas(fractions, n)
    pool = np.repeat(np.arange(len(quotas)), quotas)
    if placement == "random":
        node_class = pool[rng.permutation(n)]
    else:
        deg = g.out_degrees if placement == "top_out_degree" else g.in_degrees
        order = np.lexsort((np.arange(n), -deg))
        node_class = np.empty(n, dtype=int)
        node_class[order[:quotas[0]]] = 0
        rest = pool[quotas[0]:]
        node_class[order[quotas[0]:]] = rest[rng.permutation(len(rest))]
    return ModelAssignment(node_class, tuple(kernels))


@dataclass(frozen=True)
class SimSpec:
    """One simulation run: mode, horizon, control, kernel(s), seed."""

    models: object
    mode: str = "sequential"
    steps: int = 0
    rounds: int = 10
    u: float = 0.0
    seed: int = 0
    log_transitions: bool = False

    def __post_init__(self):
        if self.mode not in ("sequential", "parallel"):
            raise SimSpecError(f"unknown mode {self.mode!r}")
        if self.steps < 0 or self.rounds < 0:
            raise SimSpecError("steps and rounds must be >= 0")


def _quotas(dist, n: int) -> np.ndarray:
    raw = np.asarray(dist, dtype=float) * n
    base = np.floor(raw).astype(int)
    short = n - int(base.sum())
    frac = raw - base
    order = np.argsort(-frac, kind="stable")  # ties broken by state index
    base[order[:short]] += 1
    return base


def init_states(g: DirectedGraph, init: InitSpec, rng) -> NetworkState:
    """Assign initial states by quota and placement; deterministic given rng."""
    n = g.node_count
    k = len(init.distribution)
    quotas = _quotas(init.distribution, n)
    pool = np.repeat(np.arange(k), quotas)
    states = np.empty(n, dtype=np.int64)
    if init.placement == "random":
        states[:] = pool[rng.permutation(n)]
    elif init.placement in ("top_in_degree", "top_out_degree"):
        deg = g.in_degrees if init.placement == "top_in_degree" else g.out_degrees
        order = np.lexsort((np.arange(n), -deg))
        _fill(states, order, quotas, pool, rng)
    elif init.placement in ("chain_head", "tree_root"):
        _fill(states, np.arange(n), quotas, pool, rng)
    else:  # explicit
        chosen = np.asarray(init.nodes, dtype=int)
        if len(chosen) != quotas[0]:
            raise InitSpecError(
                f"explicit list has {len(chosen)} nodes but the first state's quota is {quotas[0]}")
        if len(np.unique(chosen)) != len(chosen) or (len(chosen) and (chosen.min() < 0 or chosen.max() >= n)):
            raise InitSpecError("explicit node list must be distinct valid indices")
        mask = np.zeros(n, dtype=bool)
        mask[chosen] = True
        states[mask] = 0
        rest = pool[quotas[0]:]
        states[~mask] = rest[rng.permutation(len(rest))]
    return NetworkState(states, k)


def _fill(states, order, quotas, pool, rng):
    states[order[:quotas[0]]] = 0
    rest = pool[quotas[0]:]
    states[order[quotas[0]:]] = rest[rng.permutation(len(rest))]


def _kernel_lookup(models):
    if isinstance(models, ModelAssignment):
        return models.kernel_of, models.n_states, models.labels
    kernel = models
    return (lambda _i: kernel), kernel.n_states, kernel.labels


def _draw_index(probs, r) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, r, side="right").clip(0, len(probs) - 1))


def step_sequential(g: DirectedGraph, state: NetworkState, models, u, rng,
                    log: bool = False) -> TransitionRecord | None:
    """One edge event: sample an edge, its listener re-draws from the kernel.

    Mutates ``state`` in place; at most one node changes.
    """
    if g.edge_count == 0:
        raise EmptyEdgeSetError("sequential stepping requires at least one edge")
    kernel_of, k, _ = _kernel_lookup(models)
    e = int(rng.integers(g.edge_count))
    listener = int(g.edges[e, 0])
    nbrs = g.in_neighbors(listener)
    counts = np.bincount(state.states[nbrs], minlength=k)
    prev = int(state.states[listener])
    probs = kernel_of(listener).transition_probs(u, counts, prev)
    nxt = _draw_index(probs, rng.random())
    state.states[listener] = nxt
    state.step += 1
    if log:
        return TransitionRecord(step=state.step, node=listener, u=float(u),
                                counts=tuple(int(c) for c in counts), prev=prev, next=nxt)
    return None


def _neighbor_count_matrix(g: DirectedGraph, states: np.ndarray, k: int) -> np.ndarray:
    indptr, flat = g._in_csr
    counts = np.empty((g.node_count, k), dtype=np.int64)
    for z in range(k):
        hits = np.concatenate(([0], np.cumsum(states[flat] == z)))
        counts[:, z] = hits[indptr[1:]] - hits[indptr[:-1]]
    return counts


def step_parallel_round(g: DirectedGraph, state: NetworkState, models, u, rng,
                        log: bool = False) -> list[TransitionRecord]:
    """Synchronous round: every node with influencers re-draws from the kernel
    evaluated on the previous round's states; isolated nodes keep theirs."""
    kernel_of, k, _ = _kernel_lookup(models)
    updating = np.nonzero(g.in_degrees > 0)[0]
    records: list[TransitionRecord] = []
    state.round += 1
    if len(updating) == 0:
        return records
    counts = _neighbor_count_matrix(g, state.states, k)[updating]
    prev = state.states[updating].copy()
    draws = rng.random(len(updating))
    if isinstance(models, ModelAssignment):
        probs = np.empty((len(updating), k))
        for c, kern in enumerate(models.class_kernels):
            rows = np.nonzero(models.node_class[updating] == c)[0]
            if len(rows) == 0:
                continue
            probs[rows] = _probs_many(kern, u, counts[rows], prev[rows])
    else:
        probs = _probs_many(models, u, counts, prev)
    cdf = np.cumsum(probs, axis=1)
    nxt = np.minimum((cdf < draws[:, None]).sum(axis=1), k - 1)
    state.states[updating] = nxt
    if log:
        for idx, node in enumerate(updating):
            records.append(TransitionRecord(
                step=state.round, node=int(node), u=float(u),
                counts=tuple(int(c) for c in counts[idx]),
                prev=int(prev[idx]), next=int(nxt[idx])))
    return records


def _probs_many(kernel, u, counts, prev):
    many = getattr(kernel, "transition_probs_many", None)
    if many is not None:
        return np.asarray(many(u, counts, prev), dtype=float)
    return np.array([kernel.transition_probs(u, counts[i], int(prev[i]))
                     for i in range(len(prev))])


def population_state(state: NetworkState, g: DirectedGraph):
    """Overall state fractions plus the per-in-degree breakdown.

    Returns (rho, by_degree) where by_degree maps each realized in-degree l
    to the state distribution of the nodes in that class.
    """
    k = state.n_states
    n = g.node_count
    rho = np.bincount(state.states, minlength=k) / n
    by_degree: dict[int, np.ndarray] = {}
    indeg = g.in_degrees
    for l in np.unique(indeg):
        members = state.states[indeg == l]
        by_degree[int(l)] = np.bincount(members, minlength=k) / len(members)
    return rho, by_degree


@dataclass
class SimResult:
    """Trajectory of population states plus the transition log."""

    times: np.ndarray
    rho: np.ndarray
    degrees: np.ndarray
    rho_by_degree: np.ndarray
    labels: tuple[str, ...]
    records: list = field(default_factory=list)
    final: NetworkState | None = None
    edge_count: int = 0

    @property
    def terminal_rho(self) -> np.ndarray:
        return self.rho[-1]


def run(g: DirectedGraph, init: InitSpec, sim: SimSpec) -> SimResult:
    """Run one seeded simulation and record population states at every step/round."""
    kernel_of, k, labels = _kernel_lookup(sim.models)
    if len(init.distribution) != k:
        raise InitSpecError("init distribution length must match the kernel's state count")
    rng = np.random.default_rng(sim.seed)
    state = init_states(g, init, rng)

    indeg = g.in_degrees
    degrees = np.unique(indeg)
    deg_index = {int(l): i for i, l in enumerate(degrees)}
    node_deg_idx = np.array([deg_index[int(l)] for l in indeg])
    class_sizes = np.bincount(node_deg_idx, minlength=len(degrees))
    class_counts = np.zeros((len(degrees), k), dtype=np.int64)
    np.add.at(class_counts, (node_deg_idx, state.states), 1)

    horizon = sim.steps if sim.mode == "sequential" else sim.rounds
    rho_traj = np.empty((horizon + 1, k))
    by_deg_traj = np.empty((horizon + 1, len(degrees), k))

    def snapshot(t):
        rho_traj[t] = class_counts.sum(axis=0) / g.node_count
        by_deg_traj[t] = class_counts / class_sizes[:, None]

    snapshot(0)
    records: list[TransitionRecord] = []
    if sim.mode == "sequential":
        for t in range(1, horizon + 1):
            rec = step_sequential(g, state, sim.models, sim.u, rng, log=True)
            if sim.log_transitions:
                records.append(rec)
            ci = node_deg_idx[rec.node]
            class_counts[ci, rec.prev] -= 1
            class_counts[ci, rec.next] += 1
            snapshot(t)
        times = np.arange(horizon + 1) / max(g.edge_count, 1)
    else:
        for t in range(1, horizon + 1):
            before = state.states.copy()
            recs = step_parallel_round(g, state, sim.models, sim.u, rng,
                                       log=sim.log_transitions)
            records.extend(recs)
            changed = np.nonzero(before != state.states)[0]
            for node in changed:
                ci = node_deg_idx[node]
                class_counts[ci, before[node]] -= 1
                class_counts[ci, state.states[node]] += 1
            snapshot(t)
        times = np.arange(horizon + 1, dtype=float)

    return SimResult(times=times, rho=rho_traj, degrees=degrees, rho_by_degree=by_deg_traj,
                     labels=tuple(labels), records=records, final=state,
                     edge_count=g.edge_count)
