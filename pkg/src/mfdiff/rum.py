"""Randomized-utility transition kernels.

An agent in state ``prev`` observing composition ``counts`` of its influencers
draws its next state from a multinomial logit: deterministic utilities
theta . phi(u, l, n, w, prev) plus Gumbel(0, 1) noise, with the reference
state's utility pinned to 0.  This module provides the feature map, the
softmax kernel, categorical sampling, maximum-likelihood estimation, and a
bucketed empirical ("plug-in") estimator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import logsumexp


class StateSpaceError(ValueError):
    """Invalid state-space definition."""


class FeatureSpecError(ValueError):
    """Invalid feature-map definition or mismatched inputs."""


class UtilityError(ValueError):
    """Non-finite utilities or malformed utility inputs."""


@dataclass(frozen=True)
class StateSpace:
    """Ordered latent states; the reference state's utility is always 0."""

    labels: tuple[str, ...] = ("T", "H", "D")
    reference_state: int = 2

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        k = len(self.labels)
        if not 2 <= k <= 8:
            raise StateSpaceError("need between 2 and 8 states")
        if len(set(self.labels)) != k:
            raise StateSpaceError("state labels must be distinct")
        if not 0 <= self.reference_state < k:
            raise StateSpaceError("reference_state out of range")

    @property
    def n_states(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise StateSpaceError(f"unknown state label {label!r}") from None

    @classmethod
    def two_state(cls) -> "StateSpace":
        return cls(("T", "H"), reference_state=1)

    @classmethod
    def three_state(cls) -> "StateSpace":
        return cls(("T", "H", "D"), reference_state=2)


# Feature tokens: const, u, log1p_l, w, frac:<label>, prev:<label>, u*frac:<label>
@dataclass(frozen=True)
class FeatureMapSpec:
    """Which covariates enter the shared feature vector phi.

    Every alternative shares phi; each non-reference alternative carries its
    own coefficient block, so the model has dim(phi) * (K - 1) parameters.
    Neighbor fractions are 0 when the agent has no influencers.
    """

    features: tuple[str, ...] = ("const",)
    context_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise FeatureSpecError("at least one feature is required")
        if self.context_dim < 0:
            raise FeatureSpecError("context_dim must be >= 0")
        if "w" in self.features and self.context_dim < 1:
            raise FeatureSpecError("'w' feature requires context_dim >= 1")

    def validate(self, space: StateSpace) -> None:
        for tok in self.features:
            if tok in ("const", "u", "log1p_l", "w"):
                continue
            for prefix in ("frac:", "prev:", "u*frac:"):
                if tok.startswith(prefix):
                    space.index(tok[len(prefix):])
                    break
            else:
                raise FeatureSpecError(f"unknown feature token {tok!r}")

    def dim(self, space: StateSpace) -> int:
        self.validate(space)
        return sum(self.context_dim if tok == "w" else 1 for tok in self.features)

    def phi_many(self, space, u, counts, prev, w=None):
        """Design matrix of shape (m, dim) for m observations.

        counts: (m, K) integer neighbor compositions; prev: (m,) state indices;
        u: scalar or (m,); w: None or (m, context_dim).
        """
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 2 or counts.shape[1] != space.n_states:
            raise FeatureSpecError("counts must have shape (m, n_states)")
        m = counts.shape[0]
        prev = np.asarray(prev, dtype=int)
        u_arr = np.broadcast_to(np.asarray(u, dtype=float), (m,))
        l = counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            fracs = np.where(l[:, None] > 0, counts / np.maximum(l, 1)[:, None], 0.0)
        cols = []
        for tok in self.features:
            if tok == "const":
                cols.append(np.ones(m))
            elif tok == "u":
                cols.append(u_arr)
            elif tok == "log1p_l":
                cols.append(np.log1p(l))
            elif tok == "w":
                if w is None:
                    raise FeatureSpecError("feature 'w' requires a context vector")
                w_arr = np.asarray(w, dtype=float).reshape(m, -1)
                if w_arr.shape[1] != self.context_dim:
                    raise FeatureSpecError(
                        f"context vector has dim {w_arr.shape[1]}, expected {self.context_dim}")
                for j in range(self.context_dim):
                    cols.append(w_arr[:, j])
            elif tok.startswith("frac:"):
                cols.append(fracs[:, space.index(tok[5:])])
            elif tok.startswith("prev:"):
                cols.append((prev == space.index(tok[5:])).astype(float))
            elif tok.startswith("u*frac:"):
                cols.append(u_arr * fracs[:, space.index(tok[7:])])
            else:  # pragma: no cover - validate() rejects these
                raise FeatureSpecError(tok)
        return np.column_stack(cols)

    def phi(self, space, u, counts, prev, w=None):
        w_row = None if w is None else np.asarray(w, dtype=float).reshape(1, -1)
        return self.phi_many(space, u, np.asarray(counts).reshape(1, -1), [prev], w_row)[0]

    def to_dict(self) -> dict:
        return {"features": list(self.features), "context_dim": self.context_dim}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMapSpec":
        return cls(tuple(data["features"]), int(data.get("context_dim", 0)))


@dataclass(frozen=True)
class NeighborComposition:
    """Counts of influencers per state; the in-degree is their sum."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if any(c < 0 for c in counts):
            raise ValueError("neighbor counts must be nonnegative")

    @property
    def l(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_states(cls, states: Sequence[int], n_states: int) -> "NeighborComposition":
        return cls(tuple(np.bincount(np.asarray(states, dtype=int), minlength=n_states)))


@dataclass(frozen=True)
class TransitionRecord:
    """One observed agent update: who moved, from what, seeing which neighbors."""

    step: int
    node: int
    u: float
    counts: tuple[int, ...]
    prev: int
    next: int
    w: tuple[float, ...] | None = None

    @property
    def l(self) -> int:
        return sum(self.counts)


@runtime_checkable
class TransitionKernel(Protocol):
    """Anything that maps (u, neighbor counts, previous state) to next-state probabilities."""

    labels: tuple[str, ...]

    @property
    def n_states(self) -> int: ...

    def transition_probs(self, u, counts, prev, w=None) -> np.ndarray: ...


def softmax(r: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (max-shifted)."""
    r = np.asarray(r, dtype=float)
    shifted = r - r.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ChoiceModel:
    """Multinomial-logit transition kernel with per-alternative coefficient blocks."""

    space: StateSpace
    features: FeatureMapSpec
    coeffs: np.ndarray

    def __post_init__(self):
        self.features.validate(self.space)
        coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        object.__setattr__(self, "coeffs", coeffs)
        d = self.features.dim(self.space)
        want = d * (self.space.n_states - 1)
        if coeffs.shape != (want,):
            raise FeatureSpecError(f"expected {want} coefficients, got {coeffs.shape[0]}")
        if not np.all(np.isfinite(coeffs)):
            raise UtilityError("coefficients must be finite")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.space.labels

    @property
    def n_states(self) -> int:
        return self.space.n_states

    @cached_property
    def _blocks(self) -> np.ndarray:
        d = self.features.dim(self.space)
        return self.coeffs.reshape(self.space.n_states - 1, d)

    @cached_property
    def _alt_order(self) -> tuple[int, ...]:
        # row k of _blocks belongs to the k-th non-reference state, in label order
        return tuple(z for z in range(self.space.n_states) if z != self.space.reference_state)

    def utilities_many(self, u, counts, prev, w=None) -> np.ndarray:
        phi = self.features.phi_many(self.space, u, counts, prev, w)
        m = phi.shape[0]
        r = np.zeros((m, self.space.n_states))
        vals = phi @ self._blocks.T
        for k, z in enumerate(self._alt_order):
            r[:, z] = vals[:, k]
        return r

    def transition_probs(self, u, counts, prev, w=None) -> np.ndarray:
        return choice_probs(self, u, counts, w, prev)

    def transition_probs_many(self, u, counts, prev, w=None) -> np.ndarray:
        r = self.utilities_many(u, counts, prev, w)
        if not np.all(np.isfinite(r)):
            raise UtilityError("non-finite utility encountered")
        return softmax(r)

    def to_dict(self) -> dict:
        return {
            "kind": "rum",
            "labels": list(self.space.labels),
            "reference": self.space.labels[self.space.reference_state],
            "features": list(self.features.features),
            "context_dim": self.features.context_dim,
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChoiceModel":
        labels = tuple(data["labels"])
        space = StateSpace(labels, labels.index(data["reference"]))
        fmap = FeatureMapSpec(tuple(data["features"]), int(data.get("context_dim", 0)))
        return cls(space, fmap, np.asarray(data["coeffs"], dtype=float))


@dataclass(frozen=True)
class TableKernel:
    """Constant transition kernel: fixed row-stochastic matrix, ignores u, l, n, w."""

    space: StateSpace
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        k = self.space.n_states
        if rows.shape != (k, k):
            raise ValueError(f"rows must be ({k}, {k})")
        if rows.min() < 0 or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("rows must be probability vectors")
        object.__setattr__(self, "rows", rows)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.space.labels

    @property
    def n_states(self) -> int:
        return self.space.n_states

    def transition_probs(self, u, counts, prev, w=None) -> np.ndarray:
        return self.rows[int(prev)].copy()

    def transition_probs_many(self, u, counts, prev, w=None) -> np.ndarray:
        return self.rows[np.asarray(prev, dtype=int)]

    def to_dict(self) -> dict:
        return {"kind": "table", "labels": list(self.space.labels), "rows": self.rows.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TableKernel":
        labels = tuple(data["labels"])
        return cls(StateSpace(labels, len(labels) - 1), np.asarray(data["rows"], dtype=float))


@dataclass(frozen=True)
class PluginKernel:
    """Bucketed empirical kernel: rows indexed by (fraction-of-q_state bucket, prev state).

    Bucket ``buckets`` (the last one) is reserved for agents with no influencers.
    """

    space: StateSpace
    buckets: int
    q_state: int
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        k = self.space.n_states
        if table.shape != (self.buckets + 1, k, k):
            raise ValueError(f"table must be ({self.buckets + 1}, {k}, {k})")
        object.__setattr__(self, "table", table)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.space.labels

    @property
    def n_states(self) -> int:
        return self.space.n_states

    def _bucket(self, counts) -> int:
        counts = np.asarray(counts, dtype=float)
        l = counts.sum()
        if l <= 0:
            return self.buckets
        q = counts[self.q_state] / l
        return min(int(q * self.buckets), self.buckets - 1)

    def transition_probs(self, u, counts, prev, w=None) -> np.ndarray:
        return self.table[self._bucket(counts), int(prev)].copy()

    def transition_probs_many(self, u, counts, prev, w=None) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        l = counts.sum(axis=1)
        q = np.where(l > 0, counts[:, self.q_state] / np.maximum(l, 1), 0.0)
        b = np.minimum((q * self.buckets).astype(int), self.buckets - 1)
        b = np.where(l > 0, b, self.buckets)
        return self.table[b, np.asarray(prev, dtype=int)]

    def to_dict(self) -> dict:
        return {
            "kind": "plugin",
            "labels": list(self.space.labels),
            "buckets": self.buckets,
            "q_state": self.space.labels[self.q_state],
            "table": self.table.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PluginKernel":
        labels = tuple(data["labels"])
        space = StateSpace(labels, len(labels) - 1)
        return cls(space, int(data["buckets"]), space.index(data["q_state"]),
                   np.asarray(data["table"], dtype=float))


def _counts_of(comp) -> np.ndarray:
    counts = getattr(comp, "counts", comp)
    arr = np.asarray(counts, dtype=float)
    if arr.ndim != 1:
        raise UtilityError("composition must be one-dimensional")
    if np.any(arr < 0):
        raise UtilityError("neighbor counts must be nonnegative")
    return arr


def utilities(model: ChoiceModel, u, comp, w=None, z1: int = 0) -> np.ndarray:
    """Deterministic utilities per state; the reference entry is exactly 0."""
    counts = _counts_of(comp)
    if counts.shape[0] != model.n_states:
        raise UtilityError(
            f"composition has {counts.shape[0]} entries, expected {model.n_states}")
    w_row = None if w is None else np.asarray(w, dtype=float).reshape(1, -1)
    return model.utilities_many(u, counts.reshape(1, -1), [z1], w_row)[0]


def choice_probs(model: ChoiceModel, u, comp, w=None, z1: int = 0) -> np.ndarray:
    """Multinomial-logit transition probabilities from state z1."""
    r = utilities(model, u, comp, w, z1)
    if not np.all(np.isfinite(r)):
        raise UtilityError("non-finite utility encountered")
    return softmax(r)


def sample_next_state(model, u, comp, w, z1, rng) -> int:
    """Inverse-CDF draw from choice_probs; deterministic given the rng state."""
    if isinstance(model, ChoiceModel):
        p = choice_probs(model, u, comp, w, z1)
    else:
        p = model.transition_probs(u, _counts_of(comp), z1, w)
    cdf = np.cumsum(p)
    return int(np.searchsorted(cdf, rng.random(), side="right").clip(0, len(p) - 1))


@dataclass(frozen=True)
class MleFit:
    """Fitted model plus optimizer diagnostics."""

    model: ChoiceModel
    log_likelihood: float
    grad_inf_norm: float
    iterations: int
    converged: bool


def _design(records, spec: FeatureMapSpec, space: StateSpace):
    counts = np.array([r.counts for r in records], dtype=float)
    prev = np.array([r.prev for r in records], dtype=int)
    nxt = np.array([r.next for r in records], dtype=int)
    u = np.array([r.u for r in records], dtype=float)
    if counts.shape[1] != space.n_states:
        raise FeatureSpecError("record compositions do not match the state space")
    if nxt.min() < 0 or nxt.max() >= space.n_states or prev.min() < 0 or prev.max() >= space.n_states:
        raise StateSpaceError("record states out of range")
    w = None
    if "w" in spec.features:
        if any(r.w is None for r in records):
            raise FeatureSpecError("feature 'w' requires every record to carry a context vector")
        w = np.array([r.w for r in records], dtype=float)
    phi = spec.phi_many(space, u, counts, prev, w)
    return phi, nxt


def fit_mle(records, spec: FeatureMapSpec, space: StateSpace, l2: float = 0.0,
            *, tol: float = 1e-8, max_iter: int = 10000) -> MleFit:
    """Maximize sum log kappa - l2 * ||theta||^2 by full-batch gradient ascent.

    Backtracking (Armijo) line search with a Barzilai-Borwein initial step.
    Convergence when the gradient infinity-norm drops below ``tol``; complete
    separation at l2=0 simply reports converged=False after max_iter.
    """
    if not records:
        raise ValueError("need at least one record to fit")
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    spec.validate(space)
    phi, y = _design(records, spec, space)
    k = space.n_states
    ref = space.reference_state
    alts = [z for z in range(k) if z != ref]
    col_of = {z: i for i, z in enumerate(alts)}
    m, d = phi.shape
    onehot = np.zeros((m, k - 1))
    for z, i in col_of.items():
        onehot[y == z, i] = 1.0

    def objective_grad(theta):
        blocks = theta.reshape(k - 1, d)
        util = np.zeros((m, k))
        util[:, alts] = phi @ blocks.T
        lse = logsumexp(util, axis=1)
        ll = float(util[np.arange(m), y].sum() - lse.sum())
        p = np.exp(util - lse[:, None])
        resid = onehot - p[:, alts]
        grad = (resid.T @ phi).ravel() - 2.0 * l2 * theta
        return ll - l2 * float(theta @ theta), grad

    theta = np.zeros(d * (k - 1))
    obj, grad = objective_grad(theta)
    prev_theta = prev_grad = None
    iterations = 0
    converged = np.linalg.norm(grad, np.inf) < tol
    while not converged and iterations < max_iter:
        iterations += 1
        step = 1.0
        if prev_theta is not None:
            s = theta - prev_theta
            yv = prev_grad - grad  # gradient of -objective increases along s
            sy = float(s @ yv)
            if sy > 1e-300:
                step = min(max(float(s @ s) / sy, 1e-12), 1e12)
        gnorm2 = float(grad @ grad)
        while True:
            cand = theta + step * grad
            cand_obj, cand_grad = objective_grad(cand)
            if cand_obj >= obj + 1e-4 * step * gnorm2 or step < 1e-18:
                break
            step *= 0.5
        prev_theta, prev_grad = theta, grad
        theta, obj, grad = cand, cand_obj, cand_grad
        converged = np.linalg.norm(grad, np.inf) < tol
    model = ChoiceModel(space, spec, theta)
    return MleFit(model=model, log_likelihood=obj + l2 * float(theta @ theta),
                  grad_inf_norm=float(np.linalg.norm(grad, np.inf)),
                  iterations=iterations, converged=bool(converged))


def log_likelihood(model: ChoiceModel, records) -> float:
    """Sum of log transition probabilities of the observed next states."""
    phi, y = _design(records, model.features, model.space)
    k = model.space.n_states
    util = np.zeros((phi.shape[0], k))
    util[:, list(model._alt_order)] = phi @ model._blocks.T
    lse = logsumexp(util, axis=1)
    return float(util[np.arange(len(y)), y].sum() - lse.sum())


def fit_plugin(records, space: StateSpace, buckets: int) -> PluginKernel:
    """Laplace-smoothed empirical kernel bucketed by the truthful-neighbor fraction.

    Records with no influencers land in a dedicated extra bucket.
    """
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    k = space.n_states
    q_state = space.index("T") if "T" in space.labels else 0
    counts = np.zeros((buckets + 1, k, k), dtype=np.int64)
    for r in records:
        if len(r.counts) != k:
            raise FeatureSpecError("record compositions do not match the state space")
        l = r.l
        if l == 0:
            b = buckets
        else:
            b = min(int(r.counts[q_state] / l * buckets), buckets - 1)
        counts[b, r.prev, r.next] += 1
    table = (counts + 1.0) / (counts.sum(axis=2, keepdims=True) + k)
    return PluginKernel(space, buckets, q_state, table)


# ---------------------------------------------------------------------------
# File formats

def write_records_jsonl(path, records, space: StateSpace) -> None:
    with open(path, "w") as fh:
        for r in records:
            row = {
                "step": r.step,
                "node": r.node,
                "u": r.u,
                "l": r.l,
                "n": {space.labels[z]: int(c) for z, c in enumerate(r.counts)},
                "prev": space.labels[r.prev],
                "next": space.labels[r.next],
            }
            if r.w is not None:
                row["w"] = list(r.w)
            fh.write(json.dumps(row) + "\n")


def _canonical_labels(seen: set[str]) -> tuple[str, ...]:
    canonical = ("T", "H", "D")
    if seen <= set(canonical):
        return tuple(lab for lab in canonical if lab in seen)
    return tuple(sorted(seen))


def read_records_jsonl(path, labels: Sequence[str] | None = None):
    """Load a transition log; returns (records, state space).

    When labels are not given they are inferred: the canonical T/H/D order if
    the log only uses those labels, alphabetical otherwise.  The reference
    state is D when present, else the last label.
    """
    rows = []
    seen: set[str] = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            rows.append(row)
            seen.update(row["n"].keys())
            seen.add(row["prev"])
            seen.add(row["next"])
    label_tuple = tuple(labels) if labels is not None else _canonical_labels(seen)
    ref = label_tuple.index("D") if "D" in label_tuple else len(label_tuple) - 1
    space = StateSpace(label_tuple, ref)
    records = []
    for row in rows:
        counts = tuple(int(row["n"].get(lab, 0)) for lab in label_tuple)
        rec = TransitionRecord(
            step=int(row["step"]), node=int(row["node"]), u=float(row["u"]),
            counts=counts, prev=space.index(row["prev"]), next=space.index(row["next"]),
            w=tuple(row["w"]) if "w" in row else None)
        if "l" in row and int(row["l"]) != rec.l:
            raise ValueError(f"record at step {row['step']} has inconsistent l")
        records.append(rec)
    return records, space


def kernel_from_dict(data: dict):
    """Dispatch a kernel JSON object on its 'kind' field (default 'rum')."""
    kind = data.get("kind", "rum")
    if kind == "rum":
        return ChoiceModel.from_dict(data)
    if kind == "table":
        return TableKernel.from_dict(data)
    if kind == "plugin":
        return PluginKernel.from_dict(data)
    if kind == "logits":
        from . import twostate

        return twostate.TwoStateLogitKernel.from_dict(data)
    raise ValueError(f"unknown kernel kind {kind!r}")


def load_kernel(path):
    return kernel_from_dict(json.loads(Path(path).read_text()))


def save_kernel(path, kernel) -> None:
    Path(path).write_text(json.dumps(kernel.to_dict()))
