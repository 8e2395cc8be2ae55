"""Shared synthetic-data helpers for the test suite."""

from __future__ import annotations

import numpy as np

from mfdiff import rum


def sample_records(kernel, n_records, rng, *, u=0.0, l_range=(1, 20), w_dim=0):
    """Random transitions drawn from a kernel over random neighbor compositions.

    Compositions put a uniform random truthful fraction on the first state and
    spread the rest uniformly; previous states are uniform.
    """
    k = kernel.n_states
    lo, hi = l_range
    ls = rng.integers(lo, hi + 1, size=n_records)
    qs = rng.random(n_records)
    first = rng.binomial(ls, qs)
    counts = np.zeros((n_records, k), dtype=np.int64)
    counts[:, 0] = first
    rest = ls - first
    if k == 2:
        counts[:, 1] = rest
    else:
        split = rng.multinomial(1, np.full(k - 1, 1.0 / (k - 1)), size=n_records)
        for i in range(n_records):
            counts[i, 1:] = rng.multinomial(rest[i], np.full(k - 1, 1.0 / (k - 1)))
    prev = rng.integers(0, k, size=n_records)
    w = rng.normal(size=(n_records, w_dim)) if w_dim else None
    probs = _probs_many(kernel, u, counts, prev, w)
    draws = rng.random(n_records)
    nxt = np.minimum((np.cumsum(probs, axis=1) < draws[:, None]).sum(axis=1), k - 1)
    records = []
    for i in range(n_records):
        records.append(rum.TransitionRecord(
            step=i + 1, node=0, u=float(u), counts=tuple(int(c) for c in counts[i]),
            prev=int(prev[i]), next=int(nxt[i]),
            w=tuple(w[i]) if w is not None else None))
    return records


def _probs_many(kernel, u, counts, prev, w=None):
    many = getattr(kernel, "transition_probs_many", None)
    if many is not None:
        return np.asarray(many(u, counts, prev, w))
    return np.array([kernel.transition_probs(u, counts[i], int(prev[i]),
                                             None if w is None else w[i])
                     for i in range(len(prev))])


def random_choice_model(rng, *, k=None, scale=1.0):
    """Random ChoiceModel over a random feature subset, for property sweeps."""
    if k is None:
        k = int(rng.integers(2, 5))
    labels = tuple("THDXWYZQ"[:k])
    space = rum.StateSpace(labels, int(rng.integers(k)))
    pool = ["const", "u", "log1p_l"] + [f"frac:{lab}" for lab in labels] \
        + [f"prev:{lab}" for lab in labels] + [f"u*frac:{labels[0]}"]
    n_feat = int(rng.integers(1, 5))
    feats = tuple(pool[i] for i in sorted(rng.choice(len(pool), size=n_feat, replace=False)))
    fmap = rum.FeatureMapSpec(feats)
    d = fmap.dim(space)
    coeffs = rng.normal(scale=scale, size=d * (k - 1))
    return rum.ChoiceModel(space, fmap, coeffs)
