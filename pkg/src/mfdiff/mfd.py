"""Mean-field predictor for the population-state dynamics.

The population is tracked per in-degree class as a distribution over states.
Each class relaxes through the composition-averaged transition kernel, with
neighbor states drawn i.i.d. from the out-degree-weighted edge-source law.
Classes are coupled only through that edge-source distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .graph import JointDegreeDistribution
from . import rum


class ZeroEdgesError(ValueError):
    """The degree distribution carries no edges, so the edge-source law is undefined."""


class IntegrationInstabilityError(RuntimeError):
    """A class distribution left the simplex beyond tolerance; reduce the step size."""


@dataclass(frozen=True)
class PopulationVector:
    """Per-in-degree state distributions: degrees (L,) sorted, dist (L, K)."""

    degrees: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        degrees = np.asarray(self.degrees, dtype=int)
        dist = np.asarray(self.dist, dtype=float)
        if degrees.ndim != 1 or dist.ndim != 2 or dist.shape[0] != degrees.shape[0]:
            raise ValueError("degrees must be (L,) and dist (L, K)")
        if len(np.unique(degrees)) != len(degrees) or np.any(np.diff(degrees) <= 0):
            raise ValueError("degrees must be sorted and unique")
        if dist.size and (dist.min() < -1e-9 or np.any(np.abs(dist.sum(axis=1) - 1.0) > 1e-9)):
            raise ValueError("each class distribution must lie on the simplex")
        object.__setattr__(self, "degrees", degrees)
        object.__setattr__(self, "dist", dist)

    @property
    def n_states(self) -> int:
        return self.dist.shape[1]

    @classmethod
    def uniform(cls, q: JointDegreeDistribution, rho) -> "PopulationVector":
        """Same state distribution in every in-degree class of Q's support."""
        rho = np.asarray(rho, dtype=float)
        degrees = np.array(sorted(q.in_marginal), dtype=int)
        return cls(degrees, np.tile(rho, (len(degrees), 1)))

    @classmethod
    def from_degree_dict(cls, by_degree: dict) -> "PopulationVector":
        degrees = np.array(sorted(by_degree), dtype=int)
        return cls(degrees, np.array([by_degree[int(l)] for l in degrees], dtype=float))

    def overall(self, q: JointDegreeDistribution) -> np.ndarray:
        """Node-weighted population state: sum_l P(l) rho^l."""
        marg = q.in_marginal
        weights = np.array([marg.get(int(l), 0.0) for l in self.degrees])
        return weights @ self.dist


@dataclass(frozen=True)
class OdeSpec:
    """Fixed-step integrator settings."""

    t_end: float
    h: float = 0.01
    l_exact: int = 60
    mc_samples: int = 20000
    mc_seed: int = 0
    u: float = 0.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be > 0")
        if self.l_exact < 0:
            raise ValueError("l_exact must be >= 0")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")


def theta_z(q: JointDegreeDistribution, rho: PopulationVector,
            on_zero_edges: str = "raise") -> np.ndarray:
    """Probability that a uniformly random edge originates from each state.

    Sources are size-biased by out-degree, so class l is weighted by
    w_l = sum_m m Q(l, m).  With no edges this is undefined: either raise
    (default) or return the uniform vector when on_zero_edges="uniform".
    """
    support = set(int(l) for l in rho.degrees)
    q_support = set(q.in_marginal)
    if support != q_support:
        raise ValueError("population support does not match the degree distribution")
    w = q.edge_weight_by_in_degree
    weights = np.array([w.get(int(l), 0.0) for l in rho.degrees])
    total = weights.sum()
    if total <= 0.0:
        if on_zero_edges == "uniform":
            k = rho.n_states
            return np.full(k, 1.0 / k)
        raise ZeroEdgesError("degree distribution has zero total edge weight")
    return (weights @ rho.dist) / total


def compositions(l: int, k: int):
    """Lexicographic enumeration of nonnegative integer vectors of length k summing to l."""
    if l < 0 or k < 1:
        raise ValueError("need l >= 0 and k >= 1")
    if k == 1:
        yield (l,)
        return
    for first in range(l + 1):
        for rest in compositions(l - first, k - 1):
            yield (first, *rest)


def composition_count(l: int, k: int) -> int:
    return math.comb(l + k - 1, k - 1)


def _composition_table(l: int, k: int):
    comps = np.array(list(compositions(l, k)), dtype=np.int64)
    logcoef = gammaln(l + 1) - gammaln(comps + 1).sum(axis=1)
    return comps, logcoef


def _multinomial_weights(comps: np.ndarray, logcoef: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # 0^0 = 1: compositions that put mass on a zero-probability state get weight 0
    with np.errstate(divide="ignore"):
        logt = np.log(theta)
    terms = np.where(comps > 0, comps * logt[None, :], 0.0)
    bad = np.any((comps > 0) & (theta[None, :] <= 0.0), axis=1)
    logw = logcoef + terms.sum(axis=1)
    w = np.exp(logw)
    w[bad] = 0.0
    return w


def _kernel_tensor(kernel, u, comps: np.ndarray, k: int) -> np.ndarray:
    """Stack of K x K kernel matrices, one per composition row."""
    many = getattr(kernel, "transition_probs_many", None)
    out = np.empty((len(comps), k, k))
    if many is not None:
        for z1 in range(k):
            out[:, z1, :] = many(u, comps, np.full(len(comps), z1))
    else:
        for i, comp in enumerate(comps):
            for z1 in range(k):
                out[i, z1, :] = kernel.transition_probs(u, comp, z1)
    return out


def _check_theta(theta, k):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (k,) or theta.min() < -1e-12 or abs(theta.sum() - 1.0) > 1e-9:
        raise ValueError("theta must be a probability vector over the states")
    return np.clip(theta, 0.0, None)


class _GTable:
    """Composition-averaged kernel for one (kernel, u, l), reusable across theta."""

    def __init__(self, kernel, u, l, k, l_exact, mc_samples, mc_seed):
        self.kernel = kernel
        self.u = u
        self.l = l
        self.k = k
        self.exact = l <= l_exact
        self.mc_samples = mc_samples
        self.mc_seed = mc_seed
        if self.exact:
            self.comps, self.logcoef = _composition_table(l, k)
            self.kmats = _kernel_tensor(kernel, u, self.comps, k)
        else:
            self._cache: dict[tuple, np.ndarray] = {}

    def g(self, theta: np.ndarray) -> np.ndarray:
        if self.exact:
            w = _multinomial_weights(self.comps, self.logcoef, theta)
            return np.tensordot(w, self.kmats, axes=(0, 0))
        rng = np.random.default_rng(self.mc_seed)
        samples = rng.multinomial(self.l, theta, size=self.mc_samples)
        uniq, counts = np.unique(samples, axis=0, return_counts=True)
        missing = [tuple(row) for row in uniq if tuple(row) not in self._cache]
        if missing:
            mats = _kernel_tensor(self.kernel, self.u, np.array(missing, dtype=np.int64), self.k)
            for key, mat in zip(missing, mats):
                self._cache[key] = mat
        kmats = np.stack([self._cache[tuple(row)] for row in uniq])
        return np.tensordot(counts / self.mc_samples, kmats, axes=(0, 0))


def g_avg(model, u, l: int, theta, *, l_exact: int = 60,
          mc_samples: int = 20000, mc_seed: int = 0) -> np.ndarray:
    """Average transition matrix for in-degree l with neighbor states drawn from theta.

    Exact composition enumeration up to l_exact, seeded Monte Carlo beyond.
    Every row is a probability vector.
    """
    k = model.n_states
    theta = _check_theta(theta, k)
    table = _GTable(model, u, l, k, l_exact, mc_samples, mc_seed)
    return table.g(theta)


def rate_matrix(model, u, l: int, theta, **kwargs) -> np.ndarray:
    """Generator matrix: off-diagonal from g_avg, diagonal the negated row sum."""
    g = g_avg(model, u, l, theta, **kwargs)
    return _to_rate(g)


def _to_rate(g: np.ndarray) -> np.ndarray:
    f = g.copy()
    np.fill_diagonal(f, 0.0)
    np.fill_diagonal(f, -f.sum(axis=1))
    return f


@dataclass(frozen=True)
class MfdTrajectory:
    """Integrated mean-field trajectory, per class and node-weighted overall."""

    times: np.ndarray
    degrees: np.ndarray
    by_degree: np.ndarray  # (T, L, K)
    rho: np.ndarray        # (T, K) overall, weighted by the in-degree marginal
    labels: tuple[str, ...] | None = None

    def at_times(self, times) -> "MfdTrajectory":
        """Linear interpolation of the trajectory onto a new time grid."""
        times = np.asarray(times, dtype=float)
        t_len, l_len, k = self.by_degree.shape
        by_deg = np.empty((len(times), l_len, k))
        for i in range(l_len):
            for z in range(k):
                by_deg[:, i, z] = np.interp(times, self.times, self.by_degree[:, i, z])
        rho = np.empty((len(times), k))
        for z in range(k):
            rho[:, z] = np.interp(times, self.times, self.rho[:, z])
        return MfdTrajectory(times, self.degrees, by_deg, rho, self.labels)


def integrate(q: JointDegreeDistribution, rho0: PopulationVector, model,
              ode: OdeSpec) -> MfdTrajectory:
    """Classical fixed-step RK4 on the coupled per-class master equations.

    d rho^l_z2 / dt = sum_{z1 != z2} rho^l_z1 G^l_{z1,z2} - rho^l_z2 sum_{z1 != z2} G^l_{z2,z1},
    with the edge-source law recomputed from the current population at every
    stage.  After each step, small negative entries are clamped to zero and
    each class renormalized; larger violations abort.
    """
    k = model.n_states
    if rho0.n_states != k:
        raise ValueError("population and kernel disagree on the number of states")
    degrees = [int(l) for l in rho0.degrees]
    tables = {l: _GTable(model, ode.u, l, k, ode.l_exact, ode.mc_samples, ode.mc_seed)
              for l in degrees}
    w = q.edge_weight_by_in_degree
    weights = np.array([w.get(l, 0.0) for l in degrees])
    total_w = weights.sum()
    uniform = np.full(k, 1.0 / k)
    marg = q.in_marginal
    node_weights = np.array([marg.get(l, 0.0) for l in degrees])
    support = set(degrees)
    if support != set(marg):
        raise ValueError("population support does not match the degree distribution")

    def deriv(dist: np.ndarray) -> np.ndarray:
        theta = (weights @ dist) / total_w if total_w > 0 else uniform
        theta = np.clip(theta, 0.0, None)
        s = theta.sum()
        theta = theta / s if s > 0 else uniform
        out = np.empty_like(dist)
        for i, l in enumerate(degrees):
            f = _to_rate(tables[l].g(theta))
            out[i] = f.T @ dist[i]
        return out

    n_steps = max(int(math.ceil(ode.t_end / ode.h - 1e-9)), 0)
    times = np.empty(n_steps + 1)
    traj = np.empty((n_steps + 1, len(degrees), k))
    dist = rho0.dist.copy()
    t = 0.0
    times[0] = 0.0
    traj[0] = dist
    for step in range(1, n_steps + 1):
        h = min(ode.h, ode.t_end - t)
        k1 = deriv(dist)
        k2 = deriv(dist + 0.5 * h * k1)
        k3 = deriv(dist + 0.5 * h * k2)
        k4 = deriv(dist + h * k3)
        dist = dist + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if dist.size and dist.min() < -1e-6:
            raise IntegrationInstabilityError(
                f"class distribution left the simplex ({dist.min():.3e}); reduce h")
        dist = np.clip(dist, 0.0, None)
        dist /= dist.sum(axis=1, keepdims=True)
        t += h
        times[step] = t
        traj[step] = dist
    rho = np.einsum("tlk,l->tk", traj, node_weights)
    labels = getattr(model, "labels", None)
    return MfdTrajectory(times=times, degrees=np.asarray(degrees, dtype=int),
                         by_degree=traj, rho=rho,
                         labels=tuple(labels) if labels is not None else None)


@dataclass(frozen=True)
class PredictSpec:
    """How to fit a kernel from a transition log and roll the ODE forward."""

    space: rum.StateSpace
    times: np.ndarray
    method: str = "rum"
    features: rum.FeatureMapSpec = field(default_factory=lambda: rum.FeatureMapSpec(("const", "frac:T")))
    l2: float = 1e-6
    buckets: int = 5
    u: float = 0.0
    h: float = 0.01
    l_exact: int = 60
    mc_samples: int = 20000
    mc_seed: int = 0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or len(times) == 0 or times[0] < 0 or np.any(np.diff(times) < 0):
            raise ValueError("times must be a nondecreasing nonnegative grid")
        object.__setattr__(self, "times", times)
        if self.method not in ("rum", "plugin"):
            raise ValueError(f"unknown fit method {self.method!r}")


@dataclass(frozen=True)
class PredictResult:
    trajectory: MfdTrajectory
    kernel: object
    fit: rum.MleFit | None


def predict_from_fit(records, q: JointDegreeDistribution, rho0: PopulationVector,
                     spec: PredictSpec) -> PredictResult:
    """Fit a transition kernel from records, then integrate the mean-field ODE.

    The returned trajectory is evaluated exactly at ``spec.times`` (relative
    to the start of the prediction window).
    """
    fit = None
    if spec.method == "rum":
        fit = rum.fit_mle(records, spec.features, spec.space, spec.l2)
        kernel = fit.model
    else:
        kernel = rum.fit_plugin(records, spec.space, spec.buckets)
    t_end = float(spec.times[-1])
    if t_end <= 0.0:
        traj = MfdTrajectory(times=spec.times.copy(), degrees=rho0.degrees.copy(),
                             by_degree=np.repeat(rho0.dist[None], len(spec.times), axis=0),
                             rho=np.repeat(rho0.overall(q)[None], len(spec.times), axis=0),
                             labels=spec.space.labels)
        return PredictResult(traj, kernel, fit)
    ode = OdeSpec(t_end=t_end, h=spec.h, l_exact=spec.l_exact,
                  mc_samples=spec.mc_samples, mc_seed=spec.mc_seed, u=spec.u)
    dense = integrate(q, rho0, kernel, ode)
    return PredictResult(dense.at_times(spec.times), kernel, fit)
