"""Comparison of empirical and predicted population-state trajectories.

Trajectories are resampled onto a shared grid by linear interpolation before
scoring.  The headline protocol runs seeded simulations, fits a kernel on an
initial window of transitions, rolls the mean-field ODE forward from the
window boundary, and scores the prediction on the held-out remainder.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import abm, mfd, rum
from .graph import DirectedGraph, degree_distribution


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined when either series has zero variance."""


class ValidationError(ValueError):
    """Invalid fit-and-predict protocol arguments."""


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed population states: times (T,) increasing, states (T, K)."""

    times: np.ndarray
    states: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or states.ndim != 2 or len(times) != len(states):
            raise ValueError("times must be (T,) and states (T, K)")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if states.shape[1] != len(self.labels):
            raise ValueError("states width must match the labels")
        if states.size and (states.min() < -1e-9 or np.any(np.abs(states.sum(axis=1) - 1.0) > 1e-9)):
            raise ValueError("each state vector must lie on the simplex")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "labels", tuple(self.labels))

    def column(self, label: str) -> np.ndarray:
        return self.states[:, self.labels.index(label)]


def resample_common(a: Trajectory, b: Trajectory):
    """Union time grid over the overlapping window, linearly interpolated."""
    t0 = max(a.times[0], b.times[0])
    t1 = min(a.times[-1], b.times[-1])
    if t1 < t0:
        raise ValueError("trajectories do not overlap in time")
    grid = np.union1d(a.times, b.times)
    grid = grid[(grid >= t0) & (grid <= t1)]
    if len(grid) == 0:
        raise ValueError("empty common time grid")

    def interp(traj):
        out = np.empty((len(grid), traj.states.shape[1]))
        for z in range(traj.states.shape[1]):
            out[:, z] = np.interp(grid, traj.times, traj.states[:, z])
        return out

    return grid, interp(a), interp(b)


def pearson_correlation(a: Trajectory, b: Trajectory, state_label: str = "T") -> float:
    """Pearson coefficient of one state's fraction after common-grid resampling."""
    if a.labels != b.labels:
        raise ValueError("trajectories use different state labels")
    grid, sa, sb = resample_common(a, b)
    if len(grid) < 2:
        raise ValueError("need at least two common time points")
    z = a.labels.index(state_label)
    x, y = sa[:, z], sb[:, z]
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError(f"state {state_label!r} has zero variance")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def mean_kl(a: Trajectory, b: Trajectory, eps: float = 1e-9) -> float:
    """Time-averaged KL(a_t || b_t), with both vectors floored at eps and renormalized."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if a.labels != b.labels:
        raise ValueError("trajectories use different state labels")
    _, sa, sb = resample_common(a, b)
    pa = np.clip(sa, eps, None)
    pa /= pa.sum(axis=1, keepdims=True)
    pb = np.clip(sb, eps, None)
    pb /= pb.sum(axis=1, keepdims=True)
    return float(np.sum(pa * (np.log(pa) - np.log(pb)), axis=1).mean())


# ---------------------------------------------------------------------------
# Trajectory CSV

def write_trajectory_csv(path, times, states, labels, degrees=None, by_degree=None) -> None:
    """Columns: t, one per state label, then optional rho_l<k>_<label> blocks."""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    header = ["t"] + list(labels)
    if by_degree is not None:
        for l in degrees:
            header += [f"rho_l{int(l)}_{lab}" for lab in labels]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(times):
            row = [f"{t:.10g}"] + [f"{v:.10g}" for v in states[i]]
            if by_degree is not None:
                for j in range(len(degrees)):
                    row += [f"{v:.10g}" for v in by_degree[i, j]]
            writer.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    """Read the overall population-state columns of a trajectory CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        labels = [c for c in header[1:] if not c.startswith("rho_l")]
        k = len(labels)
        times, states = [], []
        for row in reader:
            times.append(float(row[0]))
            states.append([float(v) for v in row[1:1 + k]])
    return Trajectory(np.asarray(times), np.asarray(states), tuple(labels))


def sim_result_trajectory(result: abm.SimResult) -> Trajectory:
    return Trajectory(result.times, result.rho, result.labels)


# ---------------------------------------------------------------------------
# Fit-and-predict protocol

@dataclass(frozen=True)
class ValidationReport:
    correlations: tuple[float, ...]
    kls: tuple[float, ...]
    seeds: tuple[int, ...]

    @property
    def mean_correlation(self) -> float:
        return float(np.mean(self.correlations))

    @property
    def std_correlation(self) -> float:
        return float(np.std(self.correlations))

    @property
    def mean_kl(self) -> float:
        return float(np.mean(self.kls))

    @property
    def std_kl(self) -> float:
        return float(np.std(self.kls))

    def to_dict(self) -> dict:
        return {
            "correlations": list(self.correlations),
            "kls": list(self.kls),
            "seeds": list(self.seeds),
            "mean_correlation": self.mean_correlation,
            "std_correlation": self.std_correlation,
            "mean_kl": self.mean_kl,
            "std_kl": self.std_kl,
        }


def validate_protocol(g: DirectedGraph, model_true, init: abm.InitSpec, *,
                      steps: int, fit_window: int = 150, fit_method: str = "rum",
                      seeds: int = 10, u: float = 0.0,
                      features: rum.FeatureMapSpec | None = None,
                      space: rum.StateSpace | None = None,
                      l2: float = 1e-6, buckets: int = 5, h: float = 0.01,
                      base_seed: int = 0, state_label: str = "T") -> ValidationReport:
    """Per seed: simulate sequentially, fit on the first window of transitions,
    integrate the mean-field ODE from the window boundary, and score the
    held-out remainder.  Reports per-seed Pearson correlation and mean KL."""
    if fit_window < 1:
        raise ValidationError("fit_window must be >= 1")
    if steps < fit_window:
        raise ValidationError(f"only {steps} transitions but fit_window={fit_window}")
    if steps == fit_window:
        raise ValidationError("hold-out is empty: steps must exceed fit_window")
    labels = tuple(model_true.labels)
    if space is None:
        ref = labels.index("D") if "D" in labels else len(labels) - 1
        space = rum.StateSpace(labels, ref)
    if features is None:
        features = rum.FeatureMapSpec(("const", f"frac:{labels[0]}"))
    q = degree_distribution(g)
    correlations, kls, seed_list = [], [], []
    for s in range(seeds):
        seed = base_seed + s
        sim = abm.SimSpec(models=model_true, mode="sequential", steps=steps,
                          u=u, seed=seed, log_transitions=True)
        result = abm.run(g, init, sim)
        window_records = result.records[:fit_window]
        rho0 = mfd.PopulationVector(result.degrees, result.rho_by_degree[fit_window])
        rel_times = result.times[fit_window:] - result.times[fit_window]
        spec = mfd.PredictSpec(space=space, times=rel_times, method=fit_method,
                               features=features, l2=l2, buckets=buckets, u=u, h=h)
        predicted = mfd.predict_from_fit(window_records, q, rho0, spec).trajectory
        holdout = Trajectory(result.times[fit_window:], result.rho[fit_window:], labels)
        pred_traj = Trajectory(result.times[fit_window:], predicted.rho, labels)
        correlations.append(pearson_correlation(holdout, pred_traj, state_label))
        kls.append(mean_kl(holdout, pred_traj))
        seed_list.append(seed)
    return ValidationReport(tuple(correlations), tuple(kls), tuple(seed_list))
