"""Two-state (truthful/hallucinating) equilibrium analysis.

With affine log-odds in the control u and the truthful-neighbor fraction q,
the per-class steady truthful share is A/(A+B) where A and B are binomial
averages of the switching rates.  Edge-weighting those shares by out-degree
gives a scalar self-consistency map whose fixed point is the equilibrium
edge-truth rate.  This module solves that fixed point, certifies the
contraction condition, and differentiates the equilibrium in the control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit as sigmoid
from scipy.special import gammaln, xlogy

from .graph import JointDegreeDistribution

GRID_POINTS = 1001


class DegenerateSwitchingError(ValueError):
    """Both switching rates vanish for a weighted in-degree class."""


class UnstableFixedPointError(RuntimeError):
    """1 - Phi'(theta*) <= 0: the sensitivity formula does not apply."""


@dataclass(frozen=True)
class TwoStateLogits:
    """Affine log-odds of choosing T over H, one triple per current state.

    delta(u, q) = c0 + cu * u + cq * q with q the truthful-neighbor fraction
    (0 for isolated nodes).  The H-row governs escapes from hallucination,
    the T-row retention of truth.
    """

    c0_h: float
    cu_h: float
    cq_h: float
    c0_t: float
    cu_t: float
    cq_t: float

    def __post_init__(self):
        for name in ("c0_h", "cu_h", "cq_h", "c0_t", "cu_t", "cq_t"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"coefficient {name} must be finite")

    def delta_h(self, u, q):
        return self.c0_h + self.cu_h * u + self.cq_h * q

    def delta_t(self, u, q):
        return self.c0_t + self.cu_t * u + self.cq_t * q

    @classmethod
    def symmetric(cls, c0: float, cq: float, cu: float = 0.0) -> "TwoStateLogits":
        return cls(c0, cu, cq, c0, cu, cq)


@dataclass(frozen=True)
class TwoStateLogitKernel:
    """Transition kernel over ("T", "H") induced by TwoStateLogits."""

    logits: TwoStateLogits
    labels: tuple[str, str] = ("T", "H")

    @property
    def n_states(self) -> int:
        return 2

    def transition_probs(self, u, counts, prev, w=None) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        l = counts.sum()
        q = counts[0] / l if l > 0 else 0.0
        if int(prev) == 1:
            p_t = sigmoid(self.logits.delta_h(u, q))
        else:
            p_t = sigmoid(self.logits.delta_t(u, q))
        return np.array([p_t, 1.0 - p_t])

    def transition_probs_many(self, u, counts, prev, w=None) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        l = counts.sum(axis=1)
        q = np.where(l > 0, counts[:, 0] / np.maximum(l, 1), 0.0)
        prev = np.asarray(prev, dtype=int)
        delta = np.where(prev == 1, self.logits.delta_h(u, q), self.logits.delta_t(u, q))
        p_t = sigmoid(delta)
        return np.column_stack([p_t, 1.0 - p_t])

    def to_dict(self) -> dict:
        lg = self.logits
        return {"kind": "logits", "labels": list(self.labels),
                "c0_h": lg.c0_h, "cu_h": lg.cu_h, "cq_h": lg.cq_h,
                "c0_t": lg.c0_t, "cu_t": lg.cu_t, "cq_t": lg.cq_t}

    @classmethod
    def from_dict(cls, data: dict) -> "TwoStateLogitKernel":
        logits = TwoStateLogits(data["c0_h"], data["cu_h"], data["cq_h"],
                                data["c0_t"], data["cu_t"], data["cq_t"])
        return cls(logits, tuple(data.get("labels", ("T", "H"))))


@dataclass(frozen=True)
class PhiContext:
    """Degree distribution, logits and control defining the equilibrium map."""

    q: JointDegreeDistribution
    logits: TwoStateLogits
    u: float = 0.0

    def __post_init__(self):
        if self.q.total_edge_weight <= 0.0:
            raise ValueError("the degree distribution must carry at least one edge")

    @property
    def weighted_degrees(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.q.edge_weight_by_in_degree
        ls = np.array(sorted(l for l, wl in w.items() if wl > 0), dtype=int)
        ws = np.array([w[int(l)] for l in ls])
        return ls, ws / ws.sum()

    @property
    def support_degrees(self) -> np.ndarray:
        return np.array(sorted(self.q.in_marginal), dtype=int)


def kernel_rates(logits: TwoStateLogits, u, l: int, m: int) -> tuple[float, float]:
    """Switching probabilities (H to T, T to H) with m of l neighbors truthful."""
    if not 0 <= m <= l:
        raise ValueError("need 0 <= M <= l")
    q = m / l if l > 0 else 0.0
    return float(sigmoid(logits.delta_h(u, q))), float(sigmoid(-logits.delta_t(u, q)))


def _binom_pmf(l: int, theta: float) -> np.ndarray:
    """Bin(l, theta) pmf over 0..l via a log-space recurrence."""
    if l == 0:
        return np.ones(1)
    if theta <= 0.0:
        out = np.zeros(l + 1)
        out[0] = 1.0
        return out
    if theta >= 1.0:
        out = np.zeros(l + 1)
        out[l] = 1.0
        return out
    logit = math.log(theta) - math.log1p(-theta)
    logp = np.empty(l + 1)
    logp[0] = l * math.log1p(-theta)
    for m in range(l):
        logp[m + 1] = logp[m] + math.log((l - m) / (m + 1)) + logit
    return np.exp(logp)


def _rate_values(logits: TwoStateLogits, u, l: int) -> tuple[np.ndarray, np.ndarray]:
    q = np.arange(l + 1) / l if l > 0 else np.zeros(1)
    return sigmoid(logits.delta_h(u, q)), sigmoid(-logits.delta_t(u, q))


def a_b(logits: TwoStateLogits, u, l: int, theta: float) -> tuple[float, float]:
    """Binomially averaged switching rates (A_l, B_l) at edge-truth rate theta."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    pmf = _binom_pmf(l, theta)
    h_vals, t_vals = _rate_values(logits, u, l)
    return float(pmf @ h_vals), float(pmf @ t_vals)


def phi(ctx: PhiContext, theta: float) -> float:
    """Edge-weighted equilibrium truthful share given edge-truth rate theta."""
    ls, ws = ctx.weighted_degrees
    total = 0.0
    for l, w in zip(ls, ws):
        a, b = a_b(ctx.logits, ctx.u, int(l), theta)
        if a + b <= 0.0:
            raise DegenerateSwitchingError(
                f"A + B vanished at in-degree {int(l)}, theta={theta}")
        total += w * (a / (a + b))
    return total


@dataclass(frozen=True)
class FixedPointReport:
    theta_star: float
    residual: float
    method: str
    iterations: int


def solve_fixed_point(ctx: PhiContext, theta0: float = 0.5, tol: float = 1e-10,
                      max_iter: int = 100000) -> FixedPointReport:
    """Picard iteration from theta0, falling back to bisection on Phi(theta) - theta."""
    theta = float(theta0)
    for it in range(1, max_iter + 1):
        nxt = phi(ctx, theta)
        if abs(nxt - theta) < tol:
            theta = nxt
            return FixedPointReport(theta, abs(phi(ctx, theta) - theta), "picard", it)
        theta = nxt
    lo, hi = 0.0, 1.0
    g_lo = phi(ctx, lo) - lo
    if g_lo <= 0.0:
        return FixedPointReport(lo, abs(g_lo), "bisection", max_iter)
    it = 0
    while hi - lo > 1e-13 and it < 200:
        mid = 0.5 * (lo + hi)
        g_mid = phi(ctx, mid) - mid
        if g_mid == 0.0:
            lo = hi = mid
            break
        if g_mid > 0.0:
            lo = mid
        else:
            hi = mid
        it += 1
    theta = 0.5 * (lo + hi)
    return FixedPointReport(theta, abs(phi(ctx, theta) - theta), "bisection", max_iter + it)


def scan_fixed_points(ctx: PhiContext, resolution: float = 1e-3) -> list[float]:
    """All fixed points bracketed by sign changes on a uniform grid."""
    grid = np.arange(0.0, 1.0 + resolution / 2, resolution)
    vals = np.array([phi(ctx, float(t)) - t for t in grid])
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
            continue
        if vals[i] * vals[i + 1] < 0.0:
            lo, hi = float(grid[i]), float(grid[i + 1])
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if (phi(ctx, mid) - mid) * (phi(ctx, lo) - lo) <= 0.0:
                    hi = mid
                else:
                    lo = mid
            roots.append(0.5 * (lo + hi))
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    return roots


def _binom_pmf_grid(l: int, thetas: np.ndarray) -> np.ndarray:
    """(len(thetas), l+1) matrix of Bin(l, theta) pmfs."""
    m = np.arange(l + 1)
    logc = gammaln(l + 1) - gammaln(m + 1) - gammaln(l - m + 1)
    logp = logc + xlogy(m, thetas[:, None]) + xlogy(l - m, 1.0 - thetas[:, None])
    return np.exp(logp)


def _phi_grid(ctx: PhiContext, thetas: np.ndarray):
    """Vectorized Phi over a theta grid plus the grid minimum of A + B.

    The A3 minimum runs over the full in-degree support; the map itself
    only weighs classes with positive out-degree mass.
    """
    ls, ws = ctx.weighted_degrees
    weight_of = {int(l): w for l, w in zip(ls, ws)}
    vals = np.zeros_like(thetas)
    eta = np.inf
    eta_at: tuple[float, int] | None = None
    for l in ctx.support_degrees:
        l = int(l)
        pmf = _binom_pmf_grid(l, thetas)
        h_vals, t_vals = _rate_values(ctx.logits, ctx.u, l)
        a = pmf @ h_vals
        b = pmf @ t_vals
        ab = a + b
        idx = int(np.argmin(ab))
        if ab[idx] < eta:
            eta = float(ab[idx])
            eta_at = (float(thetas[idx]), l)
        w = weight_of.get(l, 0.0)
        if w > 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                vals += w * np.where(ab > 0, a / np.where(ab > 0, ab, 1.0), np.nan)
    return vals, eta, eta_at


@dataclass(frozen=True)
class ContractionReport:
    s_h: float
    s_t: float
    eta: float
    bound: float
    is_contraction: bool
    sup_phi_prime: float


def contraction_check(ctx: PhiContext) -> ContractionReport:
    """Certify the slope bound max(S_H, S_T) / (4 eta) and measure sup |Phi'|."""
    s_h = abs(ctx.logits.cq_h)
    s_t = abs(ctx.logits.cq_t)
    thetas = np.linspace(0.0, 1.0, GRID_POINTS)
    vals, eta, _ = _phi_grid(ctx, thetas)
    bound = math.inf if eta <= 0 else max(s_h, s_t) / (4.0 * eta)
    dtheta = thetas[1] - thetas[0]
    slopes = np.abs(vals[2:] - vals[:-2]) / (2.0 * dtheta)
    sup_prime = float(slopes.max()) if len(slopes) else 0.0
    return ContractionReport(s_h=s_h, s_t=s_t, eta=eta, bound=bound,
                             is_contraction=bound < 1.0, sup_phi_prime=sup_prime)


def _a_b_derivative(logits: TwoStateLogits, u, l: int, theta: float) -> tuple[float, float]:
    """d/d theta of the binomial averages, via the increment identity
    d/d theta E[f(M)] = l E[f(M'+1) - f(M')] with M' ~ Bin(l-1, theta)."""
    if l == 0:
        return 0.0, 0.0
    pmf = _binom_pmf(l - 1, theta)
    h_vals, t_vals = _rate_values(logits, u, l)
    da = l * float(pmf @ (h_vals[1:] - h_vals[:-1]))
    db = l * float(pmf @ (t_vals[1:] - t_vals[:-1]))
    return da, db


def phi_prime(ctx: PhiContext, theta: float) -> float:
    """Analytic derivative of the equilibrium map at theta."""
    ls, ws = ctx.weighted_degrees
    total = 0.0
    for l, w in zip(ls, ws):
        a, b = a_b(ctx.logits, ctx.u, int(l), theta)
        da, db = _a_b_derivative(ctx.logits, ctx.u, int(l), theta)
        if a + b <= 0.0:
            raise DegenerateSwitchingError(f"A + B vanished at in-degree {int(l)}")
        total += w * (da * b - a * db) / (a + b) ** 2
    return total


def _sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


@dataclass(frozen=True)
class StaticsReport:
    dtheta_du: float
    theta_star: float
    phi_u: float
    phi_prime: float


def comparative_statics(ctx: PhiContext, theta_star: float | None = None) -> StaticsReport:
    """Closed-form sensitivity of the equilibrium to the control.

    d theta*/du = Phi_u(theta*) / (1 - Phi'(theta*)), with the numerator the
    edge-weighted average of (A_u B + A B_u~) / (A + B)^2 and B_u~ the drop in
    the truth-loss rate.  Raises when the fixed point is not stable.
    """
    if theta_star is None:
        theta_star = solve_fixed_point(ctx).theta_star
    ls, ws = ctx.weighted_degrees
    numer = 0.0
    for l, w in zip(ls, ws):
        l = int(l)
        pmf = _binom_pmf(l, theta_star)
        q = np.arange(l + 1) / l if l > 0 else np.zeros(1)
        a = float(pmf @ sigmoid(ctx.logits.delta_h(ctx.u, q)))
        b = float(pmf @ sigmoid(-ctx.logits.delta_t(ctx.u, q)))
        if a + b <= 0.0:
            raise DegenerateSwitchingError(f"A + B vanished at in-degree {l}")
        a_u = ctx.logits.cu_h * float(pmf @ _sigmoid_prime(ctx.logits.delta_h(ctx.u, q)))
        b_u_tilde = ctx.logits.cu_t * float(pmf @ _sigmoid_prime(-ctx.logits.delta_t(ctx.u, q)))
        numer += w * (a_u * b + a * b_u_tilde) / (a + b) ** 2
    slope = phi_prime(ctx, theta_star)
    denom = 1.0 - slope
    if denom <= 0.0:
        raise UnstableFixedPointError(
            f"1 - Phi'(theta*) = {denom:.3e} <= 0; sensitivity formula inapplicable")
    return StaticsReport(dtheta_du=numer / denom, theta_star=theta_star,
                         phi_u=numer, phi_prime=slope)


@dataclass(frozen=True)
class AssumptionsReport:
    a1: bool
    a2: bool
    a3: bool
    a4: bool
    eta: float
    witnesses: dict

    def all_hold(self) -> bool:
        return self.a1 and self.a2 and self.a3 and self.a4


def check_assumptions(logits: TwoStateLogits, ctx: PhiContext) -> AssumptionsReport:
    """Monotone social influence, smoothness, non-degenerate switching, incentive direction."""
    eff = PhiContext(ctx.q, logits, ctx.u)
    witnesses: dict[str, str] = {}
    a1 = logits.cq_h >= 0.0 and logits.cq_t >= 0.0
    if not a1:
        which = "cq_h" if logits.cq_h < 0 else "cq_t"
        witnesses["A1"] = f"{which} = {getattr(logits, which)} < 0"
    a2 = True  # affine log-odds always have finite slope in q
    thetas = np.linspace(0.0, 1.0, GRID_POINTS)
    _, eta, eta_at = _phi_grid(eff, thetas)
    a3 = eta > 1e-12
    if not a3 and eta_at is not None:
        witnesses["A3"] = f"A + B = {eta:.3e} at theta={eta_at[0]:.3f}, l={eta_at[1]}"
    a4 = logits.cu_h >= 0.0 and logits.cu_t >= 0.0
    if not a4:
        which = "cu_h" if logits.cu_h < 0 else "cu_t"
        witnesses["A4"] = f"{which} = {getattr(logits, which)} < 0"
    return AssumptionsReport(a1=a1, a2=a2, a3=a3, a4=a4, eta=eta, witnesses=witnesses)
