"""Exact tabular checks: value vs discounted occupancy, and the density ratio
recovered by the in-batch contrastive loss.

Everything here runs on tiny enumerable MDPs with one-hot state features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import diffcore as dc
from .pretrain import contrastive_batch_loss


@dataclass
class TabularMDP:
    P: np.ndarray                 # (S, A, S) transition probabilities
    r: np.ndarray                 # (S, A) rewards
    pi: np.ndarray                # (S, A) fixed policy
    gamma: float
    horizon: int | None = None    # None: infinite horizon

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        S, A = self.r.shape
        if self.P.shape != (S, A, S) or self.pi.shape != (S, A):
            raise ValueError(f"shape mismatch: P {self.P.shape}, r {self.r.shape}, pi {self.pi.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every P[s, a, :] must be a distribution")
        if np.any(self.pi < 0) or np.max(np.abs(self.pi.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must be distributions")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.horizon is None and self.gamma >= 1.0:
            raise ValueError("infinite-horizon value is singular at gamma = 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]

    @property
    def P_pi(self) -> np.ndarray:
        return np.einsum("sa,sat->st", self.pi, self.P)

    @property
    def r_pi(self) -> np.ndarray:
        return np.sum(self.pi * self.r, axis=1)


def random_mdp(rng: np.random.Generator, n_states: int = 5, n_actions: int = 2,
               gamma: float = 0.9, horizon: int | None = None) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.normal(size=(n_states, n_actions))
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    return TabularMDP(P, r, pi, gamma, horizon)


def chain_mdp(n_states: int = 5, p_right: float = 0.6, gamma: float = 0.9) -> TabularMDP:
    """Single-action random walk on a line with reflecting ends."""
    P = np.zeros((n_states, 1, n_states))
    for s in range(n_states):
        P[s, 0, min(s + 1, n_states - 1)] += p_right
        P[s, 0, max(s - 1, 0)] += 1.0 - p_right
    r = np.zeros((n_states, 1))
    r[-1] = 1.0
    return TabularMDP(P, r, np.ones((n_states, 1)), gamma)


def value_direct(mdp: TabularMDP) -> tuple[np.ndarray, np.ndarray]:
    """V by the linear Bellman system (or backward induction), Q = r + gamma P V."""
    Pp, rp, g = mdp.P_pi, mdp.r_pi, mdp.gamma
    if mdp.horizon is None:
        V = np.linalg.solve(np.eye(mdp.n_states) - g * Pp, rp)
        V_next = V
    else:
        V_next = np.zeros(mdp.n_states)
        for _ in range(mdp.horizon - 1):
            V_next = rp + g * Pp @ V_next
        V = rp + g * Pp @ V_next
    Q = mdp.r + g * np.einsum("sat,t->sa", mdp.P, V_next)
    return V, Q


def occupancy(mdp: TabularMDP) -> np.ndarray:
    """rho[s, s']: discounted distribution over states visited from s (offset 0 included).

    Infinite horizon: (1 - gamma)(I - gamma P_pi)^-1. Finite horizon H: the
    geometric mixture of P_pi^0 .. P_pi^(H-1), renormalised to sum to one.
    """
    Pp, g, S = mdp.P_pi, mdp.gamma, mdp.n_states
    if mdp.horizon is None:
        return (1.0 - g) * np.linalg.inv(np.eye(S) - g * Pp)
    rho, Pk, w = np.zeros((S, S)), np.eye(S), 1.0
    for _ in range(mdp.horizon):
        rho += w * Pk
        Pk, w = Pk @ Pp, w * g
    return rho / rho.sum(axis=1, keepdims=True)


def future_occupancy(mdp: TabularMDP) -> np.ndarray:
    """Occupancy over strictly later states: sum_{dt >= 1} (1 - gamma) gamma^(dt-1) P_pi^dt.

    This is the law of the contrastive positive for a geometric offset.
    """
    g = mdp.gamma
    return mdp.P_pi @ ((1.0 - g) * np.linalg.inv(np.eye(mdp.n_states) - g * mdp.P_pi))


def value_via_occupancy(mdp: TabularMDP) -> np.ndarray:
    """V(s) = E_{s' ~ rho(.|s)}[r_pi(s')] scaled by the total discount mass."""
    g = mdp.gamma
    mass = 1.0 / (1.0 - g) if mdp.horizon is None else (
        float(mdp.horizon) if g == 1.0 else (1.0 - g ** mdp.horizon) / (1.0 - g))
    return mass * occupancy(mdp) @ mdp.r_pi


def stationary_distribution(P_pi: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P_pi.T)
    d = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    d = np.abs(d)
    return d / d.sum()


def analytic_log_ratio(mdp: TabularMDP) -> tuple[np.ndarray, np.ndarray]:
    """log rho_future(s'|s) - log p(s') with p the stationary marginal.

    Returns (ratio (S, S), valid mask); unreachable targets are masked out.
    """
    rho = future_occupancy(mdp)
    marg = stationary_distribution(mdp.P_pi)
    valid = (marg > 1e-12)[None, :] & (rho > 1e-15)
    with np.errstate(divide="ignore"):
        ratio = np.where(valid, np.log(np.where(valid, rho, 1.0)) - np.log(np.where(marg > 1e-12, marg, 1.0))[None, :], 0.0)
    return ratio, valid


def rank_correlation(scores: np.ndarray, target: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-anchor Spearman correlation over valid targets; NaN where undefined."""
    out = np.full(len(scores), np.nan)
    for s in range(len(scores)):
        m = valid[s]
        if m.sum() < 3 or np.ptp(target[s, m]) < 1e-12 or np.ptp(scores[s, m]) == 0:
            continue
        out[s] = spearmanr(scores[s, m], target[s, m]).statistic
    return out


@dataclass(frozen=True)
class TabularScorer:
    """Bilinear scorer on one-hot states: phi and psi are dense maps, no torso."""
    n_states: int
    dim: int = 64

    torso: tuple = ()

    @property
    def phi(self):
        return [dc.dense("phi", self.n_states, self.dim)]

    @property
    def psi(self):
        return [dc.dense("psi", self.n_states, self.dim)]

    def init(self, seed: int) -> dc.ParamStore:
        return dc.init_params(self.phi + self.psi, np.random.default_rng(seed))

    def score_table(self, params: dc.ParamStore) -> np.ndarray:
        eye = np.eye(self.n_states)
        ea, _ = dc.forward(self.phi, params, eye)
        ep, _ = dc.forward(self.psi, params, eye)
        return ea @ ep.T / np.sqrt(self.dim)


def simulate_chain(mdp: TabularMDP, rng: np.random.Generator, length: int) -> np.ndarray:
    """One long state sequence under pi, started from the stationary law."""
    Pp = mdp.P_pi
    cdf = np.cumsum(Pp, axis=1)
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(mdp.n_states, p=stationary_distribution(Pp))
    u = rng.random(length)
    for t in range(1, length):
        states[t] = min(np.searchsorted(cdf[states[t - 1]], u[t], side="right"), mdp.n_states - 1)
    return states


@dataclass
class NceResult:
    status: str                       # "ok" or "degenerate"
    mean_correlation: float
    per_anchor: np.ndarray
    initial_correlation: float
    excluded_states: int
    scores: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)


def nce_ratio_check(mdp: TabularMDP, n_samples: int = 200_000, steps: int = 3000,
                    batch: int = 64, lr: float = 1e-2, seed: int = 0) -> NceResult:
    """Train a tabular scorer with the in-batch contrastive loss on sampled
    (anchor, geometric-offset positive) pairs and rank-correlate its scores
    with the analytic log density ratio, anchor by anchor."""
    target, valid = analytic_log_ratio(mdp)
    marg = stationary_distribution(mdp.P_pi)
    excluded = int(np.sum(marg <= 1e-12))
    reach = valid.copy()
    reach[marg <= 1e-12, :] = False
    spreads = [np.ptp(target[s, reach[s]]) if reach[s].sum() > 1 else 0.0 for s in range(mdp.n_states)]
    scorer = TabularScorer(mdp.n_states)
    params = scorer.init(seed)
    initial = rank_correlation(scorer.score_table(params), target, reach)
    if max(spreads) < 1e-9:
        return NceResult("degenerate", float("nan"), np.full(mdp.n_states, np.nan),
                         float(np.nanmean(initial)) if np.any(np.isfinite(initial)) else float("nan"),
                         excluded, scorer.score_table(params), target)
    rng = np.random.default_rng(seed)
    chain = simulate_chain(mdp, rng, n_samples)
    eye = np.eye(mdp.n_states)
    g = mdp.gamma
    for _ in range(steps):
        t = rng.integers(0, n_samples - 1, size=batch)
        # geometric offset >= 1 with P(dt) = (1 - g) g^(dt - 1), clipped to the chain end
        dt = np.minimum(rng.geometric(1.0 - g, size=batch), n_samples - 1 - t)
        _, grads, _ = contrastive_batch_loss(scorer, params, eye[chain[t]], eye[chain[t + dt]])
        dc.adam_step(params, grads, lr)
    scores = scorer.score_table(params)
    per_anchor = rank_correlation(scores, target, reach)
    return NceResult("ok", float(np.nanmean(per_anchor)), per_anchor,
                     float(np.nanmean(initial)), excluded, scores, target)
