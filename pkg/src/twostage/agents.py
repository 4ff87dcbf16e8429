"""Single-model bandit policies: ridge-based UCB/Greedy, policy gradient, uniform.

Each policy works standalone on a full arm set or as a two-stage component
restricted to an arm pool and a feature subset. Selection functions take an
explicit ``eligible`` arm-id sequence and an rng for tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

TIE_TOL = 1e-12
RESOLVE_EVERY = 1024


@dataclass
class UcbParams:
    """Exploration bonus and base (pre-scaling) ridge regularizer."""

    alpha: float = 0.01
    lam: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


class RidgeState:
    """Running ridge-regression estimate with weighted observations.

    Maintains the inverse regularized Gram matrix by rank-one updates
    (O(dim^2) per observation) with a full re-solve every RESOLVE_EVERY
    updates to bound numerical drift.
    """

    def __init__(self, dim: int, lam_effective: float):
        if dim < 1:
            raise ValueError("dim must be positive")
        if lam_effective <= 0:
            raise ValueError("lam_effective must be positive")
        self.dim = dim
        self.lam_effective = float(lam_effective)
        self.gram = lam_effective * np.eye(dim)
        self.sigma = np.eye(dim) / lam_effective
        self.xr = np.zeros(dim)
        self.theta_hat = np.zeros(dim)
        self.n_obs = 0
        self._since_resolve = 0

    def update(self, x: np.ndarray, r: float, w: float = 1.0) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-vector, got shape {x.shape}")
        if not (np.all(np.isfinite(x)) and np.isfinite(r) and np.isfinite(w)):
            raise ValueError("non-finite observation")
        if w < 0:
            raise ValueError("weight must be nonnegative")
        if w == 0.0:
            return
        self.gram += w * np.outer(x, x)
        self.xr += w * r * x
        sx = self.sigma @ x
        self.sigma -= np.outer(sx, sx) * (w / (1.0 + w * float(x @ sx)))
        self.n_obs += 1
        self._since_resolve += 1
        if self._since_resolve >= RESOLVE_EVERY:
            self.resolve()
        else:
            self.theta_hat = self.sigma @ self.xr

    def resolve(self) -> None:
        """Recompute the inverse Gram and estimate from scratch."""
        self.sigma = np.linalg.inv(self.gram)
        self.sigma = 0.5 * (self.sigma + self.sigma.T)
        self.theta_hat = self.sigma @ self.xr
        self._since_resolve = 0


def ridge_update(state: RidgeState, x: np.ndarray, r: float, w: float = 1.0) -> RidgeState:
    state.update(x, r, w)
    return state


def _argmax_tiebreak(scores: np.ndarray, eligible: np.ndarray, rng: np.random.Generator) -> int:
    best = scores.max()
    ties = np.flatnonzero(scores >= best - TIE_TOL)
    if len(ties) == 1:
        return int(eligible[ties[0]])
    return int(eligible[rng.choice(ties)])


def ucb_select(
    state: RidgeState,
    params: UcbParams,
    contexts: np.ndarray,
    eligible: Sequence[int],
    rng: np.random.Generator,
) -> int:
    """Pick argmax of <theta_hat, x_a> + alpha * sqrt(x_a^T Sigma x_a) over eligible arms."""
    eligible = np.asarray(sorted(eligible), dtype=int)
    if eligible.size == 0:
        raise ValueError("eligible arm set is empty")
    xs = contexts[eligible]
    scores = xs @ state.theta_hat
    if params.alpha > 0:
        quad = np.einsum("ij,jk,ik->i", xs, state.sigma, xs)
        scores = scores + params.alpha * np.sqrt(np.maximum(quad, 0.0))
    return _argmax_tiebreak(scores, eligible, rng)


def greedy_select(
    state: RidgeState,
    contexts: np.ndarray,
    eligible: Sequence[int],
    rng: np.random.Generator,
) -> int:
    return ucb_select(state, UcbParams(alpha=0.0, lam=state.lam_effective), contexts, eligible, rng)


@dataclass
class PgState:
    """Logistic-policy parameters for single-step policy gradient."""

    theta: np.ndarray
    learning_rate: float

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _softmax_probs(state: PgState, contexts: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    logits = contexts[eligible] @ state.theta
    logits -= logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def pg_select(
    state: PgState,
    contexts: np.ndarray,
    eligible: Sequence[int],
    rng: np.random.Generator,
) -> int:
    eligible = np.asarray(sorted(eligible), dtype=int)
    if eligible.size == 0:
        raise ValueError("eligible arm set is empty")
    probs = _softmax_probs(state, contexts, eligible)
    return int(rng.choice(eligible, p=probs))


def pg_update(
    state: PgState,
    contexts: np.ndarray,
    chosen: int,
    r: float,
    eligible: Sequence[int],
    w: float = 1.0,
) -> PgState:
    """One ascent step on r * grad log pi(chosen), using only this tuple."""
    eligible = np.asarray(sorted(eligible), dtype=int)
    if chosen not in eligible:
        raise ValueError(f"chosen arm {chosen} not in eligible set")
    if w == 0.0 or r == 0.0:
        return state
    probs = _softmax_probs(state, contexts, eligible)
    grad = r * (contexts[chosen] - probs @ contexts[eligible])
    state.theta = state.theta + state.learning_rate * w * grad
    return state


def uniform_select(eligible: Sequence[int], rng: np.random.Generator) -> int:
    eligible = np.asarray(sorted(eligible), dtype=int)
    if eligible.size == 0:
        raise ValueError("eligible arm set is empty")
    return int(eligible[rng.integers(eligible.size)])


class LinearBanditAgent:
    """UCB (alpha > 0) or Greedy (alpha = 0) agent over a feature subspace.

    The effective ridge regularizer is the base lam multiplied by the input
    dimension unless ``scale_lambda_by_dim`` is disabled.
    """

    def __init__(self, dim: int, alpha: float, lam: float, scale_lambda_by_dim: bool = True):
        self.params = UcbParams(alpha=alpha, lam=lam)
        lam_effective = lam * dim if scale_lambda_by_dim else lam
        self.state = RidgeState(dim, lam_effective)

    def select(self, contexts: np.ndarray, eligible: Sequence[int], rng: np.random.Generator) -> int:
        return ucb_select(self.state, self.params, contexts, eligible, rng)

    def update(
        self,
        contexts: np.ndarray,
        chosen: int,
        reward: float,
        eligible: Sequence[int],
        w: float = 1.0,
    ) -> None:
        del eligible
        self.state.update(contexts[chosen], reward, w)


class PgAgent:
    """Softmax policy trained by single-sample policy gradient."""

    def __init__(self, dim: int, learning_rate: float):
        self.state = PgState(theta=np.zeros(dim), learning_rate=learning_rate)

    def select(self, contexts: np.ndarray, eligible: Sequence[int], rng: np.random.Generator) -> int:
        return pg_select(self.state, contexts, eligible, rng)

    def update(
        self,
        contexts: np.ndarray,
        chosen: int,
        reward: float,
        eligible: Sequence[int],
        w: float = 1.0,
    ) -> None:
        pg_update(self.state, contexts, chosen, reward, eligible, w)


class UniformAgent:
    """Memoryless uniform-random policy."""

    def select(self, contexts: np.ndarray, eligible: Sequence[int], rng: np.random.Generator) -> int:
        del contexts
        return uniform_select(eligible, rng)

    def update(self, contexts, chosen, reward, eligible, w: float = 1.0) -> None:
        pass


def make_agent(kind: str, dim: int, alpha: float, lam: float, pg_learning_rate: float):
    """Construct an agent by kind name: 'ucb', 'greedy', 'pg', or 'uniform'."""
    if kind == "ucb":
        return LinearBanditAgent(dim, alpha=alpha, lam=lam)
    if kind == "greedy":
        return LinearBanditAgent(dim, alpha=0.0, lam=lam)
    if kind == "pg":
        return PgAgent(dim, learning_rate=pg_learning_rate)
    if kind == "uniform":
        return UniformAgent()
    raise ValueError(f"unknown agent kind: {kind!r}")
