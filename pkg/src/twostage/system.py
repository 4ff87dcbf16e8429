"""Two-stage composition: pool/feature allocation, the round protocol, and
exact regret decomposition into nominator and ranker terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agents import UniformAgent, make_agent
from .env import RoundData
from .seeding import derive_seed

IDENTITY_TOL = 1e-12

TRAIN_ON_ALL = "train-on-all"
TRAIN_ON_OWN = "train-on-own"
TRAIN_ON_CHOSEN = "train-on-chosen"
TRAINING_MODES = (TRAIN_ON_ALL, TRAIN_ON_OWN, TRAIN_ON_CHOSEN)


@dataclass
class PoolAllocation:
    """Per-nominator arm-id sets; union must cover the full arm set."""

    pools: list[frozenset[int]]
    n_arms: int

    def __post_init__(self):
        all_arms = set()
        for i, pool in enumerate(self.pools):
            if not pool:
                raise ValueError(f"pool {i} is empty")
            if any(not 0 <= a < self.n_arms for a in pool):
                raise ValueError(f"pool {i} contains out-of-range arm ids")
            all_arms |= pool
        if all_arms != set(range(self.n_arms)):
            raise ValueError("pools must cover every arm")

    @property
    def n_pools(self) -> int:
        return len(self.pools)


@dataclass
class FeatureAllocation:
    """Per-nominator feature index sets, each of the same size."""

    subsets: list[np.ndarray]
    d: int

    def __post_init__(self):
        sizes = {len(s) for s in self.subsets}
        if len(sizes) != 1:
            raise ValueError("all feature subsets must have the same size")
        for sub in self.subsets:
            if len(set(sub.tolist())) != len(sub):
                raise ValueError("feature subset contains duplicates")
            if any(not 0 <= j < self.d for j in sub):
                raise ValueError("feature index out of range")

    @property
    def s(self) -> int:
        return len(self.subsets[0])


def pool_allocate(n_arms: int, n_pools: int, rng: np.random.Generator) -> PoolAllocation:
    """Randomly permute arms into n_pools disjoint pools of near-equal size.

    Pool sizes are floor(n_arms / n_pools); each leftover arm goes to one of
    the first pools, so sizes differ by at most one.
    """
    if not 1 <= n_pools <= n_arms:
        raise ValueError("need 1 <= n_pools <= n_arms")
    perm = rng.permutation(n_arms)
    base = n_arms // n_pools
    rem = n_arms - n_pools * base
    pools, off = [], 0
    for i in range(n_pools):
        size = base + (1 if i < rem else 0)
        pools.append(frozenset(perm[off : off + size].tolist()))
        off += size
    return PoolAllocation(pools, n_arms)


def feature_allocate(d: int, s: int, n_pools: int, rng: np.random.Generator) -> FeatureAllocation:
    """Permute features into n_pools blocks of size min(s, floor(d/n_pools)),
    then top each block up to size s with uniform draws from the remaining features.
    """
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    perm = rng.permutation(d)
    s_base = min(s, d // n_pools)
    subsets = []
    for i in range(n_pools):
        base = perm[i * s_base : (i + 1) * s_base]
        if s_base < s:
            rest = np.setdiff1d(np.arange(d), base)
            extra = rng.choice(rest, size=s - s_base, replace=False)
            base = np.concatenate([base, extra])
        subsets.append(np.sort(base))
    return FeatureAllocation(subsets, d)


def training_weight(mode: str, pool: frozenset[int], chosen: int, proposed: int) -> float:
    if mode == TRAIN_ON_ALL:
        return 1.0
    if mode == TRAIN_ON_OWN:
        return 1.0 if chosen in pool else 0.0
    if mode == TRAIN_ON_CHOSEN:
        return 1.0 if chosen == proposed else 0.0
    raise ValueError(f"unknown training mode: {mode!r}")


@dataclass
class LedgerRecord:
    t: int
    chosen: int
    reward: float
    candidate_pool: tuple[int, ...]
    multiplicity: dict[int, int]
    regret_2s: float
    regret_nom: float
    regret_rank: float


@dataclass
class RegretLedger:
    """Per-round regret records satisfying the exact two-stage decomposition.

    All regret terms use the environment's expected rewards: the two-stage
    term is best-overall minus chosen, and it splits into best-overall minus
    best-candidate (nominator term) plus best-candidate minus chosen (ranker
    term). Ties for best candidate break toward the chosen arm.
    """

    records: list[LedgerRecord] = field(default_factory=list)
    cum_2s: float = 0.0
    cum_nom: float = 0.0
    cum_rank: float = 0.0

    def append(
        self,
        data: RoundData,
        chosen: int,
        candidate_pool: Sequence[int],
        multiplicity: dict[int, int] | None = None,
    ) -> LedgerRecord:
        expected = data.expected_rewards
        pool = tuple(sorted(candidate_pool))
        r_star = float(expected.max())
        r_chosen = float(expected[chosen])
        best_cand = float(expected[list(pool)].max())
        if r_chosen >= best_cand:
            best_cand = r_chosen
        regret_2s = r_star - r_chosen
        regret_nom = r_star - best_cand
        regret_rank = best_cand - r_chosen
        if abs(regret_2s - (regret_nom + regret_rank)) > IDENTITY_TOL:
            raise AssertionError("regret decomposition identity violated")
        rec = LedgerRecord(
            t=data.t,
            chosen=int(chosen),
            reward=float(data.rewards[chosen]),
            candidate_pool=pool,
            multiplicity=multiplicity or {},
            regret_2s=regret_2s,
            regret_nom=regret_nom,
            regret_rank=regret_rank,
        )
        self.cum_2s += regret_2s
        self.cum_nom += regret_nom
        self.cum_rank += regret_rank
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def csv_rows(self, run_id: str, seed: int) -> list[dict]:
        rows, c2, cn, cr = [], 0.0, 0.0, 0.0
        for rec in self.records:
            c2 += rec.regret_2s
            cn += rec.regret_nom
            cr += rec.regret_rank
            rows.append(
                {
                    "run_id": run_id,
                    "seed": seed,
                    "t": rec.t,
                    "chosen_arm": rec.chosen,
                    "reward": rec.reward,
                    "regret_2s": rec.regret_2s,
                    "regret_nom": rec.regret_nom,
                    "regret_rank": rec.regret_rank,
                    "cum_regret_2s": c2,
                    "cum_regret_nom": cn,
                    "cum_regret_rank": cr,
                }
            )
        return rows


LEDGER_CSV_COLUMNS = [
    "run_id",
    "seed",
    "t",
    "chosen_arm",
    "reward",
    "regret_2s",
    "regret_nom",
    "regret_rank",
    "cum_regret_2s",
    "cum_regret_nom",
    "cum_regret_rank",
]


class TwoStageSystem:
    """A ranker over full features composed with pool-restricted nominators."""

    def __init__(
        self,
        ranker,
        nominators: Sequence,
        pools: PoolAllocation,
        features: FeatureAllocation,
        training_mode: str = TRAIN_ON_ALL,
    ):
        if len(nominators) != pools.n_pools or len(nominators) != len(features.subsets):
            raise ValueError("nominator, pool, and feature-subset counts must match")
        if training_mode not in TRAINING_MODES:
            raise ValueError(f"unknown training mode: {training_mode!r}")
        self.ranker = ranker
        self.nominators = list(nominators)
        self.pools = pools
        self.features = features
        self.training_mode = training_mode

    def round(self, data: RoundData, rng: np.random.Generator) -> tuple[int, list[int]]:
        """Run one round; returns the served arm and the raw nomination list."""
        proposals = []
        for agent, pool, subset in zip(self.nominators, self.pools.pools, self.features.subsets):
            local = data.contexts[:, subset]
            proposals.append(agent.select(local, pool, rng))
        candidates = sorted(set(proposals))
        chosen = self.ranker.select(data.contexts, candidates, rng)
        reward = float(data.rewards[chosen])
        self.ranker.update(data.contexts, chosen, reward, candidates)
        for agent, pool, subset, proposed in zip(
            self.nominators, self.pools.pools, self.features.subsets, proposals
        ):
            w = training_weight(self.training_mode, pool, chosen, proposed)
            if w == 0.0:
                continue
            local = data.contexts[:, subset]
            # PG updates need the served arm in the eligible set even when it
            # fell outside the pool (train-on-all).
            eligible = pool if chosen in pool else pool | {chosen}
            agent.update(local, chosen, reward, eligible, w)
        return chosen, proposals


class SingleStageSystem:
    """One agent choosing directly from the full arm set on a feature subset."""

    def __init__(self, agent, subset: np.ndarray, n_arms: int):
        self.agent = agent
        self.subset = np.sort(np.asarray(subset, dtype=int))
        self.arms = frozenset(range(n_arms))

    def round(self, data: RoundData, rng: np.random.Generator) -> tuple[int, list[int]]:
        local = data.contexts[:, self.subset]
        chosen = self.agent.select(local, self.arms, rng)
        self.agent.update(local, chosen, float(data.rewards[chosen]), self.arms)
        return chosen, [chosen]


def two_stage_round(
    system: TwoStageSystem,
    data: RoundData,
    rng: np.random.Generator,
    ledger: RegretLedger,
) -> tuple[int, LedgerRecord]:
    chosen, proposals = system.round(data, rng)
    counts: dict[int, int] = {}
    for p in proposals:
        counts[p] = counts.get(p, 0) + 1
    record = ledger.append(data, chosen, sorted(counts), multiplicity=counts)
    return chosen, record


@dataclass
class SystemSpec:
    """Agent composition parameters for one experiment run."""

    stages: str = "two-stage"
    ranker: str = "ucb"
    nominator: str = "greedy"
    n_nominators: int = 5
    s: int | None = None
    training_mode: str = TRAIN_ON_ALL
    alpha: float = 0.01
    lam: float = 0.01
    pg_learning_rate: float = 1.0

    def __post_init__(self):
        if self.stages not in ("single-stage", "two-stage"):
            raise ValueError(f"stages must be 'single-stage' or 'two-stage', got {self.stages!r}")
        if self.training_mode not in TRAINING_MODES:
            raise ValueError(f"unknown training mode: {self.training_mode!r}")


def build_system(spec: SystemSpec, env, seed: int):
    """Instantiate agents and allocations for ``spec`` against ``env``."""
    d = env.dim
    s = spec.s if spec.s is not None else d
    alloc_rng = np.random.default_rng(derive_seed(seed, 1))
    if spec.stages == "single-stage":
        agent = make_agent(spec.ranker, s, spec.alpha, spec.lam, spec.pg_learning_rate)
        subset = feature_allocate(d, s, 1, alloc_rng).subsets[0]
        return SingleStageSystem(agent, subset, env.n_arms)
    if spec.n_nominators > env.n_arms:
        raise ValueError("more nominators than arms")
    pools = pool_allocate(env.n_arms, spec.n_nominators, alloc_rng)
    feats = feature_allocate(d, s, spec.n_nominators, alloc_rng)
    ranker = make_agent(spec.ranker, d, spec.alpha, spec.lam, spec.pg_learning_rate)
    noms = [
        make_agent(spec.nominator, s, spec.alpha, spec.lam, spec.pg_learning_rate)
        for _ in range(spec.n_nominators)
    ]
    return TwoStageSystem(ranker, noms, pools, feats, spec.training_mode)


def run_rounds(system, env, T: int, seed: int) -> RegretLedger:
    """Drive ``system`` for T rounds on ``env``; deterministic given seed."""
    ledger = RegretLedger()
    rng = np.random.default_rng(derive_seed(seed, 2))
    for t in range(1, T + 1):
        data = env.round_data(t)
        chosen, proposals = system.round(data, rng)
        counts: dict[int, int] = {}
        for p in proposals:
            counts[p] = counts.get(p, 0) + 1
        ledger.append(data, chosen, sorted(counts), multiplicity=counts)
    return ledger


def run_experiment(
    env_factory,
    spec: SystemSpec,
    T: int,
    seed: int,
    uniform_baseline: bool = True,
) -> dict:
    """Run one (system, seed) cell: returns the ledger plus a summary dict.

    ``env_factory(seed)`` must build a fresh environment for the given seed.
    The uniform baseline replays the same environment seed with a uniform
    single-stage policy to report relative regret.
    """
    env = env_factory(derive_seed(seed, 0))
    system = build_system(spec, env, seed)
    ledger = run_rounds(system, env, T, seed)
    summary = {
        "T": T,
        "seed": seed,
        "regret_2s": ledger.cum_2s,
        "regret_nom": ledger.cum_nom,
        "regret_rank": ledger.cum_rank,
    }
    if uniform_baseline:
        baseline_env = env_factory(derive_seed(seed, 0))
        baseline = SingleStageSystem(UniformAgent(), np.arange(env.dim), env.n_arms)
        uniform_ledger = run_rounds(baseline, baseline_env, T, derive_seed(seed, 3))
        summary["uniform_regret_2s"] = uniform_ledger.cum_2s
        summary["relative_regret"] = relative_regret(ledger, [uniform_ledger])
    return {"ledger": ledger, "summary": summary}


def relative_regret(ledger: RegretLedger, uniform_ledgers: Sequence[RegretLedger]) -> float:
    """Cumulative regret divided by the mean uniform-policy regret.

    Returns NaN when the uniform denominator is zero (degenerate environment).
    """
    lengths = {len(l) for l in uniform_ledgers} | {len(ledger)}
    if len(lengths) != 1:
        raise ValueError("ledgers must cover the same horizon")
    denom = float(np.mean([l.cum_2s for l in uniform_ledgers]))
    if denom == 0.0:
        return math.nan
    return ledger.cum_2s / denom


def candidate_coverage_probability(
    n_pools: int,
    frac_optimal: float,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo P(at least one optimal arm nominated) for uniform nominators.

    Models disjoint pools each containing an ``frac_optimal`` share of optimal
    arms, so each nominator independently hits one with that probability.
    """
    if not 0.0 < frac_optimal < 1.0:
        raise ValueError("frac_optimal must lie strictly between 0 and 1")
    hits = 0
    chunk = 100_000
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        hits += int(np.any(rng.random((n, n_pools)) < frac_optimal, axis=1).sum())
        done += n
    return hits / trials
