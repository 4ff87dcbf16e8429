"""Gaussian mixture-of-experts over two-tower experts with logistic gating.

Experts score a (user, item) pair as the dot product between a learned item
embedding and a projected subset of the user features. The gating network
produces per-(user, item) expert weights from summed user and item embeddings,
acting as a soft, learnable item-pool allocation; freezing it to an indicator
reproduces a fixed pool allocation exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import MultiLabelDataset
from .optim import make_optimizer
from .system import PoolAllocation

MAGIC_CHECKPOINT = b"TSMOE1"
ONE_HOT_LOGIT_GAP = 800.0  # exp(-800) underflows to exactly 0.0 in float64


@dataclass
class OfflineBatch:
    """Offline (user features, arm, binary reward) triples."""

    x: np.ndarray
    arms: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.arms.shape != (n,) or self.rewards.shape != (n,):
            raise ValueError("x, arms, and rewards must have matching first dimension")
        if n < 1:
            raise ValueError("batch must contain at least one triple")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "OfflineBatch":
        return OfflineBatch(self.x[idx], self.arms[idx], self.rewards[idx])


class MoEModel:
    """Expert and gating parameters; gating may be frozen to a fixed allocation."""

    def __init__(
        self,
        item_emb: np.ndarray,
        proj: np.ndarray,
        subsets: np.ndarray,
        gate_user: np.ndarray,
        gate_item: np.ndarray,
        gate_subset: np.ndarray,
        sigma: float,
        frozen_assignment: np.ndarray | None = None,
    ):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.item_emb = item_emb  # (N, n_arms, d_e)
        self.proj = proj  # (N, d_e, s)
        self.subsets = subsets  # (N, s)
        self.gate_user = gate_user  # (N, d_g)
        self.gate_item = gate_item  # (n_arms, N)
        self.gate_subset = gate_subset  # (d_g,)
        self.sigma = float(sigma)
        self.frozen_assignment = frozen_assignment

    @property
    def n_experts(self) -> int:
        return self.item_emb.shape[0]

    @property
    def n_arms(self) -> int:
        return self.item_emb.shape[1]

    @property
    def d_e(self) -> int:
        return self.item_emb.shape[2]

    @property
    def frozen(self) -> bool:
        return self.frozen_assignment is not None

    def trainable_params(self) -> dict[str, np.ndarray]:
        params = {"item_emb": self.item_emb, "proj": self.proj}
        if not self.frozen:
            params["gate_user"] = self.gate_user
            params["gate_item"] = self.gate_item
        return params


def init_moe(
    n_arms: int,
    d: int,
    n_experts: int,
    d_e: int,
    s: int,
    seed: int,
    sigma: float = 1.0,
    shared_subset: bool = False,
    gate_subset: Sequence[int] | None = None,
    frozen_pools: PoolAllocation | None = None,
) -> MoEModel:
    """Build a model with random projections, zero item embeddings, zero gating.

    Random N(0, 1/sqrt(d_e)) user projections break the expert symmetry while
    zero item embeddings keep initial predictions at zero, so an arm's early
    expert affinity reflects how well each expert's projection captures the
    arm's positive contexts rather than embedding-table noise (which would
    otherwise dominate and freeze the gating onto an arbitrary assignment).
    Each expert draws its own random s-subset of the user features unless
    ``shared_subset``; the gating network sees the full feature vector unless
    ``gate_subset`` restricts it. ``frozen_pools`` freezes the gating to the
    given allocation's indicator (bypassing the softmax entirely).
    """
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d_e)
    if shared_subset:
        sub = np.sort(rng.choice(d, size=s, replace=False))
        subsets = np.tile(sub, (n_experts, 1))
    else:
        subsets = np.stack(
            [np.sort(rng.choice(d, size=s, replace=False)) for _ in range(n_experts)]
        )
    gate_subset = (
        np.arange(d) if gate_subset is None else np.asarray(sorted(gate_subset), dtype=int)
    )
    frozen = None
    if frozen_pools is not None:
        frozen = assignment_from_pools(frozen_pools)
    return MoEModel(
        item_emb=np.zeros((n_experts, n_arms, d_e)),
        proj=scale * rng.standard_normal((n_experts, d_e, s)),
        subsets=subsets,
        gate_user=np.zeros((n_experts, len(gate_subset))),
        gate_item=np.zeros((n_arms, n_experts)),
        gate_subset=gate_subset,
        sigma=sigma,
        frozen_assignment=frozen,
    )


def assignment_from_pools(pools: PoolAllocation) -> np.ndarray:
    """Arm -> expert map for disjoint pools."""
    sizes = sum(len(p) for p in pools.pools)
    if sizes != pools.n_arms:
        raise ValueError("one-hot gating requires disjoint pools")
    assign = np.empty(pools.n_arms, dtype=int)
    for n, pool in enumerate(pools.pools):
        for a in pool:
            assign[a] = n
    return assign


def one_hot_gate_item(pools: PoolAllocation, n_experts: int) -> np.ndarray:
    """Finite item-gating logits whose softmax is exactly one-hot in float64."""
    assign = assignment_from_pools(pools)
    V = np.zeros((pools.n_arms, n_experts))
    V[np.arange(pools.n_arms), assign] = ONE_HOT_LOGIT_GAP
    return V


def expert_predictions(model: MoEModel, x: np.ndarray, arms: np.ndarray):
    """Per-expert predictions r_hat (N, B) and projected users (N, B, d_e)."""
    xs = x[:, model.subsets].transpose(1, 0, 2)  # (N, B, s)
    users = np.einsum("nbs,nes->nbe", xs, model.proj)
    rhat = np.einsum("nbe,nbe->nb", users, model.item_emb[:, arms, :])
    return rhat, users, xs


def gating_log_probs(model: MoEModel, x: np.ndarray, arms: np.ndarray) -> np.ndarray:
    """Log gating weights (N, B); -inf marks experts excluded by frozen gating."""
    if model.frozen:
        n_idx = np.arange(model.n_experts)[:, None]
        return np.where(model.frozen_assignment[arms][None, :] == n_idx, 0.0, -np.inf)
    logits = model.gate_user @ x[:, model.gate_subset].T + model.gate_item[arms].T
    return logits - _logsumexp(logits, axis=0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))


def moe_loglik(model: MoEModel, batch: OfflineBatch) -> float:
    """Average log of the gate-weighted Gaussian likelihood over the batch."""
    rhat, _, _ = expert_predictions(model, batch.x, batch.arms)
    logp = gating_log_probs(model, batch.x, batch.arms)
    gauss = -((batch.rewards[None, :] - rhat) ** 2) / (2.0 * model.sigma**2)
    return float(np.mean(_logsumexp(logp + gauss, axis=0)))


def moe_grad(model: MoEModel, batch: OfflineBatch) -> dict[str, np.ndarray]:
    """Exact gradient of moe_loglik for every trainable parameter."""
    B = len(batch)
    rhat, users, xs = expert_predictions(model, batch.x, batch.arms)
    logp = gating_log_probs(model, batch.x, batch.arms)
    gauss = -((batch.rewards[None, :] - rhat) ** 2) / (2.0 * model.sigma**2)
    joint = logp + gauss
    resp = np.exp(joint - _logsumexp(joint, axis=0))  # responsibilities (N, B)
    drhat = resp * (batch.rewards[None, :] - rhat) / (model.sigma**2 * B)
    emb_at = model.item_emb[:, batch.arms, :]  # (N, B, d_e)
    d_item = np.zeros_like(model.item_emb)
    weighted_users = drhat[:, :, None] * users
    for n in range(model.n_experts):
        np.add.at(d_item[n], batch.arms, weighted_users[n])
    d_proj = np.einsum("nbe,nbs->nes", drhat[:, :, None] * emb_at, xs)
    grads = {"item_emb": d_item, "proj": d_proj}
    if not model.frozen:
        dlogit = (resp - np.exp(logp)) / B
        grads["gate_user"] = dlogit @ batch.x[:, model.gate_subset]
        d_gate_item = np.zeros_like(model.gate_item)
        np.add.at(d_gate_item, batch.arms, dlogit.T)
        grads["gate_item"] = d_gate_item
    return grads


def moe_train(
    model: MoEModel,
    data: OfflineBatch,
    optimizer: str = "adam",
    learning_rate: float = 0.01,
    steps: int = 1000,
    batch_size: int = 4096,
    seed: int = 0,
    trace_every: int = 50,
    gate_learning_rate: float | None = None,
    sigma_anneal_from: float | None = None,
) -> list[tuple[int, float]]:
    """Run minibatch likelihood ascent in place; returns the loss trace.

    ``gate_learning_rate`` lets the gating parameters move on their own
    schedule (slower gating delays pool commitment until the experts carry
    signal). ``sigma_anneal_from`` applies deterministic annealing: the
    likelihood scale decays geometrically from that value to the model's own
    sigma, so experts differentiate before the gating commits. Aborts with a
    diagnostic if the objective becomes non-finite.
    """
    overrides = None
    if gate_learning_rate is not None:
        overrides = {"gate_user": gate_learning_rate, "gate_item": gate_learning_rate}
    opt = make_optimizer(optimizer, learning_rate, overrides)
    rng = np.random.default_rng(seed)
    params = model.trainable_params()
    sigma_end = model.sigma
    trace: list[tuple[int, float]] = []
    for step in range(steps):
        if sigma_anneal_from is not None and steps > 1:
            frac = step / (steps - 1)
            model.sigma = float(sigma_anneal_from * (sigma_end / sigma_anneal_from) ** frac)
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        batch = data.take(idx)
        grads = moe_grad(model, batch)
        opt.step(params, {k: -g for k, g in grads.items()})
        if step % trace_every == 0 or step == steps - 1:
            ll = moe_loglik(model, batch)
            if not np.isfinite(ll):
                raise RuntimeError(f"training diverged at step {step}: loglik={ll}")
            trace.append((step, ll))
    model.sigma = sigma_end
    return trace


def moe_score(model: MoEModel, x: np.ndarray, arms: Sequence[int]) -> np.ndarray:
    """Gate-weighted mean prediction for one user over the given arms."""
    arms = np.asarray(arms, dtype=int)
    xb = np.tile(np.asarray(x, dtype=float), (len(arms), 1))
    rhat, _, _ = expert_predictions(model, xb, arms)
    logp = gating_log_probs(model, xb, arms)
    return np.sum(np.exp(logp) * rhat, axis=0)


def moe_score_matrix(model: MoEModel, x: np.ndarray) -> np.ndarray:
    """Scores for every (example, arm) pair; (B, n_arms)."""
    B = x.shape[0]
    xs = x[:, model.subsets].transpose(1, 0, 2)
    users = np.einsum("nbs,nes->nbe", xs, model.proj)
    rhat = np.einsum("nbe,nae->nba", users, model.item_emb)  # (N, B, n_arms)
    if model.frozen:
        n_idx = np.arange(model.n_experts)[:, None]
        p = (model.frozen_assignment[None, :] == n_idx).astype(float)  # (N, n_arms)
        return np.einsum("nba,na->ba", rhat, p)
    logits = (model.gate_user @ x[:, model.gate_subset].T)[:, :, None] + model.gate_item.T[
        :, None, :
    ]
    logits -= _logsumexp(logits, axis=0)
    return np.einsum("nba,nba->ba", rhat, np.exp(logits))


def precision_recall_at_k(
    scores: np.ndarray,
    relevant: Sequence[set[int]],
    k: int,
) -> tuple[float, float]:
    """Mean precision@k and recall@k over examples; ties break toward lower arm id.

    Examples with an empty relevant set contribute zero to both means.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if scores.shape[0] != len(relevant):
        raise ValueError("one relevant set per score row required")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    precisions, recalls = [], []
    for row, rel in zip(order, relevant):
        if not rel:
            precisions.append(0.0)
            recalls.append(0.0)
            continue
        hits = len(set(row.tolist()) & rel)
        precisions.append(hits / k)
        recalls.append(hits / len(rel))
    return float(np.mean(precisions)), float(np.mean(recalls))


def build_offline_dataset(
    ds: MultiLabelDataset,
    arm_categories: Sequence[int],
    c: int,
    rng: np.random.Generator,
    balanced: bool = False,
) -> OfflineBatch:
    """Sample c examples per arm: reward 1 iff the arm's category is labeled.

    ``balanced`` draws half of each arm's examples from its positives (where
    available) instead of uniformly; the default is plain uniform sampling.
    """
    if c < 1:
        raise ValueError("need at least one example per arm")
    for cat in arm_categories:
        if not 0 <= cat < ds.n_categories:
            raise ValueError(f"unknown category id {cat}")
    xs, arms, rewards = [], [], []
    for arm, cat in enumerate(arm_categories):
        if balanced:
            pos = np.array([i for i, labs in enumerate(ds.labels) if cat in labs], dtype=int)
            n_pos = c // 2 if len(pos) else 0
            idx_pos = rng.choice(pos, size=n_pos, replace=True) if n_pos else np.empty(0, int)
            idx_uni = rng.integers(0, ds.n_examples, size=c - n_pos)
            idx = np.concatenate([idx_pos, idx_uni])
        else:
            idx = rng.integers(0, ds.n_examples, size=c)
        xs.append(ds.features[idx])
        arms.append(np.full(c, arm, dtype=int))
        rewards.append(np.array([float(cat in ds.labels[i]) for i in idx]))
    return OfflineBatch(np.concatenate(xs), np.concatenate(arms), np.concatenate(rewards))


def average_gating_weights(model: MoEModel, contexts: np.ndarray) -> np.ndarray:
    """Per-arm gating weight averaged over a context sample; (n_arms, N)."""
    if model.frozen:
        w = np.zeros((model.n_arms, model.n_experts))
        w[np.arange(model.n_arms), model.frozen_assignment] = 1.0
        return w
    logits = (model.gate_user @ contexts[:, model.gate_subset].T)[:, :, None] + model.gate_item.T[
        :, None, :
    ]
    logits -= _logsumexp(logits, axis=0)
    return np.exp(logits).mean(axis=1).T


def distill_allocation(model: MoEModel, contexts: np.ndarray) -> PoolAllocation:
    """Assign each arm to its highest average-gating expert.

    If an expert would end up with no arms, the arm least attached to its
    current pool (smallest winning-weight margin against the empty expert) is
    reassigned, keeping every pool nonempty.
    """
    weights = average_gating_weights(model, contexts)
    assign = np.argmax(weights, axis=1)
    for n in range(model.n_experts):
        if np.any(assign == n):
            continue
        margin = weights[np.arange(model.n_arms), assign] - weights[:, n]
        donors = np.array(
            [np.sum(assign == assign[a]) > 1 for a in range(model.n_arms)]
        )
        candidates = np.where(donors)[0]
        assign[candidates[np.argmin(margin[candidates])]] = n
    pools = [frozenset(np.where(assign == n)[0].tolist()) for n in range(model.n_experts)]
    return PoolAllocation(pools, model.n_arms)


def balanced_affinity_gating_init(
    model: MoEModel,
    data: OfflineBatch,
    logit_gap: float = 4.0,
    capacity_slack: float = 1.3,
) -> None:
    """Seed the item gating with a capacity-balanced arm-to-expert assignment.

    Each arm's affinity for an expert is the norm of the arm's mean positive
    context restricted to the expert's feature subset (how much of the arm's
    reward-relevant direction the expert can see at all). Arms
    greedily claim their best expert subject to a per-expert capacity of
    ``capacity_slack * n_arms / n_experts``, so two arm groups preferring the
    same expert cannot both lock onto it; the loser cascades to its runner-up.
    The assignment maximizes total affinity over expert slots (optimal
    balanced assignment), so groups of arms with a shared first choice move
    coherently to runner-up experts instead of interleaving. It only biases
    the softmax by ``logit_gap``; training remains free to reroute arms.
    No-op for frozen gating.
    """
    from scipy.optimize import linear_sum_assignment

    if model.frozen:
        return
    n_arms, N = model.n_arms, model.n_experts
    mean_pos = np.zeros((n_arms, data.x.shape[1]))
    for a in range(n_arms):
        mask = (data.arms == a) & (data.rewards > 0)
        if mask.any():
            mean_pos[a] = data.x[mask].mean(axis=0)
    affinity = np.linalg.norm(mean_pos[:, model.subsets], axis=2)  # (n_arms, N)
    capacity = int(np.ceil(capacity_slack * n_arms / N))
    slot_affinity = np.repeat(affinity, capacity, axis=1)  # slots per expert
    rows, cols = linear_sum_assignment(-slot_affinity)
    assigned = np.full(n_arms, 0)
    assigned[rows] = cols // capacity
    model.gate_item[:] = 0.0
    model.gate_item[np.arange(n_arms), assigned] = logit_gap


def cluster_consistency(pools: PoolAllocation, arm_clusters: Sequence[int]) -> float:
    """Fraction of arms matching their pool's plurality ground-truth cluster."""
    arm_clusters = np.asarray(arm_clusters)
    consistent = 0
    for pool in pools.pools:
        members = arm_clusters[sorted(pool)]
        _, counts = np.unique(members, return_counts=True)
        consistent += int(counts.max())
    return consistent / pools.n_arms


def save_checkpoint(model: MoEModel, path: str | Path) -> None:
    """Write the versioned binary container (magic TSMOE1, LE dims, f32 blocks)."""
    N, n_arms, d_e = model.item_emb.shape
    s = model.subsets.shape[1]
    d_g = len(model.gate_subset)
    with Path(path).open("wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<IBd", 1, 1 if model.frozen else 0, model.sigma))
        fh.write(struct.pack("<QQQQQ", N, n_arms, d_e, s, d_g))
        fh.write(model.subsets.astype("<u8").tobytes())
        fh.write(model.gate_subset.astype("<u8").tobytes())
        for block in (model.item_emb, model.proj, model.gate_user, model.gate_item):
            fh.write(block.astype("<f4").tobytes(order="C"))
        if model.frozen:
            fh.write(model.frozen_assignment.astype("<u8").tobytes())


def load_checkpoint(path: str | Path) -> MoEModel:
    data = Path(path).read_bytes()
    if data[: len(MAGIC_CHECKPOINT)] != MAGIC_CHECKPOINT:
        raise ValueError(f"{path}: bad magic, not a TSMOE1 checkpoint")
    off = len(MAGIC_CHECKPOINT)
    version, frozen_flag, sigma = struct.unpack_from("<IBd", data, off)
    off += struct.calcsize("<IBd")
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    N, n_arms, d_e, s, d_g = struct.unpack_from("<QQQQQ", data, off)
    off += 40

    def block(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    subsets = block(N * s, "<u8").reshape(N, s).astype(int)
    gate_subset = block(d_g, "<u8").astype(int)
    item_emb = block(N * n_arms * d_e, "<f4").reshape(N, n_arms, d_e).astype(float)
    proj = block(N * d_e * s, "<f4").reshape(N, d_e, s).astype(float)
    gate_user = block(N * d_g, "<f4").reshape(N, d_g).astype(float)
    gate_item = block(n_arms * N, "<f4").reshape(n_arms, N).astype(float)
    frozen = block(n_arms, "<u8").astype(int) if frozen_flag else None
    return MoEModel(item_emb, proj, subsets, gate_user, gate_item, gate_subset, sigma, frozen)
