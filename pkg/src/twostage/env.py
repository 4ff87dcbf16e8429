"""Reward-generating environments and multi-label dataset handling.

Environments are immutable after construction: all randomness for round ``t``
is derived statelessly from ``(seed, t)``, so rounds can be generated out of
order or from multiple workers without coordination.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC_FEATURES = b"TSBF1"

# Fixed context matrices for the analytic two-nominator constructions.
# Pools are A_1 = {arm 0} and A_2 = {arms 1..}, nominators restricted to the
# last two feature columns.
THREE_ARM_X = np.array(
    [
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)
FOUR_ARM_X = np.array(
    [
        [1.0, 0.0, 0.0, -1.0],
        [0.0, 1.0, 0.0, -1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
CONSTRUCTION_MATRICES = {"three-arm": THREE_ARM_X, "four-arm": FOUR_ARM_X}


def _round_rng(seed: int, t: int) -> np.random.Generator:
    # Stateless per-round stream; construction-time draws use t = 0, rounds t >= 1.
    return np.random.default_rng([seed, t])


@dataclass(frozen=True)
class RoundData:
    """Per-round bandit data: one context row per arm plus sampled rewards.

    ``expected_rewards`` is privileged information for regret accounting only;
    agents must never read it.
    """

    t: int
    contexts: np.ndarray
    rewards: np.ndarray
    expected_rewards: np.ndarray

    def __post_init__(self):
        n, d = self.contexts.shape
        if self.rewards.shape != (n,) or self.expected_rewards.shape != (n,):
            raise ValueError("reward vectors must have one entry per arm")
        if not np.all(np.isfinite(self.contexts)):
            raise ValueError("contexts contain non-finite entries")


class SyntheticLinearEnv:
    """Linear reward model with i.i.d. standard normal contexts.

    Rewards are ``<theta_star, x_{ta}> + eps`` with ``eps ~ N(0, noise_std^2)``
    and ``theta_star`` drawn uniformly from the unit sphere at construction.
    """

    def __init__(self, d: int, n_arms: int, noise_std: float, seed: int):
        if d < 1 or n_arms < 1:
            raise ValueError("d and n_arms must be positive")
        if noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.d = d
        self.n_arms = n_arms
        self.noise_std = float(noise_std)
        self.seed = int(seed)
        raw = _round_rng(seed, 0).standard_normal(d)
        self.theta_star = raw / np.linalg.norm(raw)

    @property
    def dim(self) -> int:
        return self.d

    def round_data(self, t: int) -> RoundData:
        if t < 1:
            raise ValueError("round index starts at 1")
        rng = _round_rng(self.seed, t)
        contexts = rng.standard_normal((self.n_arms, self.d))
        expected = contexts @ self.theta_star
        rewards = expected + rng.normal(0.0, self.noise_std, size=self.n_arms)
        return RoundData(t, contexts, rewards, expected)


@dataclass
class MultiLabelDataset:
    """Feature matrix plus one label set per row over an integer category vocabulary."""

    features: np.ndarray
    labels: list[frozenset[int]]
    n_categories: int
    standardized: bool = False
    cluster_of_category: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.labels) != self.features.shape[0]:
            raise ValueError(
                f"row-count mismatch: {self.features.shape[0]} feature rows vs "
                f"{len(self.labels)} label lines"
            )
        for i, labs in enumerate(self.labels):
            for c in labs:
                if not 0 <= c < self.n_categories:
                    raise ValueError(f"label id {c} out of vocabulary on row {i}")

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def standardize_features(ds: MultiLabelDataset) -> MultiLabelDataset:
    """Standardize with one scalar mean/std computed over all matrix entries."""
    if ds.features.size == 0:
        raise ValueError("cannot standardize an empty feature matrix")
    mean = float(ds.features.mean())
    std = float(ds.features.std())
    if std == 0.0:
        raise ValueError("degenerate data: zero standard deviation over all entries")
    return MultiLabelDataset(
        features=(ds.features - mean) / std,
        labels=ds.labels,
        n_categories=ds.n_categories,
        standardized=True,
        cluster_of_category=ds.cluster_of_category,
    )


def load_dataset(features_path: str | Path, labels_path: str | Path) -> MultiLabelDataset:
    """Load a features CSV (no header, '.' decimals) and a labels file.

    Labels: one line per example, comma-separated nonnegative category ids,
    empty line = empty set. Parsing is strict; malformed rows raise.
    """
    features_path, labels_path = Path(features_path), Path(labels_path)
    rows: list[list[float]] = []
    with features_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{features_path}:{lineno}: non-numeric feature: {exc}")
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{features_path}:{lineno}: inconsistent column count")
    labels: list[frozenset[int]] = []
    max_label = -1
    with labels_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                labels.append(frozenset())
                continue
            try:
                ids = frozenset(int(v) for v in line.split(","))
            except ValueError as exc:
                raise ValueError(f"{labels_path}:{lineno}: bad label id: {exc}")
            if any(c < 0 for c in ids):
                raise ValueError(f"{labels_path}:{lineno}: negative label id")
            labels.append(ids)
            max_label = max(max_label, max(ids))
    features = np.array(rows, dtype=float) if rows else np.zeros((0, 0))
    if len(labels) != features.shape[0]:
        raise ValueError(
            f"row-count mismatch: {features.shape[0]} feature rows vs {len(labels)} label lines"
        )
    return MultiLabelDataset(features, labels, n_categories=max_label + 1)


def save_features_binary(features: np.ndarray, path: str | Path) -> None:
    """Write a feature matrix in the binary format (magic TSBF1, u64 dims, f32 LE)."""
    features = np.asarray(features, dtype=np.float32)
    with Path(path).open("wb") as fh:
        fh.write(MAGIC_FEATURES)
        fh.write(struct.pack("<QQ", features.shape[0], features.shape[1]))
        fh.write(features.astype("<f4").tobytes(order="C"))


def load_features_binary(path: str | Path) -> np.ndarray:
    """Read a feature matrix written by :func:`save_features_binary`."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC_FEATURES)] != MAGIC_FEATURES:
        raise ValueError(f"{path}: bad magic, not a TSBF1 feature file")
    off = len(MAGIC_FEATURES)
    n_rows, n_cols = struct.unpack_from("<QQ", data, off)
    off += 16
    expected = n_rows * n_cols * 4
    if len(data) - off != expected:
        raise ValueError(f"{path}: truncated payload ({len(data) - off} != {expected} bytes)")
    values = np.frombuffer(data, dtype="<f4", offset=off)
    return values.reshape(n_rows, n_cols).astype(float)


class DatasetBanditEnv:
    """Bandit conversion of a multi-label dataset.

    Each round samples one example per arm uniformly from the dataset; the
    arm's context is that example's feature row and its reward is 1 iff the
    arm's category is in the example's label set. Rewards are deterministic
    given the contexts, so expected rewards equal realized rewards.
    """

    def __init__(
        self,
        ds: MultiLabelDataset,
        arm_categories: Sequence[int],
        seed: int,
        fixed_instance: bool = False,
    ):
        for c in arm_categories:
            if not 0 <= c < ds.n_categories:
                raise ValueError(f"unknown category id {c}")
        self.ds = ds
        self.arm_categories = list(arm_categories)
        self.n_arms = len(self.arm_categories)
        self.seed = int(seed)
        self.fixed_instance = fixed_instance

    @property
    def dim(self) -> int:
        return self.ds.d

    def round_data(self, t: int) -> RoundData:
        if t < 1:
            raise ValueError("round index starts at 1")
        rng = _round_rng(self.seed, 1 if self.fixed_instance else t)
        idx = rng.integers(0, self.ds.n_examples, size=self.n_arms)
        contexts = self.ds.features[idx]
        rewards = np.array(
            [float(cat in self.ds.labels[i]) for i, cat in zip(idx, self.arm_categories)]
        )
        return RoundData(t, contexts, rewards, rewards.copy())


def multilabel_to_bandit(
    ds: MultiLabelDataset,
    arm_categories: Sequence[int],
    seed: int,
    fixed_instance: bool = False,
) -> DatasetBanditEnv:
    return DatasetBanditEnv(ds, arm_categories, seed, fixed_instance)


class FixedConstructionEnv:
    """Environment over one of the fixed context matrices.

    In the supervised setting every round emits the full matrix with all
    rewards revealed. In the bandit setting each round draws an arm index j
    uniformly and emits the matrix with every row except the j-th zeroed, so
    the mean reward vector has exactly one strictly positive component.
    Rewards are Bernoulli(mean) by default (mean-zero noise, values in [0,1]);
    ``noise="none"`` yields the means themselves.
    """

    def __init__(
        self,
        kind: str,
        rbar: Sequence[float],
        setting: str = "supervised",
        noise: str = "bernoulli",
        seed: int = 0,
    ):
        if kind not in CONSTRUCTION_MATRICES:
            raise ValueError(f"unknown construction kind: {kind!r}")
        if setting not in ("supervised", "bandit"):
            raise ValueError(f"setting must be 'supervised' or 'bandit', got {setting!r}")
        if noise not in ("bernoulli", "none"):
            raise ValueError(f"noise must be 'bernoulli' or 'none', got {noise!r}")
        X = CONSTRUCTION_MATRICES[kind]
        rbar = np.asarray(rbar, dtype=float)
        if rbar.shape != (X.shape[0],):
            raise ValueError(f"rbar must have {X.shape[0]} entries for {kind}")
        if np.any(rbar < 0) or np.any(rbar > 1):
            raise ValueError("rbar entries must lie in [0, 1]")
        self.kind = kind
        self.X = X
        self.rbar = rbar
        self.setting = setting
        self.noise = noise
        self.seed = int(seed)
        self.n_arms = X.shape[0]
        self.theta_star = np.linalg.solve(X, rbar)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def masked_context(self, j: int) -> np.ndarray:
        out = np.zeros_like(self.X)
        out[j] = self.X[j]
        return out

    def round_data(self, t: int) -> RoundData:
        if t < 1:
            raise ValueError("round index starts at 1")
        rng = _round_rng(self.seed, t)
        if self.setting == "bandit":
            j = int(rng.integers(self.n_arms))
            contexts = self.masked_context(j)
            expected = contexts @ self.theta_star
        else:
            contexts = self.X
            expected = self.rbar
        if self.noise == "bernoulli":
            rewards = (rng.random(self.n_arms) < expected).astype(float)
        else:
            rewards = expected.astype(float)
        return RoundData(t, contexts, rewards.copy(), expected.copy())


def fixed_construction(
    kind: str,
    rbar: Sequence[float],
    setting: str = "supervised",
    noise: str = "bernoulli",
    seed: int = 0,
) -> FixedConstructionEnv:
    return FixedConstructionEnv(kind, rbar, setting=setting, noise=noise, seed=seed)


def misspecified_l2_error(
    d: int,
    s: int,
    n_samples: int,
    rng: np.random.Generator,
    n_repeats: int = 100,
) -> float:
    """Monte-Carlo estimate of the best-achievable L2 error under a feature subset.

    Averages, over random unit-sphere weight vectors and random s-subsets, the
    squared residual of least squares fitted on the restricted features of
    noise-free linear rewards; the analytic value is sqrt(1 - s/d).
    """
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    per = max(n_samples // n_repeats, 10 * d)
    total = 0.0
    for _ in range(n_repeats):
        raw = rng.standard_normal(d)
        theta = raw / np.linalg.norm(raw)
        subset = rng.choice(d, size=s, replace=False)
        x = rng.standard_normal((per, d))
        r = x @ theta
        xs = x[:, subset]
        beta, *_ = np.linalg.lstsq(xs, r, rcond=None)
        resid = r - xs @ beta
        # n/(n - s) correction: the fit consumes s degrees of freedom.
        total += float(np.sum(resid**2)) / max(per - s, 1)
    return float(np.sqrt(total / n_repeats))


def synth_multilabel_generate(
    n_examples: int,
    d: int,
    n_categories: int,
    clusters: int,
    seed: int,
    power_exponent: float = 0.8,
    labels_per_example: float = 3.0,
    cluster_affinity: float = 0.8,
    cluster_scale: float = 3.0,
    center_support: int | None = None,
    cluster_size_exponent: float = 0.0,
    direction_strength: float = 0.0,
    direction_support: int | None = None,
    direction_rank: int = 3,
) -> MultiLabelDataset:
    """Generate a cluster-structured multi-label dataset at desk scale.

    Features are Gaussian blobs (one per cluster). Each category has a home
    cluster (round-robin by frequency rank) and a power-law base weight
    ``rank^(-power_exponent)``; label draws for an example mix the home
    cluster's categories with the global pool per ``cluster_affinity``.
    ``direction_strength`` tilts each category's draw weight along a random
    direction drawn from a low-dimensional subspace shared by its home
    cluster, so category relevance varies inside a cluster (and transfers
    across a cluster's categories) while the marginal power law is kept up to
    the mild flattening that per-example label sets impose on head categories.
    ``direction_support`` confines each cluster's subspace to that many
    feature coordinates, making the reward structure feature-sparse.
    ``center_support`` makes each blob center itself sparse (norm preserved),
    so cluster membership is detectable only through that cluster's own
    coordinates. Deterministic given the seed.
    """
    if clusters > n_categories:
        raise ValueError("clusters must not exceed n_categories")
    if not 0.0 <= cluster_affinity <= 1.0:
        raise ValueError("cluster_affinity must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0])
    weights = np.arange(1, n_categories + 1, dtype=float) ** (-power_exponent)
    global_q = weights / weights.sum()
    if cluster_size_exponent > 0:
        # Power-law cluster sizes (largest-remainder apportionment), with
        # category ranks spread across clusters by a fixed random draw.
        share = np.arange(1, clusters + 1, dtype=float) ** (-cluster_size_exponent)
        share /= share.sum()
        sizes = np.floor(share * n_categories).astype(int)
        rem = n_categories - sizes.sum()
        order = np.argsort(-(share * n_categories - sizes), kind="stable")
        sizes[order[:rem]] += 1
        sizes = np.maximum(sizes, 1)
        while sizes.sum() > n_categories:
            sizes[np.argmax(sizes)] -= 1
        home = rng.permutation(np.repeat(np.arange(clusters), sizes))
    else:
        home = np.arange(n_categories) % clusters
    # Per-cluster draw distribution: affinity-weighted mixture of the home
    # categories' (renormalized) weights and the global power law.
    cluster_q = np.zeros((clusters, n_categories))
    for k in range(clusters):
        own = np.where(home == k, weights, 0.0)
        cluster_q[k] = cluster_affinity * own / own.sum() + (1 - cluster_affinity) * global_q
    cluster_coords: list[np.ndarray] = []
    if center_support is None:
        centers = cluster_scale * rng.standard_normal((clusters, d)) / np.sqrt(d)
        for k in range(clusters):
            cluster_coords.append(np.arange(d))
    else:
        support = min(center_support, d)
        centers = np.zeros((clusters, d))
        for k in range(clusters):
            coords = rng.choice(d, size=support, replace=False)
            centers[k, coords] = cluster_scale * rng.standard_normal(support) / np.sqrt(support)
            cluster_coords.append(coords)
    member = rng.integers(0, clusters, size=n_examples)
    offsets = rng.standard_normal((n_examples, d))
    features = centers[member] + offsets
    counts = rng.poisson(labels_per_example, size=n_examples)
    log_q = np.log(np.maximum(cluster_q, 1e-300))[member]
    if direction_strength > 0:
        subspace_dim = direction_rank
        basis = np.zeros((clusters, subspace_dim, d))
        for k in range(clusters):
            if direction_support is not None:
                coords = rng.choice(d, size=min(direction_support, d), replace=False)
            else:
                # Confine the modulation to the cluster's own coordinates so a
                # cluster's reward structure lives entirely on its support.
                coords = cluster_coords[k]
            basis[k][:, coords] = rng.standard_normal((subspace_dim, len(coords)))
        mix = rng.standard_normal((n_categories, subspace_dim))
        directions = np.einsum("cr,crd->cd", mix, basis[home])
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        log_q = log_q + direction_strength * (offsets @ directions.T)
    labels: list[frozenset[int]] = []
    for i in range(n_examples):
        n_lab = min(int(counts[i]), n_categories)
        if n_lab == 0:
            labels.append(frozenset())
            continue
        # Gumbel top-k: a sample of n_lab distinct categories ~ exp(log_q[i]).
        keys = log_q[i] + rng.gumbel(size=n_categories)
        labels.append(frozenset(np.argpartition(-keys, n_lab - 1)[:n_lab].tolist()))
    return MultiLabelDataset(
        features=features,
        labels=labels,
        n_categories=n_categories,
        cluster_of_category=home.copy(),
    )
