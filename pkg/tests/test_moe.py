import numpy as np
import pytest

from twostage.env import synth_multilabel_generate
from twostage.moe import (
    MoEModel,
    OfflineBatch,
    assignment_from_pools,
    build_offline_dataset,
    cluster_consistency,
    distill_allocation,
    expert_predictions,
    gating_log_probs,
    init_moe,
    load_checkpoint,
    moe_grad,
    moe_loglik,
    moe_score,
    moe_score_matrix,
    moe_train,
    one_hot_gate_item,
    precision_recall_at_k,
    save_checkpoint,
)
from twostage.system import PoolAllocation, pool_allocate


def random_batch(rng, n_arms, d, size):
    return OfflineBatch(
        rng.standard_normal((size, d)),
        rng.integers(0, n_arms, size),
        rng.integers(0, 2, size).astype(float),
    )


def perturbed_model(seed, n_arms=6, d=9, n_experts=3, d_e=4, s=5, sigma=0.7, **kw):
    rng = np.random.default_rng(seed + 1000)
    m = init_moe(n_arms, d, n_experts, d_e, s, seed=seed, sigma=sigma, **kw)
    m.item_emb += 0.2 * rng.standard_normal(m.item_emb.shape)
    if not m.frozen:
        m.gate_user += 0.3 * rng.standard_normal(m.gate_user.shape)
        m.gate_item += 0.3 * rng.standard_normal(m.gate_item.shape)
    return m


class TestLoglik:
    def test_single_expert_collapse(self):
        rng = np.random.default_rng(0)
        m = perturbed_model(0, n_experts=1)
        batch = random_batch(rng, 6, 9, 12)
        rhat, _, _ = expert_predictions(m, batch.x, batch.arms)
        expect = float(np.mean(-((batch.rewards - rhat[0]) ** 2) / (2 * m.sigma**2)))
        assert moe_loglik(m, batch) == pytest.approx(expect)

    def test_exact_predictions_give_zero(self):
        rng = np.random.default_rng(1)
        m = init_moe(4, 6, 3, 2, 3, seed=1, sigma=1.0)  # zero embeddings: rhat = 0
        batch = OfflineBatch(
            rng.standard_normal((8, 6)), rng.integers(0, 4, 8), np.zeros(8)
        )
        assert moe_loglik(m, batch) == pytest.approx(0.0, abs=1e-12)

    def test_two_expert_hand_computation(self):
        m = init_moe(1, 2, 2, 1, 1, seed=0, sigma=0.5)
        m.item_emb[0, 0, 0] = 1.0
        m.item_emb[1, 0, 0] = 2.0
        m.proj[0, 0, 0] = 1.0
        m.proj[1, 0, 0] = 1.0
        m.subsets[:] = 0
        m.gate_item[0] = [np.log(0.3), np.log(0.7)]  # softmax gives 0.3 / 0.7
        x = np.array([[1.5, 0.0]])
        batch = OfflineBatch(x, np.array([0]), np.array([1.0]))
        r1, r2 = 1.5, 3.0
        direct = np.log(
            0.3 * np.exp(-((1 - r1) ** 2) / (2 * 0.25))
            + 0.7 * np.exp(-((1 - r2) ** 2) / (2 * 0.25))
        )
        assert moe_loglik(m, batch) == pytest.approx(float(direct))

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            init_moe(3, 4, 2, 2, 2, seed=0, sigma=0.0)

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(2)
        m = perturbed_model(2)
        batch = random_batch(rng, 6, 9, 10)
        base = moe_loglik(m, batch)
        perm = np.array([2, 0, 1])
        swapped = MoEModel(
            m.item_emb[perm].copy(),
            m.proj[perm].copy(),
            m.subsets[perm].copy(),
            m.gate_user[perm].copy(),
            m.gate_item[:, perm].copy(),
            m.gate_subset.copy(),
            m.sigma,
        )
        assert moe_loglik(swapped, batch) == pytest.approx(base)


class TestGrad:
    def test_identical_experts_uniform_gating_zero_gate_grad(self):
        rng = np.random.default_rng(3)
        m = init_moe(5, 7, 3, 3, 4, seed=3, sigma=1.0, shared_subset=True)
        m.item_emb[:] = m.item_emb[0]
        m.proj[:] = m.proj[0]
        batch = random_batch(rng, 5, 7, 9)
        g = moe_grad(m, batch)
        assert np.allclose(g["gate_user"], 0.0, atol=1e-12)
        assert np.allclose(g["gate_item"], 0.0, atol=1e-12)

    def test_frozen_gating_reduces_to_assigned_squared_error(self):
        rng = np.random.default_rng(4)
        pools = PoolAllocation([frozenset({0, 1}), frozenset({2, 3, 4})], 5)
        m = perturbed_model(4, n_arms=5, frozen_pools=pools)
        batch = random_batch(rng, 5, 9, 8)
        g = moe_grad(m, batch)
        assert set(g) == {"item_emb", "proj"}
        rhat, users, _ = expert_predictions(m, batch.x, batch.arms)
        assign = m.frozen_assignment[batch.arms]
        manual = np.zeros_like(m.item_emb)
        for b in range(len(batch)):
            n = assign[b]
            coef = (batch.rewards[b] - rhat[n, b]) / (m.sigma**2 * len(batch))
            manual[n, batch.arms[b]] += coef * users[n, b]
        assert np.allclose(g["item_emb"], manual, atol=1e-12)

    def test_finite_difference_small_models(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for trial in range(10):
            m = perturbed_model(trial)
            batch = random_batch(rng, 6, 9, 8)
            g = moe_grad(m, batch)
            eps = 1e-6
            for key, grad in g.items():
                arr = getattr(m, key)
                for _ in range(4):
                    ix = tuple(rng.integers(0, s) for s in arr.shape)
                    old = arr[ix]
                    arr[ix] = old + eps
                    lp = moe_loglik(m, batch)
                    arr[ix] = old - eps
                    lm = moe_loglik(m, batch)
                    arr[ix] = old
                    fd = (lp - lm) / (2 * eps)
                    denom = max(abs(fd), abs(grad[ix]), 1e-8)
                    worst = max(worst, abs(fd - grad[ix]) / denom)
        assert worst < 1e-4

    def test_gating_gradient_vanishes_with_large_sigma(self):
        rng = np.random.default_rng(6)
        norms = []
        for sigma in (1.0, 10.0, 100.0):
            m = perturbed_model(6, sigma=sigma)
            batch = random_batch(np.random.default_rng(7), 6, 9, 16)
            g = moe_grad(m, batch)
            norms.append(np.linalg.norm(g["gate_user"]) + np.linalg.norm(g["gate_item"]))
        # expert-discriminating term decays like 1/sigma^2
        assert norms[1] < norms[0] / 30
        assert norms[2] < norms[1] / 30


class TestGating:
    def test_simplex_property(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            m = perturbed_model(seed)
            batch = random_batch(rng, 6, 9, 11)
            p = np.exp(gating_log_probs(m, batch.x, batch.arms))
            assert np.all(p >= 0)
            assert np.allclose(p.sum(axis=0), 1.0, atol=1e-9)

    def test_frozen_one_hot_is_exact(self):
        pools = PoolAllocation([frozenset({0, 2}), frozenset({1, 3})], 4)
        m = init_moe(4, 5, 2, 2, 3, seed=0, frozen_pools=pools)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 5))
        arms = np.array([0, 1, 2, 3, 0, 1])
        p = np.exp(gating_log_probs(m, x, arms))
        assert np.all(np.isin(p, [0.0, 1.0]))
        assert np.array_equal(p.argmax(axis=0), assignment_from_pools(pools)[arms])

    def test_finite_logits_recover_allocation_exactly(self):
        rng = np.random.default_rng(10)
        pools = pool_allocate(7, 3, rng)
        m = init_moe(7, 4, 3, 2, 2, seed=1)
        m.gate_item[:] = one_hot_gate_item(pools, 3)
        assert np.all(np.isfinite(m.gate_item))
        x = rng.standard_normal((5, 4))
        arms = rng.integers(0, 7, 5)
        p = np.exp(gating_log_probs(m, x, arms))
        assert np.all(np.isin(p, [0.0, 1.0]))
        assert np.array_equal(p.argmax(axis=0), assignment_from_pools(pools)[arms])

    def test_one_hot_requires_disjoint_pools(self):
        pools = PoolAllocation([frozenset({0, 1}), frozenset({1, 2})], 3)
        with pytest.raises(ValueError):
            assignment_from_pools(pools)


class TestTraining:
    def test_zero_steps_leaves_model_unchanged(self):
        rng = np.random.default_rng(11)
        m = perturbed_model(11)
        before = {k: v.copy() for k, v in m.trainable_params().items()}
        data = random_batch(rng, 6, 9, 50)
        trace = moe_train(m, data, steps=0)
        assert trace == []
        for k, v in m.trainable_params().items():
            assert np.array_equal(v, before[k])

    def test_deterministic_trace(self):
        rng = np.random.default_rng(12)
        data = random_batch(rng, 6, 9, 200)
        t1 = moe_train(perturbed_model(12), data, steps=40, batch_size=32, seed=4)
        t2 = moe_train(perturbed_model(12), data, steps=40, batch_size=32, seed=4)
        assert t1 == t2

    def test_frozen_baseline_improves_loglik(self):
        rng = np.random.default_rng(13)
        pools = pool_allocate(6, 2, rng)
        m = init_moe(6, 9, 2, 3, 5, seed=13, sigma=1.0, frozen_pools=pools)
        # learnable signal: rewards linear in one feature
        x = rng.standard_normal((500, 9))
        arms = rng.integers(0, 6, 500)
        rewards = (x[:, 0] > 0).astype(float)
        data = OfflineBatch(x, arms, rewards)
        start = moe_loglik(m, data)
        moe_train(m, data, optimizer="rmsprop", steps=300, batch_size=128, seed=5)
        assert moe_loglik(m, data) > start


class TestScoring:
    def test_single_expert_score_is_raw_prediction(self):
        m = perturbed_model(14, n_experts=1)
        x = np.random.default_rng(0).standard_normal(9)
        arms = [0, 3, 5]
        scores = moe_score(m, x, arms)
        rhat, _, _ = expert_predictions(m, np.tile(x, (3, 1)), np.array(arms))
        assert np.allclose(scores, rhat[0])

    def test_uniform_gating_scores_mean_prediction(self):
        m = init_moe(4, 6, 2, 3, 4, seed=15, sigma=1.0)
        m.item_emb += 0.5 * np.random.default_rng(1).standard_normal(m.item_emb.shape)
        x = np.random.default_rng(2).standard_normal(6)
        scores = moe_score(m, x, [0, 1, 2, 3])
        rhat, _, _ = expert_predictions(m, np.tile(x, (4, 1)), np.arange(4))
        assert np.allclose(scores, rhat.mean(axis=0))

    def test_score_matrix_matches_per_example_scores(self):
        m = perturbed_model(16)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 9))
        mat = moe_score_matrix(m, x)
        for i in range(4):
            assert np.allclose(mat[i], moe_score(m, x[i], range(6)), atol=1e-12)


class TestPrecisionRecall:
    def test_all_relevant_topk(self):
        scores = np.array([[5.0, 4.0, 3.0, 0.0]])
        p, r = precision_recall_at_k(scores, [{0, 1}], 2)
        assert p == 1.0
        assert r == 1.0

    def test_empty_label_set_scores_zero(self):
        scores = np.array([[1.0, 0.5], [0.2, 0.9]])
        p, r = precision_recall_at_k(scores, [set(), {1}], 1)
        assert p == pytest.approx(0.5 * (0 + 1))
        assert r == pytest.approx(0.5 * (0 + 1))

    def test_hand_case(self):
        scores = np.array([[0.9, 0.8, 0.7, 0.6, 0.5]])
        p, r = precision_recall_at_k(scores, [{1, 3}], 2)
        assert p == pytest.approx(0.5)
        assert r == pytest.approx(0.5)

    def test_ties_break_toward_lower_arm_id(self):
        scores = np.array([[1.0, 1.0, 1.0]])
        p, _ = precision_recall_at_k(scores, [{0}], 1)
        assert p == 1.0


class TestOfflineDataset:
    def test_counts(self):
        ds = synth_multilabel_generate(200, 5, 10, 2, seed=0)
        rng = np.random.default_rng(0)
        batch = build_offline_dataset(ds, [0, 1, 2], c=1, rng=rng)
        assert len(batch) == 3
        assert np.array_equal(np.sort(batch.arms), [0, 1, 2])

    def test_all_empty_labels_all_zero_rewards(self):
        from twostage.env import MultiLabelDataset

        ds = MultiLabelDataset(np.ones((10, 3)), [frozenset()] * 10, n_categories=2)
        batch = build_offline_dataset(ds, [0, 1], c=5, rng=np.random.default_rng(1))
        assert np.all(batch.rewards == 0)

    def test_positivity_matches_base_rate(self):
        from twostage.env import MultiLabelDataset

        rng = np.random.default_rng(2)
        labels = [frozenset({0}) if rng.random() < 0.3 else frozenset() for _ in range(2000)]
        rate = np.mean([0 in l for l in labels])
        ds = MultiLabelDataset(rng.standard_normal((2000, 3)), labels, n_categories=1)
        batch = build_offline_dataset(ds, [0], c=20_000, rng=rng)
        assert batch.rewards.mean() == pytest.approx(rate, abs=0.02)

    def test_balanced_variant_overrepresents_positives(self):
        from twostage.env import MultiLabelDataset

        rng = np.random.default_rng(3)
        labels = [frozenset({0}) if i < 50 else frozenset() for i in range(1000)]
        ds = MultiLabelDataset(rng.standard_normal((1000, 3)), labels, n_categories=1)
        batch = build_offline_dataset(ds, [0], c=1000, rng=rng, balanced=True)
        assert batch.rewards.mean() > 0.3


class TestDistillation:
    def test_frozen_model_recovers_own_allocation(self):
        rng = np.random.default_rng(17)
        pools = pool_allocate(9, 3, rng)
        m = init_moe(9, 5, 3, 2, 3, seed=17, frozen_pools=pools)
        out = distill_allocation(m, rng.standard_normal((20, 5)))
        assert out.pools == pools.pools

    def test_uniform_gating_tie_breaks_by_expert_id_and_fills_pools(self):
        m = init_moe(6, 4, 3, 2, 2, seed=18, sigma=1.0)  # all-zero gating: uniform
        out = distill_allocation(m, np.random.default_rng(4).standard_normal((10, 4)))
        assert all(len(p) >= 1 for p in out.pools)
        assert set().union(*out.pools) == set(range(6))

    def test_cluster_consistency_metric(self):
        pools = PoolAllocation([frozenset({0, 1}), frozenset({2, 3})], 4)
        assert cluster_consistency(pools, [0, 0, 1, 1]) == 1.0
        merged = PoolAllocation([frozenset({0, 1, 2, 3})], 4)
        assert cluster_consistency(merged, [0, 0, 1, 1]) == 0.5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = perturbed_model(19)
        path = tmp_path / "model.tsmoe"
        save_checkpoint(m, path)
        assert path.read_bytes()[:6] == b"TSMOE1"
        out = load_checkpoint(path)
        assert out.sigma == m.sigma
        assert np.allclose(out.item_emb, m.item_emb, atol=1e-6)
        assert np.allclose(out.gate_item, m.gate_item, atol=1e-6)
        assert np.array_equal(out.subsets, m.subsets)
        assert out.frozen_assignment is None

    def test_round_trip_frozen(self, tmp_path):
        pools = pool_allocate(5, 2, np.random.default_rng(0))
        m = init_moe(5, 4, 2, 2, 2, seed=20, frozen_pools=pools)
        path = tmp_path / "frozen.tsmoe"
        save_checkpoint(m, path)
        out = load_checkpoint(path)
        assert np.array_equal(out.frozen_assignment, m.frozen_assignment)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.tsmoe"
        path.write_bytes(b"WRONG!" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
