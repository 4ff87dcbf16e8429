"""Acceptance suite: one test per primary criterion, each printing a PASS line
with the measured values once its assertions hold.
"""

import json
import time

import numpy as np
import pytest

from twostage import counterexample as cx
from twostage import moe as moemod
from twostage.agents import RidgeState
from twostage.cli import moe_eval_model, parse_config, run_sweep, summarize, top_categories
from twostage.env import misspecified_l2_error, standardize_features, synth_multilabel_generate
from twostage.seeding import derive_seed
from twostage.system import (
    TRAIN_ON_ALL,
    TRAIN_ON_OWN,
    candidate_coverage_probability,
    feature_allocate,
    pool_allocate,
)


def report(name: str, detail: str) -> None:
    print(f"[PASS] {name}: {detail}")


class TestSupervisedOracles:
    def test_three_arm_supervised_oracle(self):
        start = time.time()
        rbar = [0.25, 0.5, 1.0]
        rep_all = cx.supervised_limit_check("three-arm", rbar, TRAIN_ON_ALL, T=50_000, lam=1e-6, seed=0)
        rep_own = cx.supervised_limit_check("three-arm", rbar, TRAIN_ON_OWN, T=50_000, lam=1e-6, seed=1)
        elapsed = time.time() - start
        assert np.allclose(rep_all["theta_star"], [0.5, 0.375])
        assert np.allclose(rep_own["theta_star"], [0.5, 1.0])
        assert rep_all["max_error"] < 0.02
        assert rep_own["max_error"] < 0.02
        assert rep_all["argmax_arm"] == 1  # the suboptimal second arm
        assert rep_own["argmax_arm"] == 2  # the optimal third arm
        assert elapsed < 10.0
        report(
            "three-arm supervised oracle",
            f"err_all={rep_all['max_error']:.4f} err_own={rep_own['max_error']:.4f} "
            f"argmax=({rep_all['argmax_arm']},{rep_own['argmax_arm']}) in {elapsed:.1f}s",
        )

    def test_four_arm_supervised_oracle(self):
        rbar = [0.75, 1.0, 1 / 6, 7 / 8]
        rep_own = cx.supervised_limit_check("four-arm", rbar, TRAIN_ON_OWN, T=50_000, lam=1e-6, seed=2)
        rep_all = cx.supervised_limit_check("four-arm", rbar, TRAIN_ON_ALL, T=50_000, lam=1e-6, seed=3)
        assert rep_own["max_error"] < 0.02
        assert rep_all["max_error"] < 0.02
        assert rep_own["argmax_arm"] == 2  # wrong arm under train-on-own
        assert rep_all["argmax_arm"] == 1  # optimal arm under train-on-all
        report(
            "four-arm supervised oracle",
            f"verdicts reversed: own->arm{rep_own['argmax_arm']} all->arm{rep_all['argmax_arm']}",
        )


@pytest.fixture(scope="module")
def demos():
    out = {}
    for mode in (TRAIN_ON_OWN, TRAIN_ON_ALL):
        for third in (False, True):
            start = time.time()
            demo = cx.bandit_regret_demo(mode, with_third_nominator=third, T=200_000, seed=0)
            demo["elapsed"] = time.time() - start
            out[(mode, third)] = demo
    return out


class TestBanditDemo:
    def test_runtime_budget(self, demos):
        worst = max(d["elapsed"] for d in demos.values())
        assert worst < 120.0
        report("bandit demo runtime", f"worst run {worst:.0f}s < 120s")

    def test_sign_stabilization(self, demos):
        for (mode, third), demo in demos.items():
            chk = cx.bandit_convergence_check(demo)
            want = 1 if mode == TRAIN_ON_OWN else -1
            assert chk["sign_target"] == want
            assert chk["sign_stabilized"], (mode, third)
            assert np.sign(demo["theta_hat"][1]) == want
        report("bandit demo sign", "theta2 sign stabilizes + (own) / - (all) in all 4 runs")

    def test_failing_modes_have_linear_regret(self, demos):
        floor = 1.0 / 48.0
        for mode in (TRAIN_ON_OWN, TRAIN_ON_ALL):
            slope = demos[(mode, False)]["final_regret_2s_per_t"]
            assert slope >= floor, (mode, slope)
        report(
            "bandit demo linear regret",
            f"no-third slopes {[round(demos[(m, False)]['final_regret_2s_per_t'], 3) for m in (TRAIN_ON_OWN, TRAIN_ON_ALL)]} >= 1/48",
        )

    def test_third_nominator_restores_coverage(self, demos):
        for mode in (TRAIN_ON_OWN, TRAIN_ON_ALL):
            slope = demos[(mode, True)]["final_regret_nom_per_t"]
            assert slope < 0.01, (mode, slope)
        report(
            "bandit demo coverage",
            f"with-third nominator-regret slopes "
            f"{[round(demos[(m, True)]['final_regret_nom_per_t'], 4) for m in (TRAIN_ON_OWN, TRAIN_ON_ALL)]} < 0.01",
        )

    def test_estimates_converge_in_sublinear_runs(self, demos):
        for mode in (TRAIN_ON_OWN, TRAIN_ON_ALL):
            chk = cx.bandit_convergence_check(demos[(mode, True)])
            assert chk["converged"], chk
        report("bandit demo convergence", "sublinear-run estimates within 0.05 of limits")


class TestDecompositionIdentity:
    def test_identity_holds_across_runs(self):
        from twostage.env import SyntheticLinearEnv
        from twostage.system import SystemSpec, run_experiment

        worst = 0.0
        for stages, ranker, nominator in (
            ("two-stage", "ucb", "greedy"),
            ("two-stage", "greedy", "greedy"),
            ("single-stage", "ucb", "greedy"),
        ):
            spec = SystemSpec(
                stages=stages, ranker=ranker, nominator=nominator, n_nominators=4, s=3
            )
            out = run_experiment(
                lambda seed: SyntheticLinearEnv(6, 12, 0.2, seed),
                spec,
                T=500,
                seed=11,
                uniform_baseline=False,
            )
            ledger = out["ledger"]
            c2 = cn = cr = 0.0
            for rec in ledger.records:
                resid = abs(rec.regret_2s - (rec.regret_nom + rec.regret_rank))
                worst = max(worst, resid)
                c2 += rec.regret_2s
                cn += rec.regret_nom
                cr += rec.regret_rank
            worst = max(worst, abs(ledger.cum_2s - (cn + cr) - (c2 - cn - cr)))
            worst = max(worst, abs(c2 - (cn + cr)))
        assert worst < 1e-12
        report("regret decomposition identity", f"max residual {worst:.2e} < 1e-12")


class TestMisspecificationLaw:
    def test_l2_error_curve(self):
        d = 40
        rng = np.random.default_rng(123)
        errors, ratios = [], []
        for s in (8, 16, 24, 32, 40):
            est = misspecified_l2_error(d, s, 100_000, rng)
            target = np.sqrt(1 - s / d)
            assert abs(est - target) < 0.02, (s, est, target)
            errors.append(est)
            ratios.append(d / s)
        # concavity in d/s: slopes of the (increasing-ratio) curve decrease
        pts = sorted(zip(ratios, errors))
        slopes = [
            (pts[i + 1][1] - pts[i][1]) / (pts[i + 1][0] - pts[i][0])
            for i in range(len(pts) - 1)
        ]
        assert all(slopes[i + 1] <= slopes[i] + 1e-9 for i in range(len(slopes) - 1))
        report(
            "misspecification law",
            f"errors {[round(e, 3) for e in errors]} match sqrt(1-s/d) +-0.02, concave in d/s",
        )


class TestCoverageProbability:
    def test_ten_pools_ten_percent(self):
        rng = np.random.default_rng(7)
        est = candidate_coverage_probability(10, 0.1, 1_000_000, rng)
        target = 1 - 0.9**10
        assert abs(est - target) < 0.01
        report("coverage probability", f"estimate {est:.4f} within 0.01 of {target:.4f}")


SWEEP_CONFIG = {
    "env": {"kind": "synthetic", "n_arms": 100, "d": 40, "noise_std": 0.1},
    "system": {"n_nominators": 5, "training_mode": "train-on-all"},
    "T": 1000,
    "seeds": 30,
    "sweep": {
        "s": [8, 16, 24, 32, 40],
        "systems": [
            {"stages": "single-stage", "ranker": "ucb"},
            {"stages": "single-stage", "ranker": "greedy"},
            {"stages": "two-stage", "ranker": "ucb", "nominator": "ucb"},
            {"stages": "two-stage", "ranker": "ucb", "nominator": "greedy"},
            {"stages": "two-stage", "ranker": "greedy", "nominator": "greedy"},
        ],
    },
}


class TestMisspecificationSweep:
    def test_desk_scale_reproduction(self, tmp_path):
        start = time.time()
        cfg_path = tmp_path / "sweep.json"
        cfg_path.write_text(json.dumps(SWEEP_CONFIG))
        config = parse_config(cfg_path)
        out_dir = tmp_path / "results"
        stats = run_sweep(config, out_dir, parallelism=8)
        assert stats["failures"] == 0
        assert stats["executed"] == 5 * 5 * 30
        agg = summarize(out_dir, tmp_path / "agg.csv")
        elapsed = time.time() - start
        assert elapsed < 15 * 60

        agg["ratio"] = agg["d"] / agg["s"]
        # (a) mean regret non-decreasing in d/s for every system
        for (stages, ranker, nominator), grp in agg.groupby(["stages", "ranker", "nominator"]):
            grp = grp.sort_values("ratio")
            means = grp["regret_2s_mean"].to_numpy()
            assert np.all(np.diff(means) >= -1e-9), (stages, ranker, nominator, means)

        # (b) two-stage UCB-ranker systems at d/s = 5 beat the matching
        # misspecified single-stage agent by at least 2 combined SEs.
        def cell(stages, ranker, s, nominator=None):
            rows = agg[(agg["stages"] == stages) & (agg["ranker"] == ranker) & (agg["s"] == s)]
            if nominator is not None:
                rows = rows[rows["nominator"] == nominator]
            assert len(rows) == 1
            return float(rows["regret_2s_mean"].iloc[0]), float(rows["regret_2s_se2"].iloc[0]) / 2

        separations = []
        for nominator, single_ranker in (("ucb", "ucb"), ("greedy", "greedy")):
            two_mean, two_se = cell("two-stage", "ucb", 8, nominator)
            one_mean, one_se = cell("single-stage", single_ranker, 8)
            sep = (one_mean - two_mean) / np.hypot(two_se, one_se)
            separations.append(sep)
            assert one_mean - two_mean >= 2 * np.hypot(two_se, one_se), (nominator, sep)
        report(
            "misspecification sweep",
            f"750 runs in {elapsed:.0f}s; regret monotone in d/s; "
            f"two-stage beats single-stage at d/s=5 by {min(separations):.1f} combined SEs",
        )


class TestRidgeConsistency:
    def test_iid_stream_consistency(self):
        rng = np.random.default_rng(21)
        d = 20
        theta = rng.standard_normal(d)
        theta /= np.linalg.norm(theta)
        state = RidgeState(d, 1e-2)
        for _ in range(100_000):
            x = rng.standard_normal(d)
            state.update(x, float(x @ theta + 0.5 * rng.standard_normal()))
        err = float(np.linalg.norm(state.theta_hat - theta))
        assert err < 0.05
        report("ridge consistency", f"estimate error {err:.4f} < 0.05 at t=1e5")


class TestMoEGradients:
    def test_hundred_random_models(self):
        rng = np.random.default_rng(99)
        worst = 0.0
        for trial in range(100):
            model = moemod.init_moe(6, 9, 3, 4, 5, seed=trial, sigma=float(rng.uniform(0.4, 2.0)))
            model.item_emb += 0.3 * rng.standard_normal(model.item_emb.shape)
            model.gate_user += 0.3 * rng.standard_normal(model.gate_user.shape)
            model.gate_item += 0.3 * rng.standard_normal(model.gate_item.shape)
            batch = moemod.OfflineBatch(
                rng.standard_normal((8, 9)),
                rng.integers(0, 6, 8),
                rng.integers(0, 2, 8).astype(float),
            )
            grads = moemod.moe_grad(model, batch)
            eps = 1e-6
            for key, grad in grads.items():
                arr = getattr(model, key)
                for _ in range(3):
                    ix = tuple(rng.integers(0, s) for s in arr.shape)
                    old = arr[ix]
                    arr[ix] = old + eps
                    lp = moemod.moe_loglik(model, batch)
                    arr[ix] = old - eps
                    lm = moemod.moe_loglik(model, batch)
                    arr[ix] = old
                    fd = (lp - lm) / (2 * eps)
                    rel = abs(fd - grad[ix]) / max(abs(fd), abs(grad[ix]), 1e-8)
                    worst = max(worst, rel)
        assert worst < 1e-4
        report("moe gradients", f"max relative error vs finite differences {worst:.2e} < 1e-4")


MOE_DATASET = dict(
    n_examples=30_000,
    d=150,
    n_categories=100,
    clusters=10,
    seed=0,
    labels_per_example=10.0,
    cluster_affinity=1.0,
    cluster_scale=5.0,
    center_support=10,
    power_exponent=0.4,
)


class TestMoERecoveryAndImprovement:
    def test_exact_recovery_and_learned_allocation(self):
        start = time.time()
        ds = standardize_features(synth_multilabel_generate(**MOE_DATASET))
        cats = top_categories(ds, 100, 0)
        arm_cluster = [ds.cluster_of_category[c] for c in cats]

        # (a) the one-hot gating construction reproduces a given allocation
        rng = np.random.default_rng(0)
        pools = pool_allocate(100, 10, rng)
        frozen = moemod.init_moe(100, 150, 10, 10, 25, seed=5, frozen_pools=pools)
        assert moemod.distill_allocation(frozen, ds.features[:500]).pools == pools.pools
        finite = moemod.init_moe(100, 150, 10, 10, 25, seed=5)
        finite.gate_item[:] = moemod.one_hot_gate_item(pools, 10)
        assert moemod.distill_allocation(finite, ds.features[:500]).pools == pools.pools

        # (b) trainable gating vs the random-pool baseline over 3 seeds
        precisions, recalls, consistencies = [], [], []
        base_p, base_r = [], []
        for seed in range(3):
            data_rng = np.random.default_rng(derive_seed(seed, 11))
            triples = moemod.build_offline_dataset(ds, cats, 500, data_rng, balanced=True)
            baseline_pools = pool_allocate(100, 10, np.random.default_rng(derive_seed(seed, 12)))
            baseline = moemod.init_moe(
                100, 150, 10, 10, 25, seed=derive_seed(seed, 13), sigma=1.0,
                frozen_pools=baseline_pools,
            )
            moemod.moe_train(
                baseline, triples, optimizer="rmsprop", learning_rate=0.01,
                steps=3000, batch_size=1024, seed=derive_seed(seed, 14),
            )
            p, r = moe_eval_model(baseline, ds, cats, 5000, 5, 959_595)
            base_p.append(p)
            base_r.append(r)

            model = moemod.init_moe(
                100, 150, 10, 10, 25, seed=derive_seed(seed, 13), sigma=0.5, gate_subset=[],
            )
            moemod.balanced_affinity_gating_init(model, triples, logit_gap=8.0, capacity_slack=1.0)
            moemod.moe_train(
                model, triples, optimizer="rmsprop", learning_rate=0.01,
                steps=3000, batch_size=1024, seed=derive_seed(seed, 14),
                gate_learning_rate=0.001,
            )
            p, r = moe_eval_model(model, ds, cats, 5000, 5, 959_595)
            precisions.append(p)
            recalls.append(r)
            alloc = moemod.distill_allocation(model, ds.features[:2000])
            consistencies.append(moemod.cluster_consistency(alloc, arm_cluster))

        elapsed = time.time() - start
        assert np.mean(precisions) >= np.mean(base_p)
        assert np.mean(recalls) >= np.mean(base_r)
        assert np.mean(consistencies) >= 0.80
        assert elapsed < 10 * 60
        report(
            "moe recovery + improvement",
            f"P@5 {np.mean(precisions):.3f} vs baseline {np.mean(base_p):.3f}; "
            f"R@5 {np.mean(recalls):.3f} vs {np.mean(base_r):.3f}; "
            f"consistency {np.mean(consistencies):.2f} >= 0.80 in {elapsed:.0f}s",
        )


class TestAllocationInvariants:
    def test_randomized_grid(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n_arms = int(rng.integers(1, 80))
            n_pools = int(rng.integers(1, n_arms + 1))
            pools = pool_allocate(n_arms, n_pools, rng)
            sizes = sorted(len(p) for p in pools.pools)
            assert sizes[0] == n_arms // n_pools
            assert sizes[-1] - sizes[0] <= 1
            assert sum(sizes) == n_arms
            assert set().union(*pools.pools) == set(range(n_arms))

            d = int(rng.integers(2, 60))
            s = int(rng.integers(1, d + 1))
            n = int(rng.integers(1, 10))
            feats = feature_allocate(d, s, n, rng)
            for sub in feats.subsets:
                assert len(sub) == s
                assert len(set(sub.tolist())) == s
                assert all(0 <= j < d for j in sub)
        report("allocation invariants", "1000 random tuples satisfy size/disjointness/coverage")
