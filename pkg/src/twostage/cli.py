"""Experiment runner and sweep orchestrator.

Subcommands: synth-run, dataset-run, sweep, counterexample, moe-train,
moe-eval, coverage-prob, summarize. Configs are single strict JSON documents;
every run is deterministic given (config, seed) and independent of worker
count. Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np
import pandas as pd

from . import counterexample as cx
from . import env as envmod
from . import moe as moemod
from .seeding import derive_seed, splitmix64
from .system import (
    LEDGER_CSV_COLUMNS,
    SystemSpec,
    candidate_coverage_probability,
    run_experiment,
)


class ConfigError(Exception):
    pass


# Bold-table defaults: (lambda, alpha, pg learning rate) per environment family.
DEFAULTS_SYNTHETIC = {"lambda": 1e-2, "alpha": 1e-2, "pg_learning_rate": 1.0}
DEFAULTS_DATASET = {"lambda": 1.0, "alpha": 1e-3, "pg_learning_rate": 10.0}

ENV_KEYS = {
    "synthetic": {"kind", "n_arms", "d", "noise_std"},
    "dataset": {
        "kind",
        "features_path",
        "labels_path",
        "n_arms",
        "skip_top",
        "standardize",
        "fixed_instance",
    },
    "synthetic-multilabel": {
        "kind",
        "n_examples",
        "d",
        "n_categories",
        "clusters",
        "power_exponent",
        "labels_per_example",
        "cluster_affinity",
        "cluster_scale",
        "center_support",
        "cluster_size_exponent",
        "direction_strength",
        "direction_support",
        "direction_rank",
        "data_seed",
        "n_arms",
        "skip_top",
        "standardize",
        "fixed_instance",
    },
}
SYSTEM_KEYS = {
    "stages",
    "ranker",
    "nominator",
    "n_nominators",
    "s",
    "misspec_ratio",
    "training_mode",
    "alpha",
    "lambda",
    "pg_learning_rate",
}
TOP_KEYS = {"env", "system", "T", "seeds", "root_seed", "sweep"}
SWEEP_KEYS = {"n_arms", "d", "noise_std", "n_nominators", "misspec_ratio", "s", "systems"}


def _key_line(text: str, key: str) -> str:
    for i, line in enumerate(text.splitlines(), start=1):
        if re.search(rf'"{re.escape(key)}"\s*:', line):
            return f" (line {i})"
    return ""


def _check_keys(section: dict, allowed: set[str], where: str, text: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}{_key_line(text, key)}")


def parse_config(path: str | Path) -> dict:
    """Strict parse of an experiment config with table defaults injected."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    _check_keys(raw, TOP_KEYS, "config", text)
    env_cfg = dict(raw.get("env", {}))
    kind = env_cfg.get("kind", "synthetic")
    if kind not in ENV_KEYS:
        raise ConfigError(f"unknown env kind {kind!r}{_key_line(text, 'kind')}")
    _check_keys(env_cfg, ENV_KEYS[kind], f"env ({kind})", text)
    env_cfg["kind"] = kind
    sys_cfg = dict(raw.get("system", {}))
    _check_keys(sys_cfg, SYSTEM_KEYS, "system", text)
    defaults = DEFAULTS_SYNTHETIC if kind == "synthetic" else DEFAULTS_DATASET
    for key, value in defaults.items():
        sys_cfg.setdefault(key, value)
    sys_cfg.setdefault("stages", "two-stage")
    sys_cfg.setdefault("ranker", "ucb")
    sys_cfg.setdefault("nominator", "greedy")
    sys_cfg.setdefault("n_nominators", 5)
    sys_cfg.setdefault("training_mode", "train-on-all")
    sweep = raw.get("sweep")
    if sweep is not None:
        _check_keys(sweep, SWEEP_KEYS, "sweep", text)
    config = {
        "env": env_cfg,
        "system": sys_cfg,
        "T": int(raw.get("T", 1000)),
        "seeds": raw.get("seeds", 1),
        "root_seed": int(raw.get("root_seed", 0)),
        "sweep": sweep,
    }
    _validate(config)
    return config


def _validate(config: dict) -> None:
    env_cfg, sys_cfg = config["env"], config["system"]
    d = env_cfg.get("d")
    s = sys_cfg.get("s")
    ratio = sys_cfg.get("misspec_ratio")
    if ratio is not None:
        if ratio < 1:
            raise ConfigError("misspec_ratio is d/s and must be >= 1")
        if s is not None:
            raise ConfigError("give either s or misspec_ratio, not both")
    if d is not None and s is not None and s > d:
        raise ConfigError(f"feature subset s={s} exceeds d={d}")
    if config["T"] < 0:
        raise ConfigError("T must be nonnegative")
    n_arms = env_cfg.get("n_arms")
    if n_arms is not None and sys_cfg["stages"] == "two-stage":
        if sys_cfg["n_nominators"] > n_arms:
            raise ConfigError("more nominators than arms")


def seed_list(config: dict) -> list[int]:
    seeds = config["seeds"]
    if isinstance(seeds, int):
        return list(range(seeds))
    return [int(s) for s in seeds]


_DATASET_CACHE: dict[tuple, envmod.MultiLabelDataset] = {}


def _load_env_dataset(env_cfg: dict) -> envmod.MultiLabelDataset:
    if env_cfg["kind"] == "dataset":
        key = ("files", env_cfg["features_path"], env_cfg["labels_path"], env_cfg.get("standardize", True))
        if key not in _DATASET_CACHE:
            ds = envmod.load_dataset(env_cfg["features_path"], env_cfg["labels_path"])
            if env_cfg.get("standardize", True):
                ds = envmod.standardize_features(ds)
            _DATASET_CACHE[key] = ds
    else:
        gen = {
            "n_examples": env_cfg.get("n_examples", 20000),
            "d": env_cfg.get("d", 50),
            "n_categories": env_cfg.get("n_categories", 100),
            "clusters": env_cfg.get("clusters", 10),
            "seed": env_cfg.get("data_seed", 0),
            "power_exponent": env_cfg.get("power_exponent", 0.8),
            "labels_per_example": env_cfg.get("labels_per_example", 3.0),
            "cluster_affinity": env_cfg.get("cluster_affinity", 0.8),
            "cluster_scale": env_cfg.get("cluster_scale", 3.0),
            "center_support": env_cfg.get("center_support"),
            "cluster_size_exponent": env_cfg.get("cluster_size_exponent", 0.0),
            "direction_strength": env_cfg.get("direction_strength", 0.0),
            "direction_support": env_cfg.get("direction_support"),
            "direction_rank": env_cfg.get("direction_rank", 3),
        }
        standardize = env_cfg.get("standardize", True)
        key = ("synth", tuple(sorted(gen.items())), standardize)
        if key not in _DATASET_CACHE:
            ds = envmod.synth_multilabel_generate(**gen)
            if standardize:
                ds = envmod.standardize_features(ds)
            _DATASET_CACHE[key] = ds
    return _DATASET_CACHE[key]


def top_categories(ds: envmod.MultiLabelDataset, n_arms: int, skip_top: int = 0) -> list[int]:
    """Most frequent categories by label count, skipping the first few."""
    counts = np.zeros(ds.n_categories, dtype=int)
    for labs in ds.labels:
        for c in labs:
            counts[c] += 1
    order = np.argsort(-counts, kind="stable")
    chosen = order[skip_top : skip_top + n_arms]
    if len(chosen) < n_arms:
        raise ConfigError("not enough categories for the requested arm count")
    return sorted(int(c) for c in chosen)


def make_env_factory(env_cfg: dict):
    kind = env_cfg["kind"]
    if kind == "synthetic":
        d = env_cfg.get("d", 20)
        n_arms = env_cfg.get("n_arms", 100)
        noise = env_cfg.get("noise_std", 0.1)
        return lambda seed: envmod.SyntheticLinearEnv(d, n_arms, noise, seed)
    ds = _load_env_dataset(env_cfg)
    cats = top_categories(ds, env_cfg.get("n_arms", 100), env_cfg.get("skip_top", 0))
    fixed = env_cfg.get("fixed_instance", False)
    return lambda seed: envmod.multilabel_to_bandit(ds, cats, seed, fixed_instance=fixed)


def system_spec(config: dict) -> SystemSpec:
    sys_cfg = config["system"]
    d = config["env"].get("d")
    s = sys_cfg.get("s")
    ratio = sys_cfg.get("misspec_ratio")
    if ratio is not None:
        if d is None:
            raise ConfigError("misspec_ratio requires env.d")
        s = max(1, int(d // ratio))
    return SystemSpec(
        stages=sys_cfg["stages"],
        ranker=sys_cfg["ranker"],
        nominator=sys_cfg["nominator"],
        n_nominators=sys_cfg["n_nominators"],
        s=s,
        training_mode=sys_cfg["training_mode"],
        alpha=sys_cfg["alpha"],
        lam=sys_cfg["lambda"],
        pg_learning_rate=sys_cfg["pg_learning_rate"],
    )


def _cell_id(config: dict) -> str:
    payload = json.dumps(
        {"env": config["env"], "system": config["system"], "T": config["T"]},
        sort_keys=True,
    )
    acc = 0xCBF29CE484222325
    for ch in payload.encode():
        acc = splitmix64(acc ^ ch)
    return f"{acc:016x}"


def run_one(config: dict, seed_index: int, cell_index: int = 0, out_dir: Path | None = None) -> dict:
    """Execute one (cell, seed) run; writes a ledger CSV and returns the summary row.

    ``seed_index`` is the position in the config's seed list; the run seed is
    derived from the seed value there, so duplicated seed values reproduce
    identical results under distinct run ids.
    """
    seed_value = seed_list(config)[seed_index]
    run_seed = derive_seed(config["root_seed"], cell_index, seed_value)
    factory = make_env_factory(config["env"])
    spec = system_spec(config)
    result = run_experiment(factory, spec, config["T"], run_seed)
    summary = result["summary"]
    cell = _cell_id(config)
    run_id = f"{cell}-s{seed_index}"
    row = {
        "run_id": run_id,
        "cell_id": cell,
        "env_kind": config["env"]["kind"],
        "n_arms": config["env"].get("n_arms", ""),
        "d": config["env"].get("d", ""),
        "noise_std": config["env"].get("noise_std", ""),
        "stages": config["system"]["stages"],
        "ranker": config["system"]["ranker"],
        "nominator": config["system"]["nominator"],
        "n_nominators": config["system"]["n_nominators"],
        "s": spec.s if spec.s is not None else "",
        "misspec_ratio": config["system"].get("misspec_ratio", ""),
        "training_mode": config["system"]["training_mode"],
        "alpha": config["system"]["alpha"],
        "lambda": config["system"]["lambda"],
        "T": config["T"],
        "seed_index": seed_index,
        "seed": summary["seed"],
        "regret_2s": summary["regret_2s"],
        "regret_nom": summary["regret_nom"],
        "regret_rank": summary["regret_rank"],
        "uniform_regret_2s": summary.get("uniform_regret_2s", ""),
        "relative_regret": summary.get("relative_regret", ""),
    }
    if out_dir is not None:
        ledger_dir = out_dir / "ledgers"
        ledger_dir.mkdir(parents=True, exist_ok=True)
        with (ledger_dir / f"{run_id}.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LEDGER_CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(result["ledger"].csv_rows(run_id, summary["seed"]))
        runs_dir = out_dir / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        (runs_dir / f"{run_id}.json").write_text(json.dumps(row, sort_keys=True))
    return row


def expand_sweep(config: dict) -> list[dict]:
    """Cross the sweep grid into per-cell configs, skipping N > |A| cells."""
    sweep = config.get("sweep") or {}
    systems = sweep.get("systems", [None])
    axes: list[tuple[str, str, list]] = []
    for key in ("n_arms", "d", "noise_std"):
        if key in sweep:
            axes.append(("env", key, sweep[key]))
    for key in ("n_nominators", "misspec_ratio", "s"):
        if key in sweep:
            axes.append(("system", key, sweep[key]))
    cells = []
    def rec(i: int, env_over: dict, sys_over: dict):
        if i == len(axes):
            for system in systems:
                env_cfg = {**config["env"], **env_over}
                sys_cfg = {**config["system"], **sys_over, **(system or {})}
                if sys_cfg.get("misspec_ratio") is not None:
                    sys_cfg.pop("s", None)
                cell = {
                    "env": env_cfg,
                    "system": sys_cfg,
                    "T": config["T"],
                    "seeds": config["seeds"],
                    "root_seed": config["root_seed"],
                    "sweep": None,
                }
                n_arms = env_cfg.get("n_arms")
                if (
                    sys_cfg["stages"] == "two-stage"
                    and n_arms is not None
                    and sys_cfg["n_nominators"] > n_arms
                ):
                    continue
                d = env_cfg.get("d")
                s = sys_cfg.get("s")
                if d is not None and s is not None and s > d:
                    continue
                cells.append(cell)
            return
        section, key, values = axes[i]
        for v in values:
            rec(
                i + 1,
                {**env_over, key: v} if section == "env" else env_over,
                {**sys_over, key: v} if section == "system" else sys_over,
            )
    rec(0, {}, {})
    return cells


def _sweep_task(args: tuple) -> tuple[str, dict | None, str]:
    cell_json, cell_index, seed_index, out_dir = args
    config = json.loads(cell_json)
    run_id = f"{_cell_id(config)}-s{seed_index}"
    try:
        row = run_one(config, seed_index, cell_index, Path(out_dir))
        return run_id, row, ""
    except Exception as exc:  # cell failures are recorded, the sweep continues
        return run_id, None, f"{type(exc).__name__}: {exc}"


def run_sweep(config: dict, out_dir: Path, parallelism: int = 1, resume: bool = False) -> dict:
    """Execute every (cell, seed); writes per-run artifacts and summary.csv."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_sweep(config)
    seeds = seed_list(config)
    tasks = []
    skipped = 0
    for ci, cell in enumerate(cells):
        cell_json = json.dumps(cell, sort_keys=True)
        for si in range(len(seeds)):
            run_id = f"{_cell_id(cell)}-s{si}"
            if resume and (out_dir / "runs" / f"{run_id}.json").exists():
                skipped += 1
                continue
            tasks.append((cell_json, ci, si, str(out_dir)))
    failures: list[tuple[str, str]] = []
    if parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_sweep_task, t) for t in tasks]
            for fut in as_completed(futures):
                run_id, row, err = fut.result()
                if err:
                    failures.append((run_id, err))
    else:
        for t in tasks:
            run_id, row, err = _sweep_task(t)
            if err:
                failures.append((run_id, err))
    for run_id, err in failures:
        errors_dir = out_dir / "errors"
        errors_dir.mkdir(exist_ok=True)
        (errors_dir / f"{run_id}.txt").write_text(err)
    rows = []
    runs_dir = out_dir / "runs"
    if runs_dir.exists():
        for path in sorted(runs_dir.glob("*.json")):
            rows.append(json.loads(path.read_text()))
    if rows:
        frame = pd.DataFrame(rows).sort_values(["cell_id", "seed_index"])
        frame.to_csv(out_dir / "summary.csv", index=False)
    return {
        "cells": len(cells),
        "executed": len(tasks) - len(failures),
        "skipped": skipped,
        "failures": len(failures),
    }


SUMMARY_METRICS = ["regret_2s", "regret_nom", "regret_rank", "relative_regret"]
CELL_COLUMNS = [
    "cell_id",
    "env_kind",
    "n_arms",
    "d",
    "noise_std",
    "stages",
    "ranker",
    "nominator",
    "n_nominators",
    "s",
    "misspec_ratio",
    "training_mode",
    "T",
]


def summarize(results_dir: Path, out_path: Path | None = None) -> pd.DataFrame:
    """Aggregate summary.csv into per-cell means and two-sigma standard errors."""
    src = results_dir / "summary.csv" if results_dir.is_dir() else results_dir
    if not src.exists():
        raise ConfigError(f"no summary.csv under {results_dir}")
    frame = pd.read_csv(src)
    if frame.empty:
        raise ConfigError("summary.csv is empty")
    group_cols = [c for c in CELL_COLUMNS if c in frame.columns]
    records = []
    for key, grp in frame.groupby(group_cols, dropna=False, sort=True):
        rec = dict(zip(group_cols, key if isinstance(key, tuple) else (key,)))
        rec["n_seeds"] = len(grp)
        for metric in SUMMARY_METRICS:
            vals = pd.to_numeric(grp[metric], errors="coerce").dropna()
            if vals.empty:
                continue
            rec[f"{metric}_mean"] = float(vals.mean())
            se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rec[f"{metric}_se2"] = 2.0 * se
        records.append(rec)
    agg = pd.DataFrame(records)
    if out_path is not None:
        agg.to_csv(out_path, index=False)
    return agg


# ---------------------------------------------------------------------------
# MoE orchestration


MOE_TOP_KEYS = {"data", "arms", "offline", "model", "train", "eval", "seeds"}
MOE_DATA_KEYS = ENV_KEYS["synthetic-multilabel"] | {"features_path", "labels_path", "source"}
MOE_MODEL_KEYS = {
    "n_experts",
    "d_e",
    "s",
    "sigma",
    "gating",
    "shared_subset",
    "gate_subset",
    "gating_init",
}
MOE_TRAIN_KEYS = {
    "optimizer",
    "learning_rate",
    "steps",
    "batch_size",
    "trace_every",
    "gate_learning_rate",
    "sigma_anneal_from",
}
MOE_EVAL_KEYS = {"n_test", "k", "test_seed"}


def parse_moe_config(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    _check_keys(raw, MOE_TOP_KEYS, "moe config", text)
    data = dict(raw.get("data", {}))
    _check_keys(data, MOE_DATA_KEYS, "data", text)
    data.setdefault("source", "synthetic")
    data["kind"] = "dataset" if data["source"] == "files" else "synthetic-multilabel"
    model = dict(raw.get("model", {}))
    _check_keys(model, MOE_MODEL_KEYS, "model", text)
    model.setdefault("n_experts", 10)
    model.setdefault("d_e", 10)
    model.setdefault("s", 25)
    model.setdefault("gating", "trainable")
    if model["gating"] not in ("trainable", "random-pools"):
        raise ConfigError("model.gating must be 'trainable' or 'random-pools'")
    model.setdefault("sigma", 0.01 if model["gating"] == "trainable" else 1.0)
    model.setdefault("shared_subset", False)
    model.setdefault("gating_init", "zero")
    if model["gating_init"] not in ("zero", "balanced-affinity"):
        raise ConfigError("model.gating_init must be 'zero' or 'balanced-affinity'")
    train = dict(raw.get("train", {}))
    _check_keys(train, MOE_TRAIN_KEYS, "train", text)
    train.setdefault("optimizer", "adam" if model["gating"] == "trainable" else "rmsprop")
    train.setdefault("learning_rate", 0.01)
    train.setdefault("steps", 2000)
    train.setdefault("batch_size", 4096)
    train.setdefault("trace_every", 50)
    train.setdefault("gate_learning_rate", None)
    train.setdefault("sigma_anneal_from", None)
    eval_cfg = dict(raw.get("eval", {}))
    _check_keys(eval_cfg, MOE_EVAL_KEYS, "eval", text)
    eval_cfg.setdefault("n_test", 5000)
    eval_cfg.setdefault("k", 5)
    eval_cfg.setdefault("test_seed", 959_595)
    offline = dict(raw.get("offline", {}))
    _check_keys(offline, {"c", "balanced"}, "offline", text)
    offline.setdefault("c", 500)
    offline.setdefault("balanced", False)
    arms = dict(raw.get("arms", {}))
    _check_keys(arms, {"n_arms", "skip_top"}, "arms", text)
    arms.setdefault("n_arms", 100)
    arms.setdefault("skip_top", 2)
    return {
        "data": data,
        "arms": arms,
        "offline": offline,
        "model": model,
        "train": train,
        "eval": eval_cfg,
        "seeds": raw.get("seeds", 1),
    }


def moe_train_one(cfg: dict, seed: int, out_dir: Path) -> dict:
    """Train one model (trainable gating or frozen random pools) and save it."""
    from .system import pool_allocate

    ds = _load_env_dataset(cfg["data"])
    cats = top_categories(ds, cfg["arms"]["n_arms"], cfg["arms"]["skip_top"])
    data_rng = np.random.default_rng(derive_seed(seed, 11))
    triples = moemod.build_offline_dataset(
        ds, cats, cfg["offline"]["c"], data_rng, balanced=cfg["offline"]["balanced"]
    )
    mdl_cfg = cfg["model"]
    frozen_pools = None
    if mdl_cfg["gating"] == "random-pools":
        frozen_pools = pool_allocate(
            len(cats), mdl_cfg["n_experts"], np.random.default_rng(derive_seed(seed, 12))
        )
    model = moemod.init_moe(
        n_arms=len(cats),
        d=ds.d,
        n_experts=mdl_cfg["n_experts"],
        d_e=mdl_cfg["d_e"],
        s=mdl_cfg["s"],
        seed=derive_seed(seed, 13),
        sigma=mdl_cfg["sigma"],
        shared_subset=mdl_cfg["shared_subset"],
        gate_subset=mdl_cfg.get("gate_subset"),
        frozen_pools=frozen_pools,
    )
    if mdl_cfg["gating_init"] == "balanced-affinity":
        moemod.balanced_affinity_gating_init(model, triples)
    trace = moemod.moe_train(
        model,
        triples,
        optimizer=cfg["train"]["optimizer"],
        learning_rate=cfg["train"]["learning_rate"],
        steps=cfg["train"]["steps"],
        batch_size=cfg["train"]["batch_size"],
        seed=derive_seed(seed, 14),
        trace_every=cfg["train"]["trace_every"],
        gate_learning_rate=cfg["train"]["gate_learning_rate"],
        sigma_anneal_from=cfg["train"]["sigma_anneal_from"],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"{mdl_cfg['gating']}-seed{seed}"
    moemod.save_checkpoint(model, out_dir / f"{name}.tsmoe")
    with (out_dir / f"{name}.trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loglik"])
        writer.writerows(trace)
    return {"model": model, "trace": trace, "arm_categories": cats, "dataset": ds}


def moe_eval_model(
    model: moemod.MoEModel,
    ds: envmod.MultiLabelDataset,
    arm_categories: list[int],
    n_test: int,
    k: int,
    test_seed: int,
) -> tuple[float, float]:
    rng = np.random.default_rng(test_seed)
    idx = rng.integers(0, ds.n_examples, size=min(n_test, ds.n_examples))
    x = ds.features[idx]
    cat_to_arm = {c: a for a, c in enumerate(arm_categories)}
    relevant = [
        {cat_to_arm[c] for c in ds.labels[i] if c in cat_to_arm} for i in idx
    ]
    scores = moemod.moe_score_matrix(model, x)
    return moemod.precision_recall_at_k(scores, relevant, k)


def cmd_moe_train(args) -> int:
    cfg = parse_moe_config(args.config)
    out_dir = Path(args.out)
    seeds = range(cfg["seeds"]) if isinstance(cfg["seeds"], int) else cfg["seeds"]
    for seed in seeds:
        res = moe_train_one(cfg, int(seed), out_dir)
        print(f"trained {cfg['model']['gating']} seed={seed} "
              f"final_loglik={res['trace'][-1][1]:.4f}")
    return 0


def cmd_moe_eval(args) -> int:
    cfg = parse_moe_config(args.config)
    ds = _load_env_dataset(cfg["data"])
    cats = top_categories(ds, cfg["arms"]["n_arms"], cfg["arms"]["skip_top"])
    rows = []
    for path in sorted(Path(args.models).glob("*.tsmoe")):
        model = moemod.load_checkpoint(path)
        m = re.match(r"(?P<model>.+)-seed(?P<seed>\d+)$", path.stem)
        name, seed = (m["model"], int(m["seed"])) if m else (path.stem, -1)
        p, r = moe_eval_model(
            model, ds, cats, cfg["eval"]["n_test"], cfg["eval"]["k"], cfg["eval"]["test_seed"]
        )
        rows.append(
            {
                "model": name,
                "seed": seed,
                "c": cfg["offline"]["c"],
                "s": cfg["model"]["s"],
                "d_e": cfg["model"]["d_e"],
                "N": cfg["model"]["n_experts"],
                "precision_at_5": p,
                "recall_at_5": r,
            }
        )
        print(f"{name} seed={seed} precision@{cfg['eval']['k']}={p:.4f} recall={r:.4f}")
    if not rows:
        raise ConfigError(f"no .tsmoe checkpoints under {args.models}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["model", "seed", "c", "s", "d_e", "N", "precision_at_5", "recall_at_5"],
        )
        writer.writeheader()
        writer.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# Entry points


def cmd_run(args, kind: str) -> int:
    config = parse_config(args.config)
    if config["env"]["kind"] != kind:
        raise ConfigError(f"{args.config}: env.kind must be {kind!r} for this subcommand")
    if args.seeds is not None:
        config["seeds"] = args.seeds
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [run_one(config, si, 0, out_dir) for si in seed_list(config)]
    frame = pd.DataFrame(rows)
    frame.to_csv(out_dir / "summary.csv", index=False)
    for row in rows:
        print(
            f"seed {row['seed_index']}: regret_2s={row['regret_2s']:.3f} "
            f"nom={row['regret_nom']:.3f} rank={row['regret_rank']:.3f} "
            f"relative={row['relative_regret']}"
        )
    return 0


def cmd_sweep(args) -> int:
    config = parse_config(args.config)
    if args.seeds is not None:
        config["seeds"] = args.seeds
    stats = run_sweep(config, Path(args.out), parallelism=args.parallel, resume=args.resume)
    print(
        f"cells={stats['cells']} executed={stats['executed']} "
        f"skipped={stats['skipped']} failures={stats['failures']}"
    )
    return 0 if stats["failures"] == 0 else 3


def cmd_counterexample(args) -> int:
    if args.setting == "supervised":
        rbar = json.loads(args.rbar) if args.rbar else ([0.25, 0.5, 1.0] if args.construction == "three-arm" else [0.75, 1.0, 1 / 6, 0.875])
        report = cx.supervised_limit_check(
            args.construction, rbar, args.mode, T=args.T, seed=args.seed
        )
        payload = {
            "mode": report["mode"],
            "construction": report["construction"],
            "theta_hat": list(report["theta_hat"]),
            "theta_star": list(report["theta_star"]),
            "argmax_arm": report["argmax_arm"],
            "regret_slope_grid": [],
        }
    else:
        demo = cx.bandit_regret_demo(
            args.mode,
            with_third_nominator=args.third_nominator,
            T=args.T,
            seed=args.seed,
        )
        payload = {
            "mode": demo["mode"],
            "construction": demo["construction"],
            "theta_hat": list(demo["theta_hat"]),
            "theta_star": list(demo["theta_star"]),
            "argmax_arm": demo["argmax_arm"],
            "regret_slope_grid": demo["regret_slope_grid"],
        }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_coverage_prob(args) -> int:
    rng = np.random.default_rng(args.seed)
    est = candidate_coverage_probability(args.pools, args.frac_optimal, args.trials, rng)
    closed = 1.0 - (1.0 - args.frac_optimal) ** args.pools
    print(json.dumps({"estimate": est, "closed_form": closed, "trials": args.trials}))
    return 0


def cmd_summarize(args) -> int:
    out = Path(args.out) if args.out else Path(args.results) / "aggregate.csv"
    agg = summarize(Path(args.results), out)
    print(f"wrote {out} ({len(agg)} cells)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, kind in (("synth-run", "synthetic"), ("dataset-run", "dataset")):
        p = sub.add_parser(name, help=f"run one {kind} experiment cell")
        p.add_argument("--config", required=True)
        p.add_argument("--seeds", type=int, default=None)
        p.add_argument("--out", required=True)
        p.set_defaults(func=lambda a, k=kind: cmd_run(a, k))

    p = sub.add_parser("sweep", help="run a config sweep grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("counterexample", help="analytic construction reports")
    p.add_argument("--construction", choices=["three-arm", "four-arm"], default="four-arm")
    p.add_argument("--mode", choices=["train-on-all", "train-on-own"], required=True)
    p.add_argument("--setting", choices=["supervised", "bandit"], default="bandit")
    p.add_argument("--rbar", default=None, help="JSON list of mean rewards (supervised)")
    p.add_argument("--third-nominator", action="store_true")
    p.add_argument("--T", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("moe-train", help="train mixture-of-experts models")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_moe_train)

    p = sub.add_parser("moe-eval", help="precision/recall@K for saved models")
    p.add_argument("--config", required=True)
    p.add_argument("--models", required=True, help="directory of .tsmoe checkpoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_moe_eval)

    p = sub.add_parser("coverage-prob", help="candidate coverage Monte Carlo")
    p.add_argument("--pools", type=int, required=True)
    p.add_argument("--frac-optimal", type=float, required=True)
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_coverage_prob)

    p = sub.add_parser("summarize", help="aggregate run summaries")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_summarize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
