"""Experiment orchestration: datasets, cell training, evaluation, results CSV."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_dataset, make_history_windows, manifest_path, save_dataset, split
from .data import collect_demonstrations
from .diagnostics import (RESULT_COLUMNS, Baselines, DiagnosticsError, MetricsRecord,
                          bc_test_mse, evaluate_policy, excess_info_probe, predictability_ratio,
                          reference_rewards, train_action_probe)
from .envs import ExpertPolicy, rollout_batch, uniform_random_policy
from .policies import build_policy, load_checkpoint, save_checkpoint
from .training import train_dagger, train_policy, write_log_csv

log = logging.getLogger(__name__)

THREADS_ENV = "COPYCAT_LAB_THREADS"


class HarnessError(RuntimeError):
    """A stage failed for a reason other than bad configuration."""


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def run_pool(fn, jobs: list, workers: int | None = None) -> list:
    """Map ``fn`` over ``jobs`` in order, with at most ``workers`` processes."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

@dataclass
class Layout:
    root: Path

    def dataset(self, env: str) -> Path:
        return self.root / "data" / f"{env}.jsonl"

    def cell(self, method: str, env: str, seed: int) -> Path:
        return self.root / "cells" / env / method / f"seed_{seed}"

    @property
    def results(self) -> Path:
        return self.root / "results.csv"

    @property
    def report(self) -> Path:
        return self.root / "report"


def layout_for(config: ExperimentConfig, out: str | None = None) -> Layout:
    return Layout(Path(out if out is not None else config.output_dir))


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------

def collect(config: ExperimentConfig, layout: Layout, env: str | None = None,
            overwrite: bool = False) -> list[Path]:
    written = []
    envs = [env] if env is not None else list(config.envs)
    n = config.dataset.n_train + config.dataset.n_test
    for name in envs:
        path = layout.dataset(name)
        if path.exists() and not overwrite:
            raise ConfigError(f"{path} exists; pass --overwrite to replace it")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise HarnessError(f"cannot create {path.parent}: {exc.strerror or exc}") from exc
        ds = collect_demonstrations(config.env(name), n, config.dataset.seed_base)
        try:
            save_dataset(ds, path)
        except OSError as exc:
            raise HarnessError(f"cannot write {path}: {exc.strerror or exc}") from exc
        written += [path, manifest_path(path)]
    return written


def load_split(config: ExperimentConfig, layout: Layout, env: str) -> tuple[Dataset, Dataset]:
    path = layout.dataset(env)
    if not path.exists():
        raise ConfigError(f"missing dataset {path}; run `collect` first")
    ds = load_dataset(path, config.env(env).config_hash())
    frac = config.dataset.n_test / len(ds)
    return split(ds, frac, config.dataset.split_seed)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train_cell(config: ExperimentConfig, root: str, method: str, env: str, seed: int) -> dict:
    """Train one (method, env, seed) cell and write checkpoints plus its log."""
    layout = Layout(Path(root))
    train_ds, _ = load_split(config, layout, env)
    spec = config.policy_spec(method, env)
    tcfg = config.training_config(method, env, seed)
    dcfg = config.dagger_config(method, seed)
    env_cfg = config.env(env)
    meta = {"method": method, "env": env, "seed": seed}
    if dcfg is not None:
        res = train_dagger(train_ds, env_cfg, spec, tcfg, dcfg, init_seed=seed)
        meta.update(queries_used=res.queries_used, dagger_rounds=res.rounds)
    else:
        policy = build_policy(spec, seed, env_cfg)
        res = train_policy(policy, make_history_windows(train_ds, spec.H), tcfg)
    out = layout.cell(method, env, seed)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for it, snap in res.checkpoints:
        res.policy.params.load(snap)
        name = f"ckpt_{it:06d}.json"
        save_checkpoint(res.policy, out / name, {"iteration": it, **meta})
        names.append(name)
    write_log_csv(res.log, out / "train_log.csv")
    meta["checkpoints"] = names
    (out / "cell.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def timed_train_cell(*args) -> tuple[dict, float]:
    t0 = time.perf_counter()
    meta = train_cell(*args)
    return meta, time.perf_counter() - t0


def train_cells(config: ExperimentConfig, layout: Layout, cells: list, overwrite: bool = False,
                workers: int | None = None) -> list[tuple[dict, float]]:
    """Train every cell; returns ``(meta, wall seconds)`` per cell in order."""
    for env in sorted({e for _, e, _ in cells}):
        if not layout.dataset(env).exists():
            raise ConfigError(f"missing dataset {layout.dataset(env)}; run `collect` first")
    for m, e, s in cells:
        d = layout.cell(m, e, s)
        if d.exists():
            if not overwrite:
                raise ConfigError(f"{d} exists; pass --overwrite to retrain")
            shutil.rmtree(d)
    jobs = [(config, str(layout.root), m, e, s) for m, e, s in cells]
    return run_pool(timed_train_cell, jobs, workers)


def cell_checkpoints(layout: Layout, method: str, env: str, seed: int, env_cfg=None) -> list:
    d = layout.cell(method, env, seed)
    meta_path = d / "cell.json"
    if not meta_path.exists():
        raise ConfigError(f"missing checkpoints for {method}/{env}/seed {seed} under {d}")
    names = json.loads(meta_path.read_text())["checkpoints"]
    if not names:
        raise ConfigError(f"no checkpoints recorded in {meta_path}")
    return [load_checkpoint(d / n, env_cfg) for n in names]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@dataclass
class EnvContext:
    """Per-env reference numbers shared by every cell of that env."""
    env: str
    baselines: Baselines
    expert_reward_std: float
    expert_probe_mse: float
    at_only_mse: float
    random_reward_std: float | None = None
    random_probe_mse: float | None = None

    def reference_rows(self) -> list[MetricsRecord]:
        rows = [MetricsRecord("expert", self.env, 0, self.baselines.expert, self.expert_reward_std,
                              1.0, self.expert_probe_mse, 0.0, self.at_only_mse, 0.0)]
        if self.baselines.random is not None:
            rows.append(MetricsRecord(
                "random", self.env, 0, self.baselines.random, self.random_reward_std, 0.0,
                self.random_probe_mse,
                predictability_ratio(self.expert_probe_mse, self.random_probe_mse)))
        return rows


def env_context(config: ExperimentConfig, layout: Layout, env: str) -> EnvContext:
    ev = config.eval
    env_cfg = config.env(env)
    pcfg = ev.probe_config()
    base = reference_rewards(env_cfg, ev.episode_seeds())
    exp_std = float(np.std([t.cumulative_reward for t in base.expert_trajectories]))
    probe_trajs = rollout_batch(ExpertPolicy(), env_cfg, ev.probe_seeds(), 1)
    exp_probe = train_action_probe(probe_trajs, pcfg, ev.probe_heldout).mse
    train_ds, test_ds = load_split(config, layout, env)
    at_only = float("nan")
    if ev.excess_info:
        at_only = excess_info_probe("at_only", make_history_windows(train_ds, 1),
                                    make_history_windows(test_ds, 1), config=pcfg).mse
    ctx = EnvContext(env, base, exp_std, exp_probe, at_only)
    if base.random is not None:
        rand = rollout_batch(uniform_random_policy(env_cfg, 0), env_cfg, ev.episode_seeds(), 1)
        ctx.random_reward_std = float(np.std([t.cumulative_reward for t in rand]))
        rtrajs = rollout_batch(uniform_random_policy(env_cfg, 1), env_cfg, ev.probe_seeds(), 1)
        ctx.random_probe_mse = train_action_probe(rtrajs, pcfg, ev.probe_heldout).mse
    return ctx


def eval_cell(config: ExperimentConfig, root: str, ctx: EnvContext, method: str, env: str,
              seed: int) -> MetricsRecord:
    layout = Layout(Path(root))
    ev = config.eval
    env_cfg = config.env(env)
    spec = config.policy_spec(method, env)
    ckpts = cell_checkpoints(layout, method, env, seed, env_cfg)
    result = evaluate_policy(ckpts, env_cfg, ev.episode_seeds(), spec.H)
    final = ckpts[-1]
    pcfg = ev.probe_config()
    probe_trajs = rollout_batch(final, env_cfg, ev.probe_seeds(), spec.H)
    pred = train_action_probe(probe_trajs, pcfg, ev.probe_heldout).mse
    train_ds, test_ds = load_split(config, layout, env)
    tr_w, te_w = make_history_windows(train_ds, spec.H), make_history_windows(test_ds, spec.H)
    excess = float("nan")
    if ev.excess_info:
        mode = "mu_and_at" if spec.variant == "tca_ib" else "baseline_features"
        excess = excess_info_probe(mode, tr_w, te_w, final.features(tr_w.obs),
                                   final.features(te_w.obs), pcfg).mse
    return MetricsRecord(method, env, seed, result.mean, result.std,
                         ctx.baselines.normalize(result.mean), pred,
                         predictability_ratio(ctx.expert_probe_mse, pred), excess,
                         bc_test_mse(final, te_w))


def evaluate_cells(config: ExperimentConfig, layout: Layout, cells: list,
                   workers: int | None = None, with_references: bool = True) -> list[MetricsRecord]:
    for m, e, s in cells:
        if not (layout.cell(m, e, s) / "cell.json").exists():
            raise ConfigError(f"missing checkpoints for {m}/{e}/seed {s}; run `train` first")
    envs = list(dict.fromkeys(e for _, e, _ in cells))
    contexts = {e: env_context(config, layout, e) for e in envs}
    rows = run_pool(eval_cell, [(config, str(layout.root), contexts[e], m, e, s)
                                for m, e, s in cells], workers)
    out = []
    for e in envs:
        if with_references:
            out += contexts[e].reference_rows()
        out += [r for r in rows if r.env == e]
    return out


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_results(rows: list[MetricsRecord], path: Path, overwrite: bool) -> None:
    """Append rows; with ``overwrite`` rows sharing a (method, env, seed) key are
    replaced where they stand."""
    existing = read_results(path) if path.exists() else []
    if overwrite:
        fresh = {(r.method, r.env, r.seed): r for r in rows}
        out = [fresh.pop((r.method, r.env, r.seed), r) for r in existing]
        out += [r for r in rows if (r.method, r.env, r.seed) in fresh]
    else:
        out = existing + list(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in out:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def read_results(path) -> list[MetricsRecord]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read results {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULT_COLUMNS:
            raise DiagnosticsError(f"{path}: header must be {','.join(RESULT_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(RESULT_COLUMNS):
                raise DiagnosticsError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields")
            try:
                vals = [rec[0], rec[1], int(rec[2]), *(float(x) for x in rec[3:])]
                rows.append(MetricsRecord(*vals))
            except ValueError as exc:
                raise DiagnosticsError(f"{path}:{lineno}: {exc}") from exc
    return rows
