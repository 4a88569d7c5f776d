"""Pass/fail checks for the acceptance criteria.

Checks 1, 2 and 4 compute their own evidence; 3 and 5-9 read a finished
results table; 10 inspects files written by a run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, WindowBatch, load_dataset, make_history_windows, trajectory_line
from .diagnostics import MetricsRecord, ProbeConfig, fit_probe, summarize
from .envs import EnvConfig, rollout_batch
from .policies import PolicySpec, TCAIBModel, build_policy, checkpoint_text, load_checkpoint
from .training import TrainingConfig, objective_V

# "much smaller than" in the excess-information ordering
MUCH_LESS = 0.2


@dataclass
class Criterion:
    number: int
    title: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.title}: {self.detail}"


# ---------------------------------------------------------------------------
# 1, 2: numerics
# ---------------------------------------------------------------------------

def toy_objective_check(seed: int, tolerance: float = 1e-4) -> ad.GradCheckReport:
    """Finite-difference check of the full objective on one small random instance."""
    rng = np.random.default_rng(seed)
    spec = PolicySpec("tca_ib", obs_dim=3, act_dim=2, H=2, d_e=4, enc_widths=(6, 6),
                      dec_widths=(5,), adv_widths=(5,))
    model = TCAIBModel(spec, seed)
    n = 5
    batch = WindowBatch(rng.standard_normal((n, spec.input_dim)), rng.uniform(-1, 1, (n, 2)),
                        rng.uniform(-1, 1, (n, 2)), np.zeros(n, int), np.arange(n),
                        np.array([True, False, False, False, False]), spec.H)
    noise = rng.standard_normal((n, spec.d_e))
    cfg = TrainingConfig(alpha=2.0, lam=1e-3)
    return ad.grad_check(lambda: objective_V(model, batch, noise, cfg).V, model.params, tolerance)


def check_gradients(n_instances: int = 10) -> Criterion:
    t0 = time.perf_counter()
    worst = max(toy_objective_check(s).worst for s in range(n_instances))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 10.0
    return Criterion(1, "gradient check", ok,
                     f"worst relative error {worst:.2e} (<= 1e-4) in {dt:.1f}s (< 10s)")


def check_kl(n: int = 1000, seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        mu = rng.normal(0, 2, (1, d))
        sigma = rng.uniform(0.05, 3.0, (1, d))
        exact = 0.5 * np.sum(mu ** 2 + sigma ** 2 - 1.0 - np.log(sigma ** 2))
        got = ad.kl_diag_gaussian(Tensor(mu), Tensor(sigma)).item()
        worst = max(worst, abs(got - exact))
    at_zero = ad.kl_diag_gaussian(Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4)))).item()
    ok = worst <= 1e-12 and at_zero == 0.0
    return Criterion(2, "KL exactness", ok, f"max abs error {worst:.1e} (<= 1e-12), KL(0,1) = {at_zero}")


# ---------------------------------------------------------------------------
# 4: shortcut existence and oracle failure
# ---------------------------------------------------------------------------

def two_frame_inputs(windows: WindowBatch, obs_dim: int) -> np.ndarray:
    """``[o_t, o_t - o_{t-1}]``: the same information as the two newest frames."""
    o_t, o_p = windows.obs[:, :obs_dim], windows.obs[:, obs_dim:2 * obs_dim]
    return np.hstack([o_t, o_t - o_p])


def shortcut_probe(train: Dataset, test: Dataset, config: ProbeConfig) -> tuple[float, float]:
    """Held-out MSE of recovering ``a_{t-1}`` from two frames, and the target variance."""
    tr, te = make_history_windows(train, 2), make_history_windows(test, 2)
    d = train.obs_dim
    ktr, kte = ~tr.boundary, ~te.boundary
    res = fit_probe(two_frame_inputs(tr, d)[ktr], tr.prev_action[ktr],
                    two_frame_inputs(te, d)[kte], te.prev_action[kte], config)
    return res.mse, float(np.var(te.prev_action[kte]))


def oracle_reward(env: EnvConfig, seeds: Sequence[int], H: int) -> float:
    spec = PolicySpec("copycat_oracle", env.obs_dim, env.act_dim, H=H)
    trajs = rollout_batch(build_policy(spec, 0, env), env, seeds, H)
    return float(np.mean([t.cumulative_reward for t in trajs]))


def check_shortcut(train: Dataset, test: Dataset, env: EnvConfig, seeds: Sequence[int],
                   expert_reward: float, H: int, config: ProbeConfig) -> Criterion:
    mse, var = shortcut_probe(train, test, config)
    r_oracle = oracle_reward(env, seeds, H)
    frac = r_oracle / expert_reward
    ok = mse < 0.1 * var and frac < 0.2
    return Criterion(4, "shortcut exists and fails", ok,
                     f"{env.kind}: probe MSE {mse:.3e} vs 10% of var {0.1 * var:.3e}; "
                     f"oracle reward {frac:.3f} x expert (< 0.2)")


# ---------------------------------------------------------------------------
# 3, 5-9: orderings over the results table
# ---------------------------------------------------------------------------

class _Table:
    def __init__(self, records: Sequence[MetricsRecord]):
        self.s = {(s.method, s.env): s for s in summarize(records)}
        self.envs = list(dict.fromkeys(r.env for r in records))

    def get(self, method: str, env: str, col: str) -> float:
        s = self.s.get((method, env))
        return float("nan") if s is None else s.mean[col]


def _fmt(x: float) -> str:
    return f"{x:.3g}" if math.isfinite(x) else "nan"


def check_copycat(records, bc_oh_train_seconds: float | None = None) -> Criterion:
    t = _Table(records)
    parts, ok = [], True
    for e in t.envs:
        r = t.get("bc_oh", e, "pred_ratio")
        ok &= r > 0.3
        parts.append(f"{e} ratio {_fmt(r)}")
    if bc_oh_train_seconds is not None:
        ok &= bc_oh_train_seconds < 120.0
        parts.append(f"slowest bc_oh cell {bc_oh_train_seconds:.1f}s (< 120s)")
    return Criterion(3, "copycat reproduction (ratio > 0.3)", ok, "; ".join(parts))


def check_efficacy(records) -> Criterion:
    t = _Table(records)
    parts, ok = [], True
    for e in t.envs:
        n_t, n_b = t.get("tca_ib", e, "norm_reward"), t.get("bc_oh", e, "norm_reward")
        r_t, r_b = t.get("tca_ib", e, "pred_ratio"), t.get("bc_oh", e, "pred_ratio")
        ok &= (n_t >= n_b + 0.1) and (abs(r_t) < abs(r_b))
        parts.append(f"{e} norm {_fmt(n_t)} vs {_fmt(n_b)}+0.1, |ratio| {_fmt(abs(r_t))} vs {_fmt(abs(r_b))}")
    return Criterion(5, "TCA+IB efficacy", ok, "; ".join(parts))


def check_ablations(records, tracker: str = "inertial_tracker") -> Criterion:
    t = _Table(records)
    parts, ok = [], True
    for e in t.envs:
        base = t.get("bc_oh", e, "norm_reward")
        vals = {m: t.get(m, e, "norm_reward") for m in ("tca_ib", "wo_ib", "wo_adv")}
        ok &= all(v >= base for v in vals.values())
        parts.append(f"{e} norm bc_oh {_fmt(base)} <= " + ", ".join(f"{m} {_fmt(v)}" for m, v in vals.items()))
    a, b, c = (t.get(m, tracker, "bc_test_mse") for m in ("bc_oh", "wo_ib", "wo_tca"))
    ok &= a < b < c
    parts.append(f"{tracker} test MSE bc_oh {_fmt(a)} < wo_ib {_fmt(b)} < wo_tca {_fmt(c)}")
    return Criterion(6, "ablation ordering", ok, "; ".join(parts))


def check_excess_info(records, tracker: str = "inertial_tracker") -> Criterion:
    t = _Table(records)
    bc = t.get("bc_oh", tracker, "excess_info_mse")
    at = t.get("expert", tracker, "excess_info_mse")
    tca = t.get("tca_ib", tracker, "excess_info_mse")
    ok = bc <= MUCH_LESS * at and at <= 1.25 * tca
    return Criterion(7, "excess-information ordering", ok,
                     f"{tracker}: bc_oh {_fmt(bc)} <= {MUCH_LESS} x a_t-only {_fmt(at)}; "
                     f"a_t-only <= 1.25 x tca_ib {_fmt(1.25 * tca)}")


def check_no_overfit(records) -> Criterion:
    t = _Table(records)
    parts, ok = [], True
    for e in t.envs:
        oh, so = t.get("bc_oh", e, "bc_test_mse"), t.get("bc_so", e, "bc_test_mse")
        n_oh, n_t = t.get("bc_oh", e, "norm_reward"), t.get("tca_ib", e, "norm_reward")
        ok &= oh < so and n_oh <= n_t
        parts.append(f"{e} test MSE bc_oh {_fmt(oh)} < bc_so {_fmt(so)}, norm {_fmt(n_oh)} <= {_fmt(n_t)}")
    return Criterion(8, "no over-fitting", ok, "; ".join(parts))


def check_dagger(records) -> Criterion:
    t = _Table(records)
    parts, ok = [], True
    for e in t.envs:
        d1k, d100, oh = (t.get(m, e, "reward_mean") for m in ("dagger_1000", "dagger_100", "bc_oh"))
        ok &= d1k >= d100 >= oh
        parts.append(f"{e} {_fmt(d1k)} >= {_fmt(d100)} >= {_fmt(oh)}")
    return Criterion(9, "DAGGER trend", ok, "; ".join(parts))


def check_results(records, bc_oh_train_seconds: float | None = None) -> list[Criterion]:
    return [check_copycat(records, bc_oh_train_seconds), check_efficacy(records),
            check_ablations(records), check_excess_info(records), check_no_overfit(records),
            check_dagger(records)]


# ---------------------------------------------------------------------------
# 10: formats and runtime
# ---------------------------------------------------------------------------

def check_formats(dataset_paths, checkpoint_paths, elapsed: float, workers: int) -> Criterion:
    """Reloading and re-serialising every file must reproduce it byte for byte."""
    bad = []
    for p in dataset_paths:
        ds = load_dataset(p)
        if "".join(trajectory_line(t) + "\n" for t in ds.trajectories) != Path(p).read_text():
            bad.append(str(p))
    for p in checkpoint_paths:
        pol = load_checkpoint(p)
        extra = json.loads(Path(p).read_text()).get("extra")
        if checkpoint_text(pol, extra) != Path(p).read_text():
            bad.append(str(p))
    budget = 45 * 60 if workers <= 1 else 15 * 60
    ok = not bad and elapsed < budget
    detail = (f"{len(dataset_paths)} datasets and {len(checkpoint_paths)} checkpoints round-trip"
              + (f" except {bad[:3]}" if bad else "")
              + f"; run took {elapsed / 60:.1f} min with {workers} worker(s) (< {budget // 60} min)")
    return Criterion(10, "determinism and formats", ok, detail)
