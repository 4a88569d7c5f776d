"""Measurements: action-predictability probes, normalised reward, the
excess-information probe, held-out BC error and checkpoint-averaged evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore, Tensor
from .data import WindowBatch
from .envs import EnvConfig, ExpertPolicy, Trajectory, rollout_batch, uniform_random_policy
from .policies import MLP, Policy

PROBE_MODES = ("mu_and_at", "at_only", "baseline_features")


class DiagnosticsError(ValueError):
    pass


@dataclass
class ProbeConfig:
    k: int = 9
    widths: tuple[int, ...] = (64, 64)
    n_iters: int = 5000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.k < 1:
            raise DiagnosticsError("probe history k must be >= 1")
        if self.n_iters < 1 or self.batch_size < 1:
            raise DiagnosticsError("probe n_iters and batch_size must be >= 1")


@dataclass
class ProbeResult:
    mse: float
    train_mse: float
    target_var: float
    n_train: int
    n_test: int


def fit_probe(X_train: np.ndarray, y_train: np.ndarray, X_test: np.ndarray, y_test: np.ndarray,
              config: ProbeConfig) -> ProbeResult:
    """Train a small MLP regressor and report its held-out MSE.

    Inputs are standardised with training statistics; constant columns are
    left centred but unscaled.
    """
    if len(X_train) == 0 or len(X_test) == 0:
        raise DiagnosticsError("probe needs non-empty train and test sets")
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    std[std < 1e-8] = 1.0
    Xtr, Xte = (X_train - mean) / std, (X_test - mean) / std
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    net = MLP(store, "probe", [Xtr.shape[1], *config.widths, y_train.shape[1]], "probe", rng)
    state = AdamState()
    n = len(Xtr)
    for _ in range(config.n_iters):
        idx = rng.integers(0, n, size=config.batch_size)
        store.zero_grad()
        loss = ad.mse_loss(net(Tensor(Xtr[idx])), Tensor(y_train[idx]))
        loss.backward()
        ad.adam_step(store, store.grads(("probe",)), state, config.lr, ("probe",))
    mse = float(np.mean((net.forward_np(Xte) - y_test) ** 2))
    train_mse = float(np.mean((net.forward_np(Xtr) - y_train) ** 2))
    return ProbeResult(mse, train_mse, float(np.var(y_test)), len(Xtr), len(Xte))


# ---------------------------------------------------------------------------
# action predictability
# ---------------------------------------------------------------------------

def lagged_actions(actions: np.ndarray, k: int) -> np.ndarray:
    """Rows ``[a_{t-1}, ..., a_{t-k}]``, zero before the episode start."""
    n, d = actions.shape
    padded = np.vstack([np.zeros((k, d)), actions])
    return np.hstack([padded[k - j:k - j + n] for j in range(1, k + 1)])


def _probe_xy(trajs: Sequence[Trajectory], k: int):
    X = np.vstack([lagged_actions(t.act, k) for t in trajs])
    y = np.vstack([t.act for t in trajs])
    return X, y


def train_action_probe(trajectories: Sequence[Trajectory], config: ProbeConfig | None = None,
                       n_heldout: int | None = None) -> ProbeResult:
    """Predict ``a_t`` from the ``k`` previous actions; held-out MSE.

    The last ``n_heldout`` trajectories (default a fifth, at least one) are
    kept for testing.
    """
    config = config or ProbeConfig()
    trajs = list(trajectories)
    if len(trajs) < 2:
        raise DiagnosticsError("action probe needs at least two rollouts")
    if n_heldout is None:
        n_heldout = max(1, len(trajs) // 5)
    if not 1 <= n_heldout < len(trajs):
        raise DiagnosticsError("n_heldout must leave trajectories on both sides")
    Xtr, ytr = _probe_xy(trajs[:-n_heldout], config.k)
    Xte, yte = _probe_xy(trajs[-n_heldout:], config.k)
    return fit_probe(Xtr, ytr, Xte, yte, config)


def predictability_ratio(mse_expert: float, mse_policy: float) -> float:
    """``ln(mse_expert / mse_policy)``; positive when the policy is the more
    self-predictable of the two."""
    if not (mse_expert > 0 and mse_policy > 0):
        raise DiagnosticsError("predictability ratio needs positive MSEs")
    return math.log(mse_expert / mse_policy)


def normalized_reward(reward: float, expert_reward: float,
                      random_reward: float | None = None) -> float:
    """Plain ratio to the expert, or min-max against a random baseline."""
    if random_reward is None:
        if expert_reward == 0:
            raise DiagnosticsError("expert reward of zero cannot normalise")
        return reward / expert_reward
    span = expert_reward - random_reward
    if span == 0:
        raise DiagnosticsError("expert and random rewards coincide")
    return (reward - random_reward) / span


def uses_min_max(config: EnvConfig) -> bool:
    """Negative-reward tasks are normalised against a random policy."""
    return config.kind == "inertial_tracker"


# ---------------------------------------------------------------------------
# excess information and held-out BC error
# ---------------------------------------------------------------------------

def excess_info_inputs(mode: str, a_t: np.ndarray, features: np.ndarray | None = None) -> np.ndarray:
    if mode not in PROBE_MODES:
        raise DiagnosticsError(f"unknown probe mode {mode!r}; expected one of {PROBE_MODES}")
    if mode == "at_only":
        if features is not None:
            raise DiagnosticsError("at_only mode takes no features")
        return a_t
    if features is None or len(features) != len(a_t):
        raise DiagnosticsError(f"mode {mode} needs one feature row per window")
    return np.hstack([features, a_t])


def excess_info_probe(mode: str, train: WindowBatch, test: WindowBatch,
                      train_features: np.ndarray | None = None,
                      test_features: np.ndarray | None = None,
                      config: ProbeConfig | None = None) -> ProbeResult:
    """Held-out MSE predicting ``a_{t-1}`` from features and ``a_t``.

    Boundary windows have no previous action and are dropped.  Higher
    means less left-over information about the previous action.
    """
    config = config or ProbeConfig()
    keep_tr, keep_te = ~train.boundary, ~test.boundary
    Xtr = excess_info_inputs(mode, train.action, train_features)[keep_tr]
    Xte = excess_info_inputs(mode, test.action, test_features)[keep_te]
    return fit_probe(Xtr, train.prev_action[keep_tr], Xte, test.prev_action[keep_te], config)


def bc_test_mse(policy, windows: WindowBatch) -> float:
    """MSE of the deterministic, unclamped output against ``a_t``."""
    if len(windows) == 0:
        raise DiagnosticsError("empty test set")
    if hasattr(policy, "act"):
        pred = policy.act(windows.obs, clamp=False)
    else:
        pred = np.asarray(policy(windows.obs), dtype=np.float64)
    return float(np.mean((pred - windows.action) ** 2))


# ---------------------------------------------------------------------------
# environment evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    rewards: np.ndarray                 # (n_checkpoints, n_episodes)
    trajectories: list[Trajectory]      # of the last checkpoint

    @property
    def mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def std(self) -> float:
        return float(self.rewards.std())


def evaluate_policy(checkpoints: Sequence, config: EnvConfig, seeds: Sequence[int],
                    H: int = 1) -> Evaluation:
    """Mean cumulative reward over every (checkpoint, episode) pair."""
    if not checkpoints:
        raise DiagnosticsError("need at least one checkpoint")
    rows, last = [], []
    for pol in checkpoints:
        spec = getattr(pol, "spec", None)
        if spec is not None and spec.obs_dim != config.obs_dim:
            raise DiagnosticsError(f"policy obs_dim {spec.obs_dim} != env obs_dim {config.obs_dim}")
        last = rollout_batch(pol, config, seeds, H)
        rows.append([t.cumulative_reward for t in last])
    return Evaluation(np.array(rows), last)


@dataclass
class Baselines:
    """Reference rewards used for normalisation on one env."""
    expert: float
    random: float | None
    expert_trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    def normalize(self, reward: float) -> float:
        return normalized_reward(reward, self.expert, self.random)


def reference_rewards(config: EnvConfig, seeds: Sequence[int], random_seed: int = 0) -> Baselines:
    expert = rollout_batch(ExpertPolicy(), config, seeds, 1)
    r_exp = float(np.mean([t.cumulative_reward for t in expert]))
    r_rand = None
    if uses_min_max(config):
        rand = rollout_batch(uniform_random_policy(config, random_seed), config, seeds, 1)
        r_rand = float(np.mean([t.cumulative_reward for t in rand]))
    return Baselines(r_exp, r_rand, expert)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ("method", "env", "seed", "reward_mean", "reward_std", "norm_reward",
                  "pred_mse", "pred_ratio", "excess_info_mse", "bc_test_mse")


@dataclass
class MetricsRecord:
    method: str
    env: str
    seed: int
    reward_mean: float
    reward_std: float
    norm_reward: float
    pred_mse: float = float("nan")
    pred_ratio: float = float("nan")
    excess_info_mse: float = float("nan")
    bc_test_mse: float = float("nan")

    def __post_init__(self):
        if self.reward_std < 0:
            raise DiagnosticsError("reward_std must be non-negative")

    def row(self) -> dict:
        return asdict(self)


@dataclass
class Summary:
    """Mean and std over seeds of every numeric column."""
    method: str
    env: str
    n: int
    mean: dict
    std: dict


def summarize(records: Sequence[MetricsRecord]) -> list[Summary]:
    groups: dict[tuple[str, str], list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.env), []).append(r)
    out = []
    for (method, env), rs in groups.items():
        cols = RESULT_COLUMNS[3:]
        vals = {c: np.array([getattr(r, c) for r in rs], dtype=np.float64) for c in cols}
        out.append(Summary(method, env, len(rs),
                           {c: float(np.mean(v)) for c, v in vals.items()},
                           {c: float(np.std(v)) for c, v in vals.items()}))
    return out
