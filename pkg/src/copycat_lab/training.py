"""Training loops: plain BC, the alternating min-max objective, and DAGGER."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore, Tensor
from .data import Dataset, WindowBatch, make_history_windows
from .envs import EnvConfig, rollout_batch
from .policies import Policy, PolicySpec, TCAIBModel, build_policy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "bc_loss", "kl", "adv_loss", "lr_EF", "lr_D")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainingConfig:
    lr_EF: float = 2e-4
    lr_D: float = 4e-4
    alpha: float = 2.0
    lam: float = 1e-3
    sigma_noise: float = 2.0
    batch_size: int = 64
    n_iters: int = 20_000
    decay_points: tuple[float, ...] = (0.5, 0.75, 0.9)
    decay_factor: float = 0.1
    mode: str = "joint"
    use_ib: bool = True
    staged_split: float = 0.5
    freeze_encoder: bool = False
    n_checkpoints: int = 5
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.decay_points = tuple(self.decay_points)
        self.validate()

    def validate(self) -> None:
        for name in ("lr_EF", "lr_D", "alpha", "lam", "sigma_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.n_iters < 1:
            raise ValueError("batch_size and n_iters must be >= 1")
        pts = self.decay_points
        if any(not 0.0 < p < 1.0 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("decay points must be strictly increasing in (0, 1)")
        if self.mode not in ("joint", "staged"):
            raise ValueError(f"unknown training mode {self.mode!r}")

    @property
    def ckpt_interval(self) -> int:
        return self.checkpoint_every or max(1, self.n_iters // 60)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainingConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d


def learning_rate(base: float, iteration: int, config: TrainingConfig) -> float:
    """Step schedule: multiply by ``decay_factor`` once ``iteration`` reaches each point."""
    frac = iteration / config.n_iters
    k = sum(1 for p in config.decay_points if frac >= p)
    return base * config.decay_factor ** k


def checkpoint_iterations(config: TrainingConfig) -> list[int]:
    """Iterations (1-based, after the update) at which snapshots are kept."""
    step = config.ckpt_interval
    its = [config.n_iters - k * step for k in range(config.n_checkpoints)]
    return sorted(i for i in its if i >= 1)


@dataclass
class TrainResult:
    policy: Policy
    checkpoints: list[tuple[int, dict]]
    log: list[dict] = field(default_factory=list)

    def policies_at_checkpoints(self) -> list[Policy]:
        out = []
        for _, snap in self.checkpoints:
            p = clone_policy(self.policy)
            p.params.load(snap)
            out.append(p)
        return out


def clone_policy(policy: Policy) -> Policy:
    p = build_policy(policy.spec, 0, getattr(policy, "env", None))
    p.params.load(policy.params.snapshot())
    p.normalizer.mean = policy.normalizer.mean.copy()
    p.normalizer.std = policy.normalizer.std.copy()
    return p


def write_log_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveTerms:
    V: Tensor
    bc_loss: Tensor
    kl: Tensor | None
    adv_loss: Tensor | None
    mu: Tensor

    def values(self) -> dict:
        return {"V": self.V.item(), "bc_loss": self.bc_loss.item(),
                "kl": 0.0 if self.kl is None else self.kl.item(),
                "adv_loss": 0.0 if self.adv_loss is None else self.adv_loss.item()}


def objective_V(model: TCAIBModel, batch: WindowBatch, reparam_noise: np.ndarray | None,
                config: TrainingConfig) -> ObjectiveTerms:
    """``bc + lam*KL - alpha*L(D(mu, a_t), a_{t-1})`` on one minibatch.

    ``reparam_noise=None`` feeds ``mu`` straight to F (no bottleneck
    sampling).  Boundary windows (t=0) are left out of the adversary term.
    """
    if len(batch) == 0:
        raise ValueError("objective_V needs a non-empty batch")
    mu, sigma = model.encode_tensor(batch.obs)
    use_ib = config.use_ib and reparam_noise is not None
    e = ad.reparam_sample(mu, sigma, reparam_noise) if use_ib else mu
    bc = ad.mse_loss(model.F(e), Tensor(batch.action))
    terms = [(1.0, bc)]
    kl = None
    if config.use_ib and config.lam > 0:
        kl = ad.kl_diag_gaussian(mu, sigma)
        terms.append((config.lam, kl))
    adv = None
    mask = ~batch.boundary
    if config.alpha > 0 and mask.any():
        pred = model.adversary_tensor(mu, batch.action)
        adv = ad.mse_loss(pred, Tensor(batch.prev_action), row_mask=mask)
        terms.append((-config.alpha, adv))
    V = ad.weighted_sum(terms) if len(terms) > 1 else bc
    return ObjectiveTerms(V, bc, kl, adv, mu)


def adversary_loss(model: TCAIBModel, mu: np.ndarray, batch: WindowBatch,
                   noise: np.ndarray | None) -> Tensor | None:
    """D's own regression loss on (mu + noise, a_t); mu is a constant here."""
    mask = ~batch.boundary
    if not mask.any():
        return None
    d_in = mu if noise is None else mu + noise
    pred = model.adversary_tensor(Tensor(d_in), batch.action)
    return ad.mse_loss(pred, Tensor(batch.prev_action), row_mask=mask)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _guard(value: float, it: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"bc_loss became non-finite at iteration {it}")


def _train_tca_phase(model: TCAIBModel, windows: WindowBatch, config: TrainingConfig,
                     rng: np.random.Generator, n_iters: int, ef_partitions: tuple,
                     checkpoints: list, log_rows: list, it_offset: int = 0,
                     total: TrainingConfig | None = None) -> None:
    params = model.params
    st_ef, st_d = AdamState(), AdamState()
    sched = total or config
    ckpt_its = set(checkpoint_iterations(sched))
    n = len(windows)
    train_d = config.alpha > 0
    for local_it in range(1, n_iters + 1):
        it = it_offset + local_it
        lr_ef = learning_rate(config.lr_EF, it - 1, sched)
        lr_d = learning_rate(config.lr_D, it - 1, sched)
        batch = windows.subset(rng.integers(0, n, size=config.batch_size))
        z = rng.standard_normal((config.batch_size, model.spec.d_e)) if config.use_ib else None
        params.zero_grad()
        params.set_trainable(("D",), False)
        terms = objective_V(model, batch, z, config)
        params.set_trainable(("D",), True)
        _guard(terms.bc_loss.item(), it)
        terms.V.backward()
        ad.adam_step(params, params.grads(ef_partitions), st_ef, lr_ef, ef_partitions)
        adv_val = 0.0
        if train_d:
            eps = rng.normal(0.0, config.sigma_noise, size=terms.mu.shape) if config.sigma_noise > 0 else None
            params.zero_grad()
            d_loss = adversary_loss(model, terms.mu.data, batch, eps)
            if d_loss is not None:
                d_loss.backward()
                ad.adam_step(params, params.grads(("D",)), st_d, lr_d, ("D",))
                adv_val = d_loss.item()
        if config.log_every and (it % config.log_every == 0 or it == 1):
            vals = terms.values()
            log_rows.append({"iteration": it, "bc_loss": vals["bc_loss"], "kl": vals["kl"],
                             "adv_loss": vals["adv_loss"] if train_d else adv_val,
                             "lr_EF": lr_ef, "lr_D": lr_d})
        if it in ckpt_its:
            checkpoints.append((it, params.snapshot()))
    params.zero_grad()


def train_tcaib(model: TCAIBModel, windows: WindowBatch, config: TrainingConfig,
                fit_normalizer: bool = True) -> TrainResult:
    """Alternating minibatch updates: descend V in (E, F), then ascend V in D.

    ``mode="staged"`` first trains the target-conditioned adversary without
    the bottleneck, then re-initialises the bottleneck head and F and trains
    them with ``bc + lam*KL`` while the encoder trunk is fine-tuned (or
    frozen with ``freeze_encoder``).
    """
    rng = np.random.default_rng(config.seed)
    if fit_normalizer:
        model.normalizer.fit(windows.obs)
    checkpoints: list = []
    rows: list = []
    if config.mode == "joint":
        _train_tca_phase(model, windows, config, rng, config.n_iters, ("E", "F"), checkpoints, rows)
    else:
        n1 = int(round(config.n_iters * config.staged_split))
        phase1 = replace(config, use_ib=False, lam=0.0)
        _train_tca_phase(model, windows, phase1, rng, n1, ("E", "F"), checkpoints, rows,
                         total=config)
        _reinit_bottleneck(model, rng)
        phase2 = replace(config, alpha=0.0)
        if config.freeze_encoder:
            _set_trunk_trainable(model, False)
        try:
            _train_tca_phase(model, windows, phase2, rng, config.n_iters - n1, ("E", "F"),
                             checkpoints, rows, it_offset=n1, total=config)
        finally:
            _set_trunk_trainable(model, True)
    model.params.zero_grad()
    return TrainResult(model, checkpoints, rows)


def _reinit_bottleneck(model: TCAIBModel, rng: np.random.Generator) -> None:
    from .policies import _init_dense
    wn, bn = model.E.layers[-1]
    W, b = _init_dense(rng, *model.params[wn].shape)
    model.params[wn].data, model.params[bn].data = W, b
    for wn, bn in model.F.layers:
        W, b = _init_dense(rng, *model.params[wn].shape)
        model.params[wn].data, model.params[bn].data = W, b


def _set_trunk_trainable(model: TCAIBModel, flag: bool) -> None:
    # a frozen trunk gets no gradient; with fresh Adam moments it then stays bit-identical
    for wn, bn in model.E.layers[:-1]:
        model.params[wn].requires_grad = model.params[bn].requires_grad = flag


def train_bc(policy: Policy, windows: WindowBatch, config: TrainingConfig,
             fit_normalizer: bool = True) -> TrainResult:
    """Minibatch Adam on ``MSE(policy(window), a_t)`` with the same schedule.

    ``fit_normalizer=False`` keeps the policy's input statistics, which is
    what a warm start wants.
    """
    if isinstance(policy, TCAIBModel):
        return train_tcaib(policy, windows, replace(config, alpha=0.0), fit_normalizer)
    rng = np.random.default_rng(config.seed)
    if fit_normalizer:
        policy.normalizer.fit(windows.obs)
    params = policy.params
    state = AdamState()
    ckpt_its = set(checkpoint_iterations(config))
    checkpoints, rows = [], []
    n = len(windows)
    parts = ("baseline",)
    for it in range(1, config.n_iters + 1):
        lr = learning_rate(config.lr_EF, it - 1, config)
        batch = windows.subset(rng.integers(0, n, size=config.batch_size))
        params.zero_grad()
        loss = ad.mse_loss(policy.predict(batch.obs, train=True, rng=rng), Tensor(batch.action))
        _guard(loss.item(), it)
        loss.backward()
        ad.adam_step(params, params.grads(parts), state, lr, parts)
        if config.log_every and (it % config.log_every == 0 or it == 1):
            rows.append({"iteration": it, "bc_loss": loss.item(), "kl": 0.0, "adv_loss": 0.0,
                         "lr_EF": lr, "lr_D": 0.0})
        if it in ckpt_its:
            checkpoints.append((it, params.snapshot()))
    params.zero_grad()
    return TrainResult(policy, checkpoints, rows)


def train_policy(policy: Policy, windows: WindowBatch, config: TrainingConfig,
                 fit_normalizer: bool = True) -> TrainResult:
    if isinstance(policy, TCAIBModel):
        return train_tcaib(policy, windows, config, fit_normalizer)
    return train_bc(policy, windows, config, fit_normalizer)


# ---------------------------------------------------------------------------
# DAGGER
# ---------------------------------------------------------------------------

@dataclass
class DaggerConfig:
    """``query_budget`` expert labels spread over ``n_rounds`` aggregation rounds.

    Every round after the first fine-tunes the current learner for
    ``round_iters`` iterations (default a quarter of the BC run) instead of
    retraining from scratch.
    """
    query_budget: int = 100
    n_rounds: int = 4
    rollouts_per_round: int = 2
    round_iters: int = 0
    seed: int = 0
    seed_offset: int = 500_000

    def __post_init__(self):
        if self.query_budget < 0:
            raise ValueError("query budget must be >= 0")
        if self.n_rounds < 1 or self.rollouts_per_round < 1:
            raise ValueError("n_rounds and rollouts_per_round must be >= 1")
        if self.round_iters < 0:
            raise ValueError("round_iters must be >= 0")

    def quotas(self) -> list[int]:
        """Labels per round; they sum to the budget exactly."""
        rounds = min(self.n_rounds, self.query_budget)
        if rounds == 0:
            return []
        q, r = divmod(self.query_budget, rounds)
        return [q + (1 if i < r else 0) for i in range(rounds)]


@dataclass
class DaggerResult(TrainResult):
    queries_used: int = 0
    rounds: int = 0


def train_dagger(initial: Dataset, env: EnvConfig, spec: PolicySpec, train_config: TrainingConfig,
                 dagger: DaggerConfig, init_seed: int = 0) -> DaggerResult:
    """Aggregate expert-labelled learner visits until the query budget is spent.

    Round 0 is plain BC on the demonstrations (beta = 1).  Each later round
    rolls the current learner out (beta = 0), asks the scripted expert to
    label visited states, appends them and fine-tunes on the aggregate.  A
    query is one labelled step, so ``queries_used`` equals the budget.
    """
    base = make_history_windows(initial, spec.H)
    policy = build_policy(spec, init_seed, env)
    result = train_policy(policy, base, train_config)
    used = 0
    extra: list[WindowBatch] = []
    seed_ptr = dagger.seed_offset + dagger.seed * 10_000
    n_iters = dagger.round_iters or max(1, train_config.n_iters // 4)
    round_cfg = replace(train_config, n_iters=n_iters, checkpoint_every=0)
    quotas = dagger.quotas()
    for rnd, quota in enumerate(quotas, start=1):
        got: list[WindowBatch] = []
        need = quota
        while need > 0:
            seeds = list(range(seed_ptr, seed_ptr + dagger.rollouts_per_round))
            seed_ptr += dagger.rollouts_per_round
            trajs = rollout_batch(result.policy, env, seeds, spec.H, record_expert=True)
            labelled = _take_spread(make_history_windows(trajs, spec.H, labels="expert_act"), need)
            need -= len(labelled)
            got.append(labelled)
        used += quota
        extra.extend(got)
        agg = WindowBatch.concatenate([base, *extra])
        result = train_policy(result.policy, agg, replace(round_cfg, seed=train_config.seed + rnd),
                              fit_normalizer=False)
    return DaggerResult(result.policy, result.checkpoints, result.log, used, len(quotas))


def _take_spread(windows: WindowBatch, k: int) -> WindowBatch:
    """Exactly ``min(k, len)`` windows, spread evenly over the rollout."""
    n = len(windows)
    if k >= n:
        return windows
    idx = np.linspace(0, n - 1, k).round().astype(int)
    return windows.subset(idx)
