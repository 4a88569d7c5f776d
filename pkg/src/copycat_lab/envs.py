"""Partially observed 1-D control tasks with scripted experts.

Two kinds are provided:

``stop_and_go``
    A car waits behind a red light that turns green at a random step.
    Observation is ``[distance to the light, light colour]``; speed is hidden.

``inertial_tracker``
    A point mass chases a goal that jumps every ``goal_period`` steps.
    Observation is ``[position, goal]``; speed is hidden.

All state lives in numpy arrays with a leading batch axis so that many
episodes can be stepped at once; the single-episode functions are thin
wrappers with batch size one.  Episodes never terminate early, so every
episode in a batch shares the same step counter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ENV_KINDS = ("stop_and_go", "inertial_tracker")
OBS_DIM = {"stop_and_go": 2, "inertial_tracker": 2}
ACT_DIM = {"stop_and_go": 1, "inertial_tracker": 1}


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "stop_and_go"
    T: int = 200
    dt: float = 0.05
    friction: float = 0.1
    action_low: float = -1.0
    action_high: float = 1.0
    v_max: float = 2.0
    # stop_and_go
    v_target: float = 1.5
    brake_decel: float = 0.5
    stop_margin: float = 0.5
    red_penalty: float = 50.0
    switch_window: tuple[float, float] = (0.2, 0.6)
    light_distance: tuple[float, float] = (3.0, 6.0)
    k_v: float = 1.0
    k_b: float = 2.0
    k_x: float = 1.0
    # inertial_tracker
    goal_period: int = 40
    goal_range: tuple[float, float] = (-1.0, 1.0)
    k_p: float = 1.5
    k_d: float = 1.2
    # std of additive noise on the event channel (goal or light colour)
    event_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ENV_KINDS:
            raise EnvError(f"unknown env kind {self.kind!r}; expected one of {ENV_KINDS}")
        if self.T < 1:
            raise EnvError("episode length T must be >= 1")
        if not self.dt > 0:
            raise EnvError("dt must be positive")
        if not (math.isfinite(self.action_low) and math.isfinite(self.action_high)
                and self.action_low < self.action_high):
            raise EnvError("action bounds must be finite with low < high")
        lo, hi = self.switch_window
        if not 0.0 <= lo <= hi <= 1.0:
            raise EnvError("switch_window must satisfy 0 <= lo <= hi <= 1")
        if self.goal_period < 1:
            raise EnvError("goal_period must be >= 1")
        if not self.event_noise >= 0:
            raise EnvError("event_noise must be non-negative")

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.kind]

    @property
    def act_dim(self) -> int:
        return ACT_DIM[self.kind]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise EnvError(f"unknown EnvConfig keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EnvState:
    """Latent state for a batch of episodes.  Never handed to learners."""
    config: EnvConfig
    seeds: np.ndarray
    t: int
    x: np.ndarray
    v: np.ndarray
    # stop_and_go
    light_pos: np.ndarray
    switch_step: np.ndarray
    crossed: np.ndarray
    # inertial_tracker
    goals: np.ndarray
    # per-step sensor noise on the event channel, (batch, T+1)
    event_noise: np.ndarray | None = None
    clamp_count: int = 0

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    @property
    def done(self) -> bool:
        return self.t >= self.config.T

    @property
    def green(self) -> np.ndarray:
        return self.t >= self.switch_step

    @property
    def goal(self) -> np.ndarray:
        idx = min(self.t // self.config.goal_period, self.goals.shape[1] - 1)
        return self.goals[:, idx]

    def copy(self) -> "EnvState":
        return dataclasses.replace(
            self, x=self.x.copy(), v=self.v.copy(), crossed=self.crossed.copy())


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: bool


@dataclass
class Trajectory:
    env: str
    seed: int
    obs: np.ndarray      # (T, obs_dim); obs[t] is seen before act[t]
    act: np.ndarray      # (T, act_dim)
    rew: np.ndarray      # (T,)
    expert_act: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def cumulative_reward(self) -> float:
        return float(np.sum(self.rew))

    def transitions(self):
        n = len(self)
        for t in range(n):
            yield Transition(self.obs[t], self.act[t], float(self.rew[t]), t == n - 1)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _episode_events(config: EnvConfig, seed: int):
    rng = np.random.default_rng([int(seed), 7919])
    lo, hi = config.light_distance
    light = rng.uniform(lo, hi)
    s_lo = int(math.ceil(config.switch_window[0] * config.T))
    s_hi = int(math.floor(config.switch_window[1] * config.T))
    switch = int(rng.integers(s_lo, max(s_lo, s_hi) + 1))
    n_goals = config.T // config.goal_period + 1
    goals = rng.uniform(config.goal_range[0], config.goal_range[1], size=n_goals)
    noise = config.event_noise * rng.standard_normal(config.T + 1)
    return light, switch, goals, noise


def reset_batch(config: EnvConfig, seeds: Sequence[int]) -> tuple[EnvState, np.ndarray]:
    config.validate()
    seeds = np.asarray(list(seeds), dtype=np.int64)
    b = len(seeds)
    events = [_episode_events(config, s) for s in seeds]
    state = EnvState(
        config=config,
        seeds=seeds,
        t=0,
        x=np.zeros(b),
        v=np.zeros(b),
        light_pos=np.array([e[0] for e in events]),
        switch_step=np.array([e[1] for e in events], dtype=np.int64),
        crossed=np.zeros(b, dtype=bool),
        goals=np.stack([e[2] for e in events]),
        event_noise=np.stack([e[3] for e in events]),
    )
    return state, observe(state)


def reset(config: EnvConfig, seed: int) -> tuple[EnvState, np.ndarray]:
    state, obs = reset_batch(config, [seed])
    return state, obs[0]


def observe(state: EnvState) -> np.ndarray:
    cfg = state.config
    eta = state.event_noise[:, min(state.t, cfg.T)]
    if cfg.kind == "stop_and_go":
        dist = np.maximum(state.light_pos - state.x, 0.0)
        return np.stack([dist, state.green.astype(np.float64) + eta], axis=1)
    return np.stack([state.x, state.goal + eta], axis=1)


def step_batch(state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray]:
    """Advance every episode one step.  Returns (new state, rewards)."""
    cfg = state.config
    if state.done:
        raise EnvError("step called after episode end")
    a = np.asarray(action, dtype=np.float64).reshape(state.batch, cfg.act_dim)[:, 0]
    if not np.isfinite(a).all():
        raise EnvError("non-finite action")
    clipped = np.clip(a, cfg.action_low, cfg.action_high)
    n_clamped = int(np.count_nonzero(clipped != a))
    new = state.copy()
    new.clamp_count = state.clamp_count + n_clamped
    v = state.v + clipped * cfg.dt - cfg.friction * state.v * cfg.dt
    if cfg.kind == "stop_and_go":
        v = np.clip(v, 0.0, cfg.v_max)
        x = state.x + v * cfg.dt
        crossing = (~state.crossed) & (state.x < state.light_pos) & (x >= state.light_pos)
        ran_red = crossing & ~state.green
        reward = (x - state.x) - cfg.red_penalty * ran_red
        new.crossed = state.crossed | crossing
    else:
        x = state.x + v * cfg.dt
        reward = None
    new.x, new.v, new.t = x, v, state.t + 1
    if cfg.kind == "inertial_tracker":
        # reward measured against the goal in force during the step
        reward = -np.abs(x - state.goal)
    return new, reward


def step(state: EnvState, action) -> tuple[EnvState, Transition]:
    new, reward = step_batch(state, np.atleast_2d(np.asarray(action, dtype=np.float64)))
    obs = observe(new)
    return new, Transition(obs[0], np.asarray(action, dtype=np.float64).reshape(-1),
                           float(reward[0]), new.done)


def expert_action(state: EnvState) -> np.ndarray:
    """Scripted expert; reads the latent state.  Shape (batch, act_dim)."""
    cfg = state.config
    if cfg.kind == "stop_and_go":
        remaining = np.maximum(state.light_pos - cfg.stop_margin - state.x, 0.0)
        v_approach = np.sqrt(2.0 * cfg.brake_decel * remaining)
        must_stop = (~state.green) & (~state.crossed) & (v_approach < cfg.v_target)
        v_des = np.where(must_stop, v_approach, cfg.v_target)
        err = v_des - state.v
        # on approach: feed-forward of the constant-deceleration profile
        # plus friction, with speed feedback around it
        ff = np.where(must_stop, -cfg.brake_decel + cfg.friction * state.v, 0.0)
        a = ff + np.where(must_stop, cfg.k_b, cfg.k_v) * err
        # hold the brake once stopped short of a red light
        a = np.where(must_stop & (state.x >= state.light_pos - cfg.stop_margin),
                     np.minimum(a, -cfg.k_x * (state.x - state.light_pos + cfg.stop_margin)), a)
    else:
        a = cfg.k_p * (state.goal - state.x) - cfg.k_d * state.v
    return np.clip(a, cfg.action_low, cfg.action_high)[:, None]


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

class ExpertPolicy:
    """Wraps the scripted expert so it can be rolled out like a learner."""
    uses_state = True

    def act_state(self, state: EnvState) -> np.ndarray:
        return expert_action(state)


def stack_history(buffer: list[np.ndarray], H: int) -> np.ndarray:
    """Concatenate ``[o_t, o_{t-1}, ...]``; pre-episode slots repeat ``o_0``."""
    n = len(buffer)
    frames = [buffer[max(n - 1 - k, 0)] for k in range(H)]
    return np.concatenate(frames, axis=-1)


def rollout_batch(policy, config: EnvConfig, seeds: Sequence[int], H: int = 1,
                  record_expert: bool = False) -> list[Trajectory]:
    """Roll out ``policy`` on one episode per seed, all in lock-step.

    ``policy`` is either an object with ``uses_state = True`` and an
    ``act_state(state)`` method, or a callable mapping a batch of stacked
    observation windows ``(B, H*obs_dim)`` to actions ``(B, act_dim)``.
    Learner actions are clamped to the action bounds.
    """
    state, obs = reset_batch(config, seeds)
    b = state.batch
    uses_state = getattr(policy, "uses_state", False)
    obs_hist, acts, rews, labels = [obs], [], [], []
    for _ in range(config.T):
        if uses_state:
            a = np.asarray(policy.act_state(state), dtype=np.float64)
        else:
            a = np.asarray(policy(stack_history(obs_hist, H)), dtype=np.float64)
        a = a.reshape(b, config.act_dim)
        if not np.isfinite(a).all():
            raise EnvError("policy emitted a non-finite action")
        a = np.clip(a, config.action_low, config.action_high)
        if record_expert:
            labels.append(expert_action(state))
        state, r = step_batch(state, a)
        acts.append(a)
        rews.append(r)
        obs_hist.append(observe(state))
    obs_arr = np.stack(obs_hist[:-1], axis=1)
    act_arr = np.stack(acts, axis=1)
    rew_arr = np.stack(rews, axis=1)
    lab_arr = np.stack(labels, axis=1) if record_expert else None
    return [Trajectory(config.kind, int(s), obs_arr[i], act_arr[i], rew_arr[i],
                       None if lab_arr is None else lab_arr[i])
            for i, s in enumerate(state.seeds)]


def rollout_episode(policy, config: EnvConfig, seed: int, H: int = 1) -> Trajectory:
    return rollout_batch(policy, config, [seed], H)[0]


def constant_policy(value: float, act_dim: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    def act(windows):
        return np.full((windows.shape[0], act_dim), float(value))
    return act


def uniform_random_policy(config: EnvConfig, seed: int):
    rng = np.random.default_rng(seed)

    def act(windows):
        return rng.uniform(config.action_low, config.action_high,
                           size=(windows.shape[0], config.act_dim))
    return act
