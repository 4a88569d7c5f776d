"""Demonstration datasets, history windows, splits and JSON-Lines storage."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import EnvConfig, ExpertPolicy, Trajectory, rollout_batch

log = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    env: str
    trajectories: list[Trajectory]
    provenance: dict = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        dims = {(t.env, t.obs.shape[1], t.act.shape[1]) for t in self.trajectories}
        if len(dims) > 1:
            raise DatasetError(f"trajectories disagree on env/obs/act dims: {sorted(dims)}")
        if dims and next(iter(dims))[0] != self.env:
            raise DatasetError("trajectory env kind differs from dataset env kind")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def seeds(self) -> list[int]:
        return [t.seed for t in self.trajectories]

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.trajectories[0].act.shape[1]

    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)


def collect_demonstrations(config: EnvConfig, n_episodes: int, seed_base: int) -> Dataset:
    """Roll the scripted expert out on seeds ``seed_base .. seed_base+n-1``."""
    if n_episodes < 1:
        raise DatasetError("n_episodes must be >= 1")
    seeds = range(seed_base, seed_base + n_episodes)
    trajs = rollout_batch(ExpertPolicy(), config, seeds, H=1)
    prov = {"seed_base": seed_base, "n_episodes": n_episodes,
            "config_hash": config.config_hash(), "env_config": config.to_dict()}
    return Dataset(config.kind, trajs, prov)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass
class HistoryWindow:
    obs: np.ndarray          # H*obs_dim, newest frame first
    action: np.ndarray
    prev_action: np.ndarray
    traj_id: int
    step: int
    boundary: bool


@dataclass
class WindowBatch:
    """Column-stacked history windows; row ``i`` is one :class:`HistoryWindow`."""
    obs: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    traj_id: np.ndarray
    step: np.ndarray
    boundary: np.ndarray
    H: int

    def __len__(self) -> int:
        return self.obs.shape[0]

    def __getitem__(self, i: int) -> HistoryWindow:
        return HistoryWindow(self.obs[i], self.action[i], self.prev_action[i],
                             int(self.traj_id[i]), int(self.step[i]), bool(self.boundary[i]))

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.obs[idx], self.action[idx], self.prev_action[idx],
                           self.traj_id[idx], self.step[idx], self.boundary[idx], self.H)

    @staticmethod
    def concatenate(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        if len({b.H for b in batches}) != 1:
            raise DatasetError("cannot concatenate windows with different H")
        return WindowBatch(*(np.concatenate([getattr(b, f) for b in batches])
                             for f in ("obs", "action", "prev_action", "traj_id", "step", "boundary")),
                           batches[0].H)


def trajectory_windows(obs: np.ndarray, H: int) -> np.ndarray:
    """Stack ``[o_t, ..., o_{t-H+1}]`` for every t; early slots repeat ``o_0``."""
    n = obs.shape[0]
    idx = np.maximum(np.arange(n)[:, None] - np.arange(H)[None, :], 0)
    return obs[idx].reshape(n, -1)


def make_history_windows(dataset: Dataset | Sequence[Trajectory], H: int,
                         labels: str = "act") -> WindowBatch:
    """One window per (trajectory, step).  Windows never span trajectories.

    ``labels="expert_act"`` uses the expert labels recorded on learner
    rollouts (for DAGGER) as targets while ``prev_action`` stays the
    executed previous action.
    """
    if H < 1:
        raise DatasetError("H must be >= 1")
    trajs = dataset.trajectories if isinstance(dataset, Dataset) else list(dataset)
    if not trajs:
        raise DatasetError("cannot window an empty dataset")
    cols = {k: [] for k in ("obs", "action", "prev_action", "traj_id", "step", "boundary")}
    for i, tr in enumerate(trajs):
        n = len(tr)
        target = tr.act if labels == "act" else getattr(tr, labels)
        prev = np.vstack([np.zeros((1, tr.act.shape[1])), tr.act[:-1]])
        cols["obs"].append(trajectory_windows(tr.obs, H))
        cols["action"].append(target)
        cols["prev_action"].append(prev)
        cols["traj_id"].append(np.full(n, i))
        cols["step"].append(np.arange(n))
        cols["boundary"].append(np.arange(n) == 0)
    return WindowBatch(**{k: np.concatenate(v) for k, v in cols.items()}, H=H)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Trajectory-granular random split into (train, test)."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must be in (0, 1)")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    if n < 2:
        raise DatasetError("need at least two trajectories to split")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [t for i, t in enumerate(dataset.trajectories) if i not in test_idx]
    test = [t for i, t in enumerate(dataset.trajectories) if i in test_idx]
    prov = dict(dataset.provenance, split_seed=seed, test_fraction=test_fraction)
    return (Dataset(dataset.env, train, prov, "train"), Dataset(dataset.env, test, prov, "test"))


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

def _fmt_rows(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return "[" + ",".join(f"{v:.17g}" for v in a) + "]"
    return "[" + ",".join(_fmt_rows(row) for row in a) + "]"


def trajectory_line(tr: Trajectory) -> str:
    return (f'{{"env":{json.dumps(tr.env)},"seed":{int(tr.seed)},"obs":{_fmt_rows(tr.obs)},'
            f'"act":{_fmt_rows(tr.act)},"rew":{_fmt_rows(tr.rew)}}}')


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.write_text("".join(trajectory_line(t) + "\n" for t in dataset.trajectories))
    manifest = {"env": dataset.env, "split": dataset.split, "n_trajectories": len(dataset),
                "config_hash": dataset.provenance.get("config_hash"),
                "provenance": dataset.provenance}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def parse_trajectory_line(line: str, lineno: int = 1) -> Trajectory:
    try:
        rec = json.loads(line)
        obs = np.array(rec["obs"], dtype=np.float64)
        act = np.array(rec["act"], dtype=np.float64)
        rew = np.array(rec["rew"], dtype=np.float64)
        env, seed = str(rec["env"]), int(rec["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: malformed trajectory record ({exc})") from exc
    if obs.ndim != 2 or act.ndim != 2 or rew.ndim != 1 or not (len(obs) == len(act) == len(rew)):
        raise DatasetError(f"line {lineno}: inconsistent obs/act/rew lengths")
    return Trajectory(env, seed, obs, act, rew)


def load_dataset(path, expected_hash: str | None = None) -> Dataset:
    path = Path(path)
    trajs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                trajs.append(parse_trajectory_line(line, lineno))
    if not trajs:
        raise DatasetError(f"{path}: no trajectories")
    prov, split_tag = {}, "train"
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        prov = manifest.get("provenance", {})
        split_tag = manifest.get("split", "train")
        if expected_hash is not None and manifest.get("config_hash") != expected_hash:
            log.warning("%s: manifest config hash %s differs from expected %s",
                        path, manifest.get("config_hash"), expected_hash)
    return Dataset(trajs[0].env, trajs, prov, split_tag)
