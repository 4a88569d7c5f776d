import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copycat_lab.data import (Dataset, DatasetError, collect_demonstrations, load_dataset,
                              make_history_windows, parse_trajectory_line, save_dataset, split,
                              trajectory_line)
from copycat_lab.envs import EnvConfig, Trajectory

SG = EnvConfig(kind="stop_and_go")


def tiny_traj(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory("stop_and_go", seed, rng.standard_normal((n, 2)), rng.standard_normal((n, 1)),
                      rng.standard_normal(n))


def test_collect_one_episode():
    ds = collect_demonstrations(SG, 1, 0)
    assert len(ds) == 1 and len(ds.trajectories[0]) == SG.T
    with pytest.raises(DatasetError):
        collect_demonstrations(SG, 0, 0)


def test_disjoint_seed_bases():
    a = collect_demonstrations(SG, 3, 0)
    b = collect_demonstrations(SG, 3, 100)
    assert not set(a.seeds) & set(b.seeds)


def test_expert_reward_stable_across_seed_blocks():
    # mean per-step expert reward of 50-episode collections from different seed blocks
    means = [np.mean([t.rew.mean() for t in collect_demonstrations(SG, 50, base).trajectories])
             for base in (0, 1000, 2000)]
    centre = np.mean(means)
    assert all(abs(m / centre - 1) <= 0.2 for m in means)


def test_mixed_env_dataset_rejected():
    other = Trajectory("inertial_tracker", 0, np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(DatasetError):
        Dataset("stop_and_go", [tiny_traj(), other])


def test_windows_h1_and_boundary():
    tr = tiny_traj(3)
    w = make_history_windows([tr], 1)
    assert np.array_equal(w.obs, tr.obs)
    assert np.array_equal(w.prev_action[1:], tr.act[:-1])
    assert np.all(w.prev_action[0] == 0)


def test_windows_h2_layout():
    tr = tiny_traj(3)
    w = make_history_windows([tr], 2)
    assert len(w) == 3 and w.boundary.tolist() == [True, False, False]
    assert w.obs[2].tobytes() == np.concatenate([tr.obs[2], tr.obs[1]]).tobytes()
    assert np.array_equal(w.obs[0], np.concatenate([tr.obs[0], tr.obs[0]]))


def test_windows_never_cross_trajectories():
    a, b = tiny_traj(3, 0), tiny_traj(4, 1)
    w = make_history_windows([a, b], 2)
    first_b = w[3]
    assert first_b.boundary and first_b.traj_id == 1
    assert np.array_equal(first_b.obs, np.concatenate([b.obs[0], b.obs[0]]))
    assert np.all(first_b.prev_action == 0)


def test_windows_empty_and_bad_h():
    with pytest.raises(DatasetError):
        make_history_windows([], 2)
    with pytest.raises(DatasetError):
        make_history_windows([tiny_traj()], 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(1, 5))
def test_window_count_independent_of_h(lengths, H):
    trajs = [tiny_traj(n, i) for i, n in enumerate(lengths)]
    assert len(make_history_windows(trajs, H)) == sum(lengths)


def test_split_counts_and_determinism():
    ds = Dataset("stop_and_go", [tiny_traj(2, i) for i in range(10)])
    tr, te = split(ds, 0.2, 0)
    assert (len(tr), len(te)) == (8, 2)
    tr2, te2 = split(ds, 0.2, 0)
    assert tr.seeds == tr2.seeds and te.seeds == te2.seeds
    with pytest.raises(DatasetError):
        split(ds, 1.0, 0)
    with pytest.raises(DatasetError):
        split(Dataset("stop_and_go", [tiny_traj()]), 0.5, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_partition(n, frac, seed):
    ds = Dataset("stop_and_go", [tiny_traj(2, i) for i in range(n)])
    tr, te = split(ds, frac, seed)
    assert set(tr.seeds).isdisjoint(te.seeds)
    assert sorted(tr.seeds + te.seeds) == list(range(n))
    assert len(tr) >= 1 and len(te) >= 1


def test_save_load_bit_exact(tmp_path):
    ds = collect_demonstrations(EnvConfig(kind="inertial_tracker", event_noise=0.3), 3, 5)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    for a, b in zip(ds.trajectories, back.trajectories):
        assert a.seed == b.seed and a.env == b.env
        for f in ("obs", "act", "rew"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert back.provenance["config_hash"] == ds.provenance["config_hash"]
    first = path.read_text()
    save_dataset(back, path)
    assert path.read_text() == first


def test_truncated_file_names_line(tmp_path):
    ds = collect_demonstrations(SG, 2, 0)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    path.write_text(lines[0] + "\n" + lines[1][:50] + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)


def test_hand_written_line():
    line = '{"env":"stop_and_go","seed":3,"obs":[[1.5,0]],"act":[[0.25]],"rew":[0.01]}'
    tr = parse_trajectory_line(line)
    (t,) = list(tr.transitions())
    assert t.observation.tolist() == [1.5, 0.0] and t.action.tolist() == [0.25]
    assert t.reward == 0.01 and t.done
    assert json.loads(trajectory_line(tr))["seed"] == 3


def test_inconsistent_lengths_rejected():
    with pytest.raises(DatasetError):
        parse_trajectory_line('{"env":"stop_and_go","seed":0,"obs":[[1,0],[1,0]],"act":[[0]],"rew":[0]}')


def test_hash_mismatch_warns(tmp_path, caplog):
    ds = collect_demonstrations(SG, 1, 0)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    with caplog.at_level("WARNING"):
        load_dataset(path, expected_hash="0" * 16)
    assert "differs" in caplog.text
