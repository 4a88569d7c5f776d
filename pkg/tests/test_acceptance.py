"""Acceptance criteria 1-10, each at its stated tolerance.

Criteria 3-10 need the shipped default experiment.  A session fixture runs
``copycat-lab reproduce-all`` on it twice: once with one worker and once
with four, into separate directories.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from copycat_lab import acceptance as acc
from copycat_lab import harness as hz
from copycat_lab.config import load_config

from conftest import record

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = ROOT / "configs" / "default.json"
# written per run, so not part of the bit-for-bit comparison
VOLATILE = {"timings.json", "acceptance.txt"}


def _reproduce(out: Path, threads: int) -> dict:
    env = {**os.environ, hz.THREADS_ENV: str(threads)}
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "copycat_lab", "reproduce-all", "--config",
                           str(DEFAULT), "--out", str(out), "-q"],
                          env=env, capture_output=True, text=True)
    wall = time.perf_counter() - t0
    return {"out": out, "code": proc.returncode, "stdout": proc.stdout, "stderr": proc.stderr,
            "wall": wall, "threads": threads}


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    single = _reproduce(base / "threads1", 1)
    assert single["code"] in (0, 1), single["stderr"]
    multi = _reproduce(base / "threads4", 4)
    assert multi["code"] in (0, 1), multi["stderr"]
    return single, multi


@pytest.fixture(scope="session")
def single(runs):
    return runs[0]


@pytest.fixture(scope="session")
def rows(single):
    return hz.read_results(single["out"] / "results.csv")


@pytest.fixture(scope="session")
def config():
    return load_config(DEFAULT)


def _check(criterion):
    record(criterion)
    print(criterion.line())
    assert criterion.passed, criterion.line()


def test_criterion_01_gradient_check():
    _check(acc.check_gradients(10))


def test_criterion_02_kl_exactness():
    _check(acc.check_kl(1000))


@pytest.mark.slow
def test_criterion_03_copycat_reproduction(single, rows):
    timings = json.loads((single["out"] / "timings.json").read_text())["train_s"]
    bc_oh = [s for key, s in timings.items() if key.startswith("bc_oh/")]
    assert len(bc_oh) == 10
    _check(acc.check_copycat(rows, max(bc_oh)))


@pytest.mark.slow
def test_criterion_04_shortcut(single, rows, config):
    layout = hz.Layout(single["out"])
    env = "stop_and_go"
    train, test = hz.load_split(config, layout, env)
    expert = next(r.reward_mean for r in rows if r.method == "expert" and r.env == env)
    H = config.policy_spec("bc_oh", env).H
    _check(acc.check_shortcut(train, test, config.env(env), config.eval.episode_seeds(), expert, H,
                              config.eval.probe_config()))


@pytest.mark.slow
def test_criterion_05_efficacy(rows):
    _check(acc.check_efficacy(rows))


@pytest.mark.slow
def test_criterion_06_ablations(rows):
    _check(acc.check_ablations(rows))


@pytest.mark.slow
def test_criterion_07_excess_information(rows):
    _check(acc.check_excess_info(rows))


@pytest.mark.slow
def test_criterion_08_no_overfit(rows):
    _check(acc.check_no_overfit(rows))


@pytest.mark.slow
def test_criterion_09_dagger(rows):
    _check(acc.check_dagger(rows))


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in VOLATILE}


@pytest.mark.slow
def test_criterion_10_determinism_and_formats(runs, config):
    single, multi = runs
    layout = hz.Layout(single["out"])
    datasets = [layout.dataset(e) for e in config.envs]
    ckpts = sorted(layout.root.glob("cells/*/*/*/ckpt_*.json"))
    assert len(ckpts) == 5 * len(config.cells())
    a, b = _tree(single["out"]), _tree(multi["out"])
    same = a == b
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    fmt_single = acc.check_formats(datasets, ckpts, single["wall"], 1)
    fmt_multi = acc.check_formats([], [], multi["wall"], 4)
    ok = same and fmt_single.passed and fmt_multi.passed
    detail = (f"{fmt_single.detail}; 4-worker run took {multi['wall'] / 60:.1f} min (< 15 min); "
              f"outputs of the two runs {'identical' if same else 'differ in ' + str(diff[:3])}")
    _check(acc.Criterion(10, "determinism and formats", ok, detail))


@pytest.mark.slow
def test_exit_code_matches_criteria(runs):
    for run in runs:
        lines = (run["out"] / "acceptance.txt").read_text().splitlines()
        assert len(lines) == 10
        assert (run["code"] == 0) == all(ln.startswith("[PASS]") for ln in lines)
