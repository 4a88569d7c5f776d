"""``copycat-lab`` command line.

Exit codes: 0 success, 1 failure (acceptance or a stage), 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from . import acceptance as acc
from . import harness as hz
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import DiagnosticsError
from .envs import EnvError
from .policies import SpecMismatch
from .report import write_report

log = logging.getLogger("copycat_lab")

COMMANDS = ("collect", "train", "eval", "report", "reproduce-all")
# files and directories reproduce-all owns inside the output directory
OWNED = ("data", "cells", "results.csv", "report", "acceptance.txt", "timings.json")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="copycat-lab", description="Copycat-problem imitation-learning lab.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--method", help="restrict to one method")
    p.add_argument("--env", help="restrict to one env")
    p.add_argument("--seed", type=int, help="restrict to one seed")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    return p


def _print_cells(cells) -> None:
    print(f"{len(cells)} cell(s):")
    for m, e, s in cells:
        print(f"  {m:<14} {e:<18} seed {s}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_collect(cfg: ExperimentConfig, layout: hz.Layout, args) -> int:
    envs = [args.env] if args.env else list(cfg.envs)
    for e in envs:
        cfg.env(e)
    if args.dry_run:
        for e in envs:
            print(f"would write {layout.dataset(e)}")
        return EXIT_OK
    for path in hz.collect(cfg, layout, args.env, args.overwrite):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, layout: hz.Layout, args) -> int:
    cells = cfg.cells(args.method, args.env, args.seed)
    if args.dry_run:
        _print_cells(cells)
        return EXIT_OK
    for meta, secs in hz.train_cells(cfg, layout, cells, args.overwrite):
        print(f"trained {meta['method']}/{meta['env']}/seed {meta['seed']} in {secs:.1f}s "
              f"({len(meta['checkpoints'])} checkpoints)")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, layout: hz.Layout, args) -> int:
    cells = cfg.cells(args.method, args.env, args.seed)
    if args.dry_run:
        _print_cells(cells)
        return EXIT_OK
    rows = hz.evaluate_cells(cfg, layout, cells)
    hz.write_results(rows, layout.results, args.overwrite)
    print(f"wrote {len(rows)} row(s) to {layout.results}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, layout: hz.Layout, args) -> int:
    if not layout.results.exists():
        raise ConfigError(f"missing {layout.results}; run `eval` first")
    rows = hz.read_results(layout.results)
    if args.dry_run:
        print(f"would write report for {len(rows)} row(s) to {layout.report}")
        return EXIT_OK
    for path in write_report(rows, layout.report):
        print(f"wrote {path}")
    return EXIT_OK


def _stage(name: str, fn, *a, **kw):
    log.info("stage %s", name)
    try:
        return fn(*a, **kw)
    except ConfigError:
        raise
    except Exception as exc:  # any failure aborts the run with the stage named
        raise StageError(name, exc) from exc


def acceptance_report(cfg: ExperimentConfig, layout: hz.Layout, rows, train_times, elapsed,
                      workers: int) -> list[acc.Criterion]:
    pcfg = cfg.eval.probe_config()
    crits = [acc.check_gradients(), acc.check_kl()]
    bc_oh = [secs for (meta, secs) in train_times if meta["method"] == "bc_oh"]
    results = acc.check_results(rows, max(bc_oh) if bc_oh else None)
    crits.append(results[0])
    env = "stop_and_go"
    if env in cfg.envs:
        train, test = hz.load_split(cfg, layout, env)
        expert = next(r.reward_mean for r in rows if r.method == "expert" and r.env == env)
        H = cfg.policy_spec("bc_oh", env).H if "bc_oh" in cfg.method_names else 2
        crits.append(acc.check_shortcut(train, test, cfg.env(env), cfg.eval.episode_seeds(),
                                        expert, H, pcfg))
    crits += results[1:]
    ckpts = sorted(layout.root.glob("cells/*/*/*/ckpt_*.json"))
    datasets = [layout.dataset(e) for e in cfg.envs]
    crits.append(acc.check_formats(datasets, ckpts, elapsed, workers))
    return sorted(crits, key=lambda c: c.number)


def cmd_reproduce_all(cfg: ExperimentConfig, layout: hz.Layout, args) -> int:
    cells = cfg.cells(args.method, args.env, args.seed)
    if args.dry_run:
        _print_cells(cells)
        return EXIT_OK
    present = [n for n in OWNED if (layout.root / n).exists()]
    if present and not args.overwrite:
        raise ConfigError(f"{layout.root} already holds {present}; pass --overwrite to replace")
    for n in present:
        target = layout.root / n
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    workers = hz.worker_count()
    t0 = time.perf_counter()
    _stage("collect", hz.collect, cfg, layout, args.env, True)
    times = _stage("train", hz.train_cells, cfg, layout, cells, True, workers)
    rows = _stage("eval", hz.evaluate_cells, cfg, layout, cells, workers)
    _stage("eval", hz.write_results, rows, layout.results, True)
    _stage("report", write_report, hz.read_results(layout.results), layout.report)
    elapsed = time.perf_counter() - t0
    timings = {f"{m['method']}/{m['env']}/{m['seed']}": round(s, 3) for m, s in times}
    (layout.root / "timings.json").write_text(json.dumps({"elapsed_s": round(elapsed, 3),
                                                          "workers": workers, "train_s": timings},
                                                         indent=2) + "\n")
    crits = _stage("acceptance", acceptance_report, cfg, layout, rows, times, elapsed, workers)
    lines = [c.line() for c in crits]
    (layout.root / "acceptance.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    passed = all(c.passed for c in crits)
    print(f"{sum(c.passed for c in crits)}/{len(crits)} criteria pass")
    return EXIT_OK if passed else EXIT_FAIL


HANDLERS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "reproduce-all": cmd_reproduce_all}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        layout = hz.layout_for(cfg, args.out)
        return HANDLERS[args.command](cfg, layout, args)
    except ConfigError as exc:
        print(f"copycat-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"copycat-lab: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (hz.HarnessError, DiagnosticsError, SpecMismatch, EnvError, OSError, ValueError) as exc:
        print(f"copycat-lab: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
