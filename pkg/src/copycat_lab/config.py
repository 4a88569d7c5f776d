"""Experiment configuration: one JSON document, strictly validated."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .diagnostics import ProbeConfig
from .envs import ENV_KINDS, EnvConfig
from .policies import VARIANTS, PolicySpec
from .training import DaggerConfig, TrainingConfig

SCHEMA_VERSION = 1
REFERENCE_METHODS = ("expert", "random")


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    """Build dataclass ``cls`` from ``d``; unknown keys are an error."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


_SPEC_KEYS = {f.name for f in fields(PolicySpec)} - {"variant", "obs_dim", "act_dim"}
_TRAIN_KEYS = {f.name for f in fields(TrainingConfig)} - {"seed"}
_DAGGER_KEYS = {f.name for f in fields(DaggerConfig)} - {"seed"}


@dataclass
class MethodCell:
    """One row of the method matrix."""
    name: str
    variant: str
    policy: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    dagger: dict | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS or self.variant == "copycat_oracle":
            raise ValueError(f"method {self.name}: unusable variant {self.variant!r}")
        if self.name in REFERENCE_METHODS:
            raise ValueError(f"method name {self.name!r} is reserved")
        _check_keys(self.policy, _SPEC_KEYS, f"method {self.name}.policy")
        _check_keys(self.training, _TRAIN_KEYS, f"method {self.name}.training")
        if self.dagger is not None:
            _check_keys(self.dagger, _DAGGER_KEYS, f"method {self.name}.dagger")


@dataclass
class DatasetSpec:
    n_train: int = 50
    n_test: int = 10
    seed_base: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass
class EvalSpec:
    n_episodes: int = 10
    episode_seed_base: int = 100_000
    probe_train: int = 20
    probe_heldout: int = 5
    probe_seed_base: int = 200_000
    probe: dict = field(default_factory=dict)
    excess_info: bool = True

    def __post_init__(self):
        if self.n_episodes < 1 or self.probe_train < 1 or self.probe_heldout < 1:
            raise ValueError("episode counts must be >= 1")
        _check_keys(self.probe, {f.name for f in fields(ProbeConfig)}, "eval.probe")

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(**self.probe)

    def episode_seeds(self) -> list[int]:
        return list(range(self.episode_seed_base, self.episode_seed_base + self.n_episodes))

    def probe_seeds(self) -> list[int]:
        n = self.probe_train + self.probe_heldout
        return list(range(self.probe_seed_base, self.probe_seed_base + n))


@dataclass
class ExperimentConfig:
    envs: dict[str, EnvConfig]
    methods: list[MethodCell]
    seeds: list[int]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    policy: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    env_training: dict = field(default_factory=dict)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be unique")
        names = [m.name for m in self.methods]
        if not names:
            raise ConfigError("need at least one method")
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        if not self.envs:
            raise ConfigError("need at least one env")
        _check_keys(self.policy, _SPEC_KEYS, "policy")
        _check_keys(self.training, _TRAIN_KEYS, "training")
        _check_keys(self.env_training, self.envs, "env_training")
        for env, over in self.env_training.items():
            _check_keys(over, _TRAIN_KEYS, f"env_training.{env}")

    # -- lookups -----------------------------------------------------------
    @property
    def method_names(self) -> list[str]:
        return [m.name for m in self.methods]

    def method(self, name: str) -> MethodCell:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"unknown method {name!r}; valid: {', '.join(self.method_names)}")

    def env(self, name: str) -> EnvConfig:
        if name not in self.envs:
            raise ConfigError(f"unknown env {name!r}; valid: {', '.join(self.envs)}")
        return self.envs[name]

    def policy_spec(self, method: str, env: str) -> PolicySpec:
        m, e = self.method(method), self.env(env)
        kw = {**self.policy, **m.policy}
        return PolicySpec(m.variant, e.obs_dim, e.act_dim, **kw)

    def training_config(self, method: str, env: str, seed: int) -> TrainingConfig:
        m = self.method(method)
        kw = {**self.training, **self.env_training.get(env, {}), **m.training, "seed": seed}
        return TrainingConfig.from_dict(kw)

    def dagger_config(self, method: str, seed: int) -> DaggerConfig | None:
        m = self.method(method)
        return None if m.dagger is None else DaggerConfig(**m.dagger, seed=seed)

    def cells(self, method: str | None = None, env: str | None = None,
              seed: int | None = None) -> list[tuple[str, str, int]]:
        """The (method, env, seed) matrix, optionally filtered; env-major order."""
        if method is not None:
            self.method(method)
        if env is not None:
            self.env(env)
        if seed is not None and seed not in self.seeds:
            raise ConfigError(f"seed {seed} is not in the config's seed list {self.seeds}")
        return [(m, e, s) for e in self.envs for m in self.method_names for s in self.seeds
                if (method is None or m == method) and (env is None or e == env)
                and (seed is None or s == seed)]

    # -- (de)serialisation ---------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        _check_keys(d, allowed, "config")
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        for key in ("envs", "methods", "seeds"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        envs = {}
        _check_keys(d["envs"], ENV_KINDS, "envs")
        for kind, over in d["envs"].items():
            _check_keys(over, {f.name for f in fields(EnvConfig)} - {"kind"}, f"envs.{kind}")
            try:
                envs[kind] = EnvConfig.from_dict({**over, "kind": kind})
            except (TypeError, ValueError, RuntimeError) as exc:
                raise ConfigError(f"envs.{kind}: {exc}") from exc
        if not isinstance(d["methods"], list):
            raise ConfigError("methods must be a list")
        methods = [_strict(MethodCell, m, f"methods[{i}]") for i, m in enumerate(d["methods"])]
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool)
                                                  for s in seeds):
            raise ConfigError("seeds must be a list of integers")
        cfg = cls(envs=envs, methods=methods, seeds=list(seeds),
                  dataset=_strict(DatasetSpec, d.get("dataset", {}), "dataset"),
                  policy=d.get("policy", {}), training=d.get("training", {}),
                  env_training=d.get("env_training", {}),
                  eval=_strict(EvalSpec, d.get("eval", {}), "eval"),
                  output_dir=str(d.get("output_dir", "runs/default")),
                  schema_version=version)
        # surface bad override values now rather than mid-run
        for m in cfg.method_names:
            for e in cfg.envs:
                try:
                    cfg.policy_spec(m, e)
                    cfg.training_config(m, e, cfg.seeds[0])
                    cfg.dagger_config(m, cfg.seeds[0])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"cell {m}/{e}: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        envs = {}
        for kind, ec in self.envs.items():
            d = ec.to_dict()
            d.pop("kind")
            envs[kind] = d
        return {
            "schema_version": self.schema_version,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "envs": envs,
            "dataset": vars(self.dataset).copy(),
            "policy": dict(self.policy),
            "training": dict(self.training),
            "env_training": {k: dict(v) for k, v in self.env_training.items()},
            "eval": vars(self.eval).copy(),
            "methods": [{"name": m.name, "variant": m.variant, "policy": m.policy,
                         "training": m.training, "dagger": m.dagger} for m in self.methods],
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def default_config_dict() -> dict:
    """The shipped experiment: 10 methods x 2 envs x 5 seeds."""
    return {
        "schema_version": SCHEMA_VERSION,
        "output_dir": "runs/default",
        "seeds": [0, 1, 2, 3, 4],
        "envs": {
            "stop_and_go": {"event_noise": 0.3},
            "inertial_tracker": {"event_noise": 0.5},
        },
        "dataset": {"n_train": 50, "n_test": 10, "seed_base": 0, "split_seed": 0},
        "policy": {"H": 3, "input_encoding": "diff"},
        "training": {"n_iters": 3000},
        "env_training": {"inertial_tracker": {"sigma_noise": 0.0}},
        "eval": {"n_episodes": 10, "probe": {"n_iters": 2000}},
        "methods": [
            {"name": "bc_so", "variant": "bc_so", "policy": {"H": 1}},
            {"name": "bc_oh", "variant": "bc_oh"},
            {"name": "bc_rnn", "variant": "bc_rnn", "policy": {"input_encoding": "raw"}},
            {"name": "dropout_bc", "variant": "dropout_bc"},
            {"name": "tca_ib", "variant": "tca_ib"},
            {"name": "wo_adv", "variant": "tca_ib", "training": {"alpha": 0.0}},
            {"name": "wo_ib", "variant": "tca_ib", "training": {"use_ib": False, "lam": 0.0}},
            {"name": "wo_tca", "variant": "tca_ib", "policy": {"conditional_adversary": False}},
            {"name": "dagger_100", "variant": "bc_oh", "dagger": {"query_budget": 100}},
            {"name": "dagger_1000", "variant": "bc_oh", "dagger": {"query_budget": 1000}},
        ],
    }
