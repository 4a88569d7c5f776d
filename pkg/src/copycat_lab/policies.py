"""Policy architectures and checkpoint I/O.

Every learned policy maps a stacked observation window ``[o_t, o_{t-1}, ...]``
to an action.  Inputs are standardised with per-dimension statistics taken
from the training windows before they reach the first layer.

Variants
--------
bc_so, bc_oh, dropout_bc
    Feed-forward encoder (4 dense layers) followed by a 2-layer decoder.
bc_rnn
    A tanh recurrent cell unrolled oldest-to-newest, 2-layer action head.
tca_ib
    Encoder ``E`` emitting a diagonal Gaussian, decoder ``F`` and adversary ``D``.
copycat_oracle
    No parameters; replays the previous action reconstructed by inverse
    dynamics from consecutive observations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .envs import EnvConfig

VARIANTS = ("bc_so", "bc_oh", "bc_rnn", "dropout_bc", "tca_ib", "copycat_oracle")
CHECKPOINT_FORMAT = "copycat-lab-checkpoint"
CHECKPOINT_VERSION = 1


class SpecMismatch(ValueError):
    pass


@dataclass
class PolicySpec:
    variant: str
    obs_dim: int
    act_dim: int
    H: int = 2
    d_e: int = 32
    enc_widths: tuple[int, ...] = (64, 64, 64)
    dec_widths: tuple[int, ...] = (64,)
    adv_widths: tuple[int, ...] = (64,)
    rnn_hidden: int = 64
    dropout_p: float = 0.5
    conditional_adversary: bool = True
    activation: str = "tanh"
    input_encoding: str = "raw"

    def __post_init__(self):
        self.enc_widths = tuple(self.enc_widths)
        self.dec_widths = tuple(self.dec_widths)
        self.adv_widths = tuple(self.adv_widths)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise SpecMismatch(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "bc_so" and self.H != 1:
            raise SpecMismatch("bc_so uses a single observation (H=1)")
        if self.H < 1:
            raise SpecMismatch("history length H must be >= 1")
        if self.d_e < 1:
            raise SpecMismatch("embedding dimension must be >= 1")
        widths = self.enc_widths + self.dec_widths + self.adv_widths + (self.rnn_hidden,)
        if any(w < 1 for w in widths):
            raise SpecMismatch("layer widths must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise SpecMismatch("dropout_p must be in [0, 1)")
        if self.activation not in ad.ACTIVATIONS:
            raise SpecMismatch(f"unknown activation {self.activation!r}")
        if self.input_encoding not in ENCODINGS:
            raise SpecMismatch(f"unknown input encoding {self.input_encoding!r}")
        if self.variant == "bc_rnn" and self.input_encoding != "raw":
            raise SpecMismatch("bc_rnn reads raw frames")

    @property
    def input_dim(self) -> int:
        return self.H * self.obs_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        return cls(**d)


@dataclass
class GaussianEmbedding:
    mu: np.ndarray
    sigma: np.ndarray


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _init_dense(rng: np.random.Generator, n_in: int, n_out: int):
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)


class MLP:
    """Dense layers with a hidden activation and a linear output layer."""

    def __init__(self, store: ParamStore, prefix: str, sizes: list[int], partition: str,
                 rng: np.random.Generator, activation: str = "tanh"):
        self.store = store
        self.prefix = prefix
        self.sizes = list(sizes)
        self.activation = activation
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W, b = _init_dense(rng, n_in, n_out)
            wn, bn = f"{prefix}/layer{i}/W", f"{prefix}/layer{i}/b"
            store.add(wn, W, partition)
            store.add(bn, b, partition)
            self.layers.append((wn, bn))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, (wn, bn) in enumerate(self.layers):
            x = ad.dense(x, self.store[wn], self.store[bn])
            if i < n - 1:
                x = ad.activation(x, self.activation)
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        n = len(self.layers)
        for i, (wn, bn) in enumerate(self.layers):
            x = x @ self.store[wn].data + self.store[bn].data
            if i < n - 1:
                x = _act_np(x, self.activation)
        return x


def _act_np(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.logaddexp(0.0, x)


ENCODINGS = ("raw", "diff")


def difference_matrix(obs_dim: int, H: int) -> np.ndarray:
    """Linear map from ``[o_t, o_{t-1}, ...]`` to ``[o_t, D o_t, D^2 o_t, ...]``.

    ``D^k`` is the k-th order backward difference at time t.  The map is
    invertible, so the encoded window carries exactly the same information.
    """
    M = np.zeros((H, H))
    for k in range(H):
        for j in range(k + 1):
            M[j, k] = (-1) ** j * math.comb(k, j)
    return np.kron(M, np.eye(obs_dim))


class Normalizer:
    """Input encoding plus per-column standardisation.

    ``raw`` shares one mean/std per observation dimension across frames;
    ``diff`` first maps the window to backward differences and standardises
    every column on its own.
    """

    def __init__(self, obs_dim: int, H: int, encoding: str = "raw"):
        if encoding not in ENCODINGS:
            raise SpecMismatch(f"unknown input encoding {encoding!r}")
        self.obs_dim, self.H, self.encoding = obs_dim, H, encoding
        self.mean = np.zeros(H * obs_dim)
        self.std = np.ones(H * obs_dim)
        self._M = difference_matrix(obs_dim, H) if encoding == "diff" else None

    def encode(self, windows: np.ndarray) -> np.ndarray:
        return windows if self._M is None else windows @ self._M

    def fit(self, windows: np.ndarray) -> None:
        if self._M is None:
            frames = windows.reshape(-1, self.obs_dim)
            self.mean = np.tile(frames.mean(axis=0), self.H)
            self.std = np.tile(np.maximum(frames.std(axis=0), 1e-6), self.H)
        else:
            z = self.encode(windows)
            self.mean = z.mean(axis=0)
            self.std = np.maximum(z.std(axis=0), 1e-6)

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        return (self.encode(windows) - self.mean) / self.std


def _check_windows(windows: np.ndarray, spec: PolicySpec) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 1:
        windows = windows[None, :]
    if windows.shape[1] != spec.input_dim:
        if spec.variant == "bc_so" and windows.shape[1] > spec.obs_dim:
            raise SpecMismatch("bc_so received a multi-frame window")
        raise SpecMismatch(f"window width {windows.shape[1]} != H*obs_dim = {spec.input_dim}")
    return windows


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Policy:
    """Common surface: ``act`` for deterministic evaluation, ``predict`` for training."""

    spec: PolicySpec
    params: ParamStore
    normalizer: Normalizer
    action_bounds: tuple[float, float] = (-1.0, 1.0)

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        return self.act(windows)

    def act(self, windows: np.ndarray, clamp: bool = True) -> np.ndarray:
        out = self.forward_np(_check_windows(windows, self.spec))
        if clamp:
            out = np.clip(out, *self.action_bounds)
        return out

    def forward_np(self, windows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, windows: np.ndarray, train: bool, rng: np.random.Generator | None) -> Tensor:
        raise NotImplementedError

    def features(self, windows: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FeedForwardPolicy(Policy):
    """bc_so / bc_oh / dropout_bc: encoder to a d_e-wide layer, then decoder."""

    def __init__(self, spec: PolicySpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        a = spec.activation
        self.encoder = MLP(self.params, "baseline/enc", [spec.input_dim, *spec.enc_widths, spec.d_e],
                           "baseline", rng, a)
        self.decoder = MLP(self.params, "baseline/dec", [spec.d_e, *spec.dec_widths, spec.act_dim],
                           "baseline", rng, a)
        self.normalizer = Normalizer(spec.obs_dim, spec.H, spec.input_encoding)

    def _dropout_factors(self, x: np.ndarray, train: bool, rng) -> np.ndarray | None:
        if self.spec.variant != "dropout_bc" or not train or self.spec.dropout_p == 0.0:
            return None
        return ad.dropout_mask(x, self.spec.dropout_p, rng, True,
                               block=slice(self.spec.obs_dim, None))

    def predict(self, windows, train=False, rng=None):
        x = self.normalizer(_check_windows(windows, self.spec))
        factors = self._dropout_factors(x, train, rng)
        if factors is not None:
            x = x * factors
        h = ad.activation(self.encoder(Tensor(x)), self.spec.activation)
        return self.decoder(h)

    def forward_np(self, windows):
        h = _act_np(self.encoder.forward_np(self.normalizer(windows)), self.spec.activation)
        return self.decoder.forward_np(h)

    def features(self, windows):
        """Layer-4 activations; the counterpart of the TCA+IB embedding mean."""
        x = self.normalizer(_check_windows(windows, self.spec))
        return _act_np(self.encoder.forward_np(x), self.spec.activation)


class RecurrentPolicy(Policy):
    """bc_rnn: h_k = tanh(o_k W_x + h_{k-1} W_h + b), oldest frame first."""

    def __init__(self, spec: PolicySpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        n_h = spec.rnn_hidden
        Wx, b = _init_dense(rng, spec.obs_dim, n_h)
        Wh = np.linalg.qr(rng.standard_normal((n_h, n_h)))[0]
        self.params.add("baseline/rnn/Wx", Wx, "baseline")
        self.params.add("baseline/rnn/Wh", Wh, "baseline")
        self.params.add("baseline/rnn/b", b, "baseline")
        self.head = MLP(self.params, "baseline/head", [n_h, *spec.dec_widths, spec.act_dim],
                        "baseline", rng, spec.activation)
        self.normalizer = Normalizer(spec.obs_dim, spec.H, spec.input_encoding)

    def _frames(self, windows):
        x = self.normalizer(_check_windows(windows, self.spec))
        d = self.spec.obs_dim
        # window order is newest first; unroll oldest first
        return [x[:, k * d:(k + 1) * d] for k in reversed(range(self.spec.H))]

    def predict(self, windows, train=False, rng=None):
        p = self.params
        h = None
        for frame in self._frames(windows):
            pre = ad.dense(Tensor(frame), p["baseline/rnn/Wx"], p["baseline/rnn/b"])
            if h is not None:
                pre = ad.add(pre, ad.dense(h, p["baseline/rnn/Wh"], Tensor(np.zeros(self.spec.rnn_hidden))))
            h = ad.activation(pre, "tanh")
        return self.head(h)

    def forward_np(self, windows):
        p = self.params
        h = np.zeros((windows.shape[0], self.spec.rnn_hidden))
        for frame in self._frames(windows):
            h = np.tanh(frame @ p["baseline/rnn/Wx"].data + h @ p["baseline/rnn/Wh"].data
                        + p["baseline/rnn/b"].data)
        return self.head.forward_np(h)

    def features(self, windows):
        p = self.params
        h = np.zeros((np.atleast_2d(windows).shape[0], self.spec.rnn_hidden))
        for frame in self._frames(windows):
            h = np.tanh(frame @ p["baseline/rnn/Wx"].data + h @ p["baseline/rnn/Wh"].data
                        + p["baseline/rnn/b"].data)
        return h


class TCAIBModel(Policy):
    """Encoder E -> (mu, sigma), decoder F on a sample, adversary D on mu.

    D sees ``[mu, a_t]`` when the adversary is target-conditioned and ``mu``
    alone otherwise.
    """

    def __init__(self, spec: PolicySpec, seed: int = 0):
        if spec.variant != "tca_ib":
            raise SpecMismatch("TCAIBModel needs variant 'tca_ib'")
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        a = spec.activation
        self.E = MLP(self.params, "E", [spec.input_dim, *spec.enc_widths, 2 * spec.d_e], "E", rng, a)
        self.F = MLP(self.params, "F", [spec.d_e, *spec.dec_widths, spec.act_dim], "F", rng, a)
        d_in = spec.d_e + (spec.act_dim if spec.conditional_adversary else 0)
        self.D = MLP(self.params, "D", [d_in, *spec.adv_widths, spec.act_dim], "D", rng, a)
        self.normalizer = Normalizer(spec.obs_dim, spec.H, spec.input_encoding)

    # -- taped pieces -------------------------------------------------------
    def encode_tensor(self, windows: np.ndarray) -> tuple[Tensor, Tensor]:
        x = self.normalizer(_check_windows(windows, self.spec))
        out = self.E(Tensor(x))
        d = self.spec.d_e
        return ad.columns(out, 0, d), ad.positive_sigma(ad.columns(out, d, 2 * d))

    def adversary_input(self, mu: Tensor, a_t: np.ndarray | Tensor) -> Tensor:
        if self.spec.conditional_adversary:
            return ad.concat([mu, ad.as_tensor(a_t)], axis=1)
        return mu

    def adversary_tensor(self, mu: Tensor, a_t) -> Tensor:
        return self.D(self.adversary_input(mu, a_t))

    def predict(self, windows, train=False, rng=None, sample=True):
        mu, sigma = self.encode_tensor(windows)
        if train and sample:
            e = ad.reparam_sample(mu, sigma, rng.standard_normal(mu.shape))
        else:
            e = mu
        return self.F(e)

    # -- numpy fast paths ---------------------------------------------------
    def encode(self, windows: np.ndarray) -> GaussianEmbedding:
        x = self.normalizer(_check_windows(windows, self.spec))
        out = self.E.forward_np(x)
        d = self.spec.d_e
        lo, hi = ad.SIGMA_RAW_RANGE
        sigma = np.logaddexp(0.0, np.clip(out[:, d:], lo, hi)) + ad.SIGMA_FLOOR
        return GaussianEmbedding(out[:, :d], sigma)

    def decode(self, e: np.ndarray, clamp: bool = False) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if e.shape[1] != self.spec.d_e:
            raise SpecMismatch(f"embedding width {e.shape[1]} != d_e {self.spec.d_e}")
        out = self.F.forward_np(e)
        return np.clip(out, *self.action_bounds) if clamp else out

    def adversary_predict(self, mu: np.ndarray, a_t: np.ndarray) -> np.ndarray:
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        if mu.shape[1] != self.spec.d_e or a_t.shape[1] != self.spec.act_dim:
            raise SpecMismatch("adversary input dims do not match the policy spec")
        x = np.concatenate([mu, a_t], axis=1) if self.spec.conditional_adversary else mu
        return self.D.forward_np(x)

    def forward_np(self, windows):
        return self.F.forward_np(self.encode(windows).mu)

    def features(self, windows):
        return self.encode(windows).mu


class CopycatOracle(Policy):
    """Returns the previous action recovered by inverse dynamics.

    The window's three newest frames give two speeds and hence the last
    acceleration; with only two frames the speed before the last step is
    taken to equal the current one.
    """

    def __init__(self, spec: PolicySpec, env: EnvConfig):
        self.spec = spec
        self.env = env
        self.params = ParamStore()
        self.normalizer = Normalizer(spec.obs_dim, spec.H, spec.input_encoding)
        self.action_bounds = (env.action_low, env.action_high)

    def _positions(self, windows):
        d = self.spec.obs_dim
        frames = [windows[:, k * d] for k in range(self.spec.H)]
        if self.env.kind == "stop_and_go":
            frames = [-f for f in frames]  # distance shrinks as the car advances
        return frames

    def forward_np(self, windows):
        if self.spec.H < 2:
            return np.zeros((windows.shape[0], self.spec.act_dim))
        dt, f = self.env.dt, self.env.friction
        p = self._positions(windows)
        v_now = (p[0] - p[1]) / dt
        v_prev = (p[1] - p[2]) / dt if self.spec.H >= 3 else v_now
        a_prev = (v_now - (1.0 - f * dt) * v_prev) / dt
        return a_prev[:, None]

    def predict(self, windows, train=False, rng=None):
        return Tensor(self.forward_np(_check_windows(windows, self.spec)))

    def features(self, windows):
        return self.forward_np(_check_windows(windows, self.spec))


def build_policy(spec: PolicySpec, seed: int = 0, env: EnvConfig | None = None) -> Policy:
    if spec.variant == "tca_ib":
        return TCAIBModel(spec, seed)
    if spec.variant == "bc_rnn":
        return RecurrentPolicy(spec, seed)
    if spec.variant == "copycat_oracle":
        if env is None:
            raise SpecMismatch("copycat_oracle needs the env config")
        return CopycatOracle(spec, env)
    return FeedForwardPolicy(spec, seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return "[" + ",".join(f"{v:.17g}" for v in np.asarray(values, dtype=np.float64).ravel()) + "]"


def checkpoint_text(policy: Policy, extra: dict | None = None) -> str:
    """Serialise to JSON; floats are written with 17 significant digits."""
    parts = [
        f'"format":{json.dumps(CHECKPOINT_FORMAT)}',
        f'"version":{CHECKPOINT_VERSION}',
        f'"spec":{json.dumps(policy.spec.to_dict(), sort_keys=True)}',
        f'"normalizer":{{"mean":{_fmt(policy.normalizer.mean)},"std":{_fmt(policy.normalizer.std)}}}',
        f'"extra":{json.dumps(extra or {}, sort_keys=True)}',
    ]
    entries = []
    for name, t in policy.params.entries.items():
        entries.append(f'{json.dumps(name)}:{{"partition":{json.dumps(policy.params.partition[name])},'
                       f'"shape":{json.dumps(list(t.shape))},"values":{_fmt(t.data)}}}')
    parts.append('"params":{' + ",".join(entries) + "}")
    return "{" + ",".join(parts) + "}\n"


def save_checkpoint(policy: Policy, path, extra: dict | None = None) -> None:
    Path(path).write_text(checkpoint_text(policy, extra))


def policy_from_checkpoint(doc: dict, env: EnvConfig | None = None,
                           expected: PolicySpec | None = None) -> Policy:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SpecMismatch("not a copycat-lab checkpoint")
    spec = PolicySpec.from_dict(doc["spec"])
    if expected is not None:
        for key in ("variant", "obs_dim", "act_dim", "H"):
            if getattr(spec, key) != getattr(expected, key):
                raise SpecMismatch(f"checkpoint {key}={getattr(spec, key)} does not match "
                                   f"expected {getattr(expected, key)}")
    policy = build_policy(spec, 0, env)
    stored = doc["params"]
    missing = set(policy.params) - set(stored)
    if missing:
        raise SpecMismatch(f"checkpoint is missing parameters: {sorted(missing)}")
    unexpected = set(stored) - set(policy.params)
    if unexpected:
        raise SpecMismatch(f"checkpoint has unknown parameters: {sorted(unexpected)}")
    for name, entry in stored.items():
        shape = tuple(entry["shape"])
        if shape != policy.params[name].shape:
            raise SpecMismatch(f"shape mismatch for {name}: {shape} vs {policy.params[name].shape}")
        policy.params[name].data = np.array(entry["values"], dtype=np.float64).reshape(shape)
    policy.normalizer.mean = np.array(doc["normalizer"]["mean"], dtype=np.float64)
    policy.normalizer.std = np.array(doc["normalizer"]["std"], dtype=np.float64)
    return policy


def load_checkpoint(path, env: EnvConfig | None = None,
                    expected: PolicySpec | None = None) -> Policy:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecMismatch(f"malformed checkpoint {path}: {exc}") from exc
    return policy_from_checkpoint(doc, env, expected)
