"""Small reverse-mode differentiation engine on float64 numpy arrays.

Only the handful of ops needed by the policy networks and losses are
provided.  Every op returns a new :class:`Tensor` holding a closure that
pushes the upstream gradient to its parents; :meth:`Tensor.backward` walks
the tape in reverse topological order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMA_FLOOR = 1e-4
SIGMA_RAW_RANGE = (-10.0, 5.0)

ACTIVATIONS = ("tanh", "relu", "softplus")
PARTITIONS = ("E", "F", "D", "probe", "baseline")


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_order")
    _counter = 0

    def __init__(self, data, parents: tuple = (), backward=None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name
        # creation order is a valid topological order of the tape
        Tensor._counter += 1
        self._order = Tensor._counter

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not self.requires_grad:
            return
        nodes = {id(self): self}
        stack = [self]
        while stack:
            node = stack.pop()
            for p in node._parents:
                if p.requires_grad and id(p) not in nodes:
                    nodes[id(p)] = p
                    stack.append(p)
        order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
        seed = np.ones_like(self.data) if grad is None else np.broadcast_to(
            np.asarray(grad, dtype=np.float64), self.data.shape)
        grads: dict[int, np.ndarray] = {id(self): np.array(seed, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, what: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a batch of row vectors."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"dense expects 2-d input/weights and 1-d bias, got "
                         f"{x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"dense shape mismatch: {x.shape} @ {W.shape} + {b.shape}")
    out = x.data @ W.data
    out += b.data
    if not np.isfinite(out).all():
        for t, nm in ((x, "input"), (W, "weights"), (b, "bias")):
            if not np.isfinite(t.data).all():
                raise NonFiniteError(f"non-finite values in dense {nm}")
        raise NonFiniteError("dense overflowed")
    xd, Wd = x.data, W.data
    need_x, need_w, need_b = x.requires_grad, W.requires_grad, b.requires_grad

    def backward(g):
        return (g @ Wd.T if need_x else None,
                xd.T @ g if need_w else None,
                g.sum(axis=0) if need_b else None)

    return Tensor(out, (x, W, b), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "tanh":
        y = np.tanh(x.data)

        def backward(g):
            return (g * (1.0 - y * y),)
    elif kind == "relu":
        mask = x.data > 0
        y = np.where(mask, x.data, 0.0)

        def backward(g):
            return (g * mask,)
    elif kind == "softplus":
        xd = x.data
        y = np.logaddexp(0.0, xd)

        def backward(g):
            return (g / (1.0 + np.exp(-xd)),)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return Tensor(y, (x,), backward)


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= low) & (x.data <= high)
    y = np.clip(x.data, low, high)
    return Tensor(y, (x,), lambda g: (g * mask,))


def positive_sigma(raw: Tensor) -> Tensor:
    """softplus of the clamped raw head output, plus a small floor."""
    lo, hi = SIGMA_RAW_RANGE
    s = activation(clamp(raw, lo, hi), "softplus")
    return Tensor(s.data + SIGMA_FLOOR, (s,), lambda g: (g,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return Tensor(out, tuple(parts), backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, start:stop]
    width = x.shape[1]

    def backward(g):
        full = np.zeros((g.shape[0], width))
        full[:, start:stop] = g
        return (full,)

    return Tensor(out, (x,), backward)


def scale_rows(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply each row (or element) by a constant array broadcastable to x."""
    x = as_tensor(x)
    factors = np.asarray(factors, dtype=np.float64)
    return Tensor(x.data * factors, (x,), lambda g: (g * factors,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def weighted_sum(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    """Scalar combination ``sum_i w_i * t_i`` of scalar tensors."""
    terms = [(float(w), as_tensor(t)) for w, t in terms]
    total = sum(w * t.data for w, t in terms)
    weights = [w for w, _ in terms]

    def backward(g):
        return tuple(w * g for w in weights)

    return Tensor(np.asarray(total, dtype=np.float64), tuple(t for _, t in terms), backward)


def mse_loss(pred: Tensor, target: Tensor, row_mask: np.ndarray | None = None) -> Tensor:
    """Mean over batch and dims of squared error.

    ``row_mask`` (bool per row) restricts the mean to the selected rows.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if row_mask is None:
        w = np.full(diff.shape, 1.0 / diff.size)
    else:
        row_mask = np.asarray(row_mask, dtype=bool)
        n = int(row_mask.sum())
        if n == 0:
            raise ValueError("mse_loss mask selects no rows")
        w = np.repeat((row_mask / (n * diff.shape[1]))[:, None], diff.shape[1], axis=1)
    val = np.sum(w * diff * diff)
    _check_finite(val, "mse_loss")

    def backward(g):
        gp = 2.0 * g * w * diff
        return (gp, -gp)

    return Tensor(val, (pred, target), backward)


def kl_diag_gaussian(mu: Tensor, sigma: Tensor) -> Tensor:
    """Batch-mean KL( N(mu, diag sigma^2) || N(0, I) )."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ShapeError(f"kl shape mismatch {mu.shape} vs {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("kl_diag_gaussian requires strictly positive sigma")
    m, s = mu.data, sigma.data
    n = m.shape[0] if m.ndim > 1 else 1
    val = 0.5 * np.sum(m * m + s * s - 1.0 - 2.0 * np.log(s)) / n
    _check_finite(val, "kl_diag_gaussian")

    def backward(g):
        return (g * m / n, g * (s - 1.0 / s) / n)

    return Tensor(val, (mu, sigma), backward)


def reparam_sample(mu: Tensor, sigma: Tensor, noise: np.ndarray) -> Tensor:
    """``mu + sigma * noise``; ``noise`` is a constant (no gradient)."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    noise = np.asarray(noise, dtype=np.float64)
    if not (mu.shape == sigma.shape == noise.shape):
        raise ShapeError(f"reparam shape mismatch {mu.shape}, {sigma.shape}, {noise.shape}")
    out = mu.data + sigma.data * noise
    return Tensor(out, (mu, sigma), lambda g: (g, g * noise))


def dropout_mask(x: np.ndarray, p: float, rng: np.random.Generator,
                 train_mode: bool, block: slice | None = None) -> np.ndarray:
    """Inverted dropout applied per row to a column block of ``x``.

    In train mode each row's block is zeroed with probability ``p``; kept
    blocks are scaled by ``1/(1-p)``.  ``block=None`` drops whole rows.
    Returns the multiplicative factor array (same shape as ``x``).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    factors = np.ones_like(np.asarray(x, dtype=np.float64))
    if not train_mode or p == 0.0:
        return factors
    keep = rng.random(factors.shape[0]) >= p
    col = slice(None) if block is None else block
    factors[:, col] = (keep / (1.0 - p))[:, None]
    return factors


# ---------------------------------------------------------------------------
# parameters and optimiser
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered named parameters, each tagged with a partition label."""

    def __init__(self):
        self.entries: OrderedDict[str, Tensor] = OrderedDict()
        self.partition: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, partition: str) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.entries[name] = t
        self.partition[name] = partition
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, partitions: Iterable[str] | None = None) -> list[str]:
        if partitions is None:
            return list(self.entries)
        wanted = set(partitions)
        return [n for n in self.entries if self.partition[n] in wanted]

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def grads(self, partitions: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names(partitions):
            g = self.entries[n].grad
            out[n] = np.zeros_like(self.entries[n].data) if g is None else g
        return out

    def set_trainable(self, partitions: Iterable[str], flag: bool) -> None:
        """Toggle gradient tracking for whole partitions."""
        for n in self.names(partitions):
            self.entries[n].requires_grad = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self.entries[n].data = np.array(v, dtype=np.float64)


@dataclass
class AdamState:
    """Adam moments for one group of parameters.

    Moments are kept as flat vectors; ``m[name]`` / ``v[name]`` are shaped
    views into them.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    _names: tuple = ()
    _flat_m: np.ndarray | None = None
    _flat_v: np.ndarray | None = None

    def _bind(self, params: "ParamStore", names: list[str]) -> None:
        if tuple(names) == self._names:
            return
        if self._names:
            raise ValueError("AdamState is bound to a different parameter group")
        size = sum(params[n].data.size for n in names)
        self._flat_m, self._flat_v = np.zeros(size), np.zeros(size)
        off = 0
        for n in names:
            shape = params[n].shape
            k = params[n].data.size
            self.m[n] = self._flat_m[off:off + k].reshape(shape)
            self.v[n] = self._flat_v[off:off + k].reshape(shape)
            off += k
        self._names = tuple(names)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, partitions: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update of the selected partitions, in place."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    names = params.names(partitions)
    if tuple(names) != state._names:
        _check_grads(params, grads, names)
    g = np.concatenate([grads[n].ravel() for n in names]) if names else np.zeros(0)
    if state._flat_m is not None and g.size != state._flat_m.size:
        _check_grads(params, grads, names)
    if not np.isfinite(g).all():
        bad = [n for n in names if not np.isfinite(grads[n]).all()]
        raise NonFiniteError(f"non-finite gradient for {bad}")
    state._bind(params, names)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state._flat_m, state._flat_v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    g *= g
    v += (1.0 - b2) * g
    if lr == 0:
        return
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    update = np.sqrt(v * (1.0 / c2))
    update += state.eps
    np.divide(m, update, out=update)
    update *= lr / c1
    off = 0
    for n in names:
        p = params[n]
        k = p.data.size
        p.data = p.data - update[off:off + k].reshape(p.shape)
        off += k


def _check_grads(params: ParamStore, grads: dict, names: list[str]) -> None:
    for n in names:
        if n not in grads:
            raise KeyError(f"missing gradient for {n!r}")
        if grads[n].shape != params[n].shape:
            raise ShapeError(f"gradient shape {grads[n].shape} != param shape "
                             f"{params[n].shape} for {n}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], params: ParamStore, tolerance: float = 1e-4,
               h: float = 1e-5, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` to central differences.

    The relative error of a parameter is ``max|analytic - numeric|`` divided
    by the larger of the two gradients' max-norms.
    """
    params.zero_grad()
    loss_fn().backward()
    analytic = {n: (np.zeros_like(params[n].data) if params[n].grad is None
                    else params[n].grad.copy()) for n in params}
    report = {}
    for n in (list(params) if names is None else list(names)):
        p = params[n]
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        a = analytic[n].reshape(-1)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        report[n] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    params.zero_grad()
    return GradCheckReport(report, tolerance)
