import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from copycat_lab import autodiff as ad
from copycat_lab.autodiff import AdamState, ParamStore, Tensor


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# -- dense ------------------------------------------------------------------

def test_dense_identity():
    out = ad.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [[1.0, 2.0]]


def test_dense_sum():
    out = ad.dense(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[6.0]]


def test_dense_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    W = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    c = rng.standard_normal((3, 2))

    def f():
        return float(np.sum(c * ad.dense(x, W, b).data))

    out = ad.dense(x, W, b)
    Tensor(np.sum(c * out.data), (out,), lambda g: (g * c,)).backward()
    for t in (x, W, b):
        assert rel_err(t.grad, fd_grad(f, t.data)) < 1e-4


def test_dense_shape_and_finite_errors():
    with pytest.raises(ad.ShapeError):
        ad.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(ad.NonFiniteError):
        ad.dense(Tensor([[np.nan, 1.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))


# -- activations ------------------------------------------------------------

def test_activation_values():
    assert ad.activation(Tensor([0.0]), "tanh").data[0] == 0.0
    assert ad.activation(Tensor([-3.0, 3.0]), "relu").data.tolist() == [0.0, 3.0]
    with pytest.raises(ValueError):
        ad.activation(Tensor([0.0]), "gelu")


@pytest.mark.parametrize("kind", ["tanh", "softplus"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 3)) * 2, requires_grad=True)
    c = rng.standard_normal((4, 3))
    y = ad.activation(x, kind)
    Tensor(np.sum(c * y.data), (y,), lambda g: (g * c,)).backward()
    num = fd_grad(lambda: float(np.sum(c * ad.activation(Tensor(x.data), kind).data)), x.data)
    assert rel_err(x.grad, num) < 1e-4


# -- losses -----------------------------------------------------------------

def test_mse_values_and_gradient():
    assert ad.mse_loss(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0]])).item() == 0.0
    pred = Tensor([[1.0, 2.0]], requires_grad=True)
    loss = ad.mse_loss(pred, Tensor([[0.0, 0.0]]))
    assert loss.item() == 2.5
    loss.backward()
    assert np.allclose(pred.grad, 2 * np.array([[1.0, 2.0]]) / 2)
    with pytest.raises(ad.ShapeError):
        ad.mse_loss(Tensor([[1.0]]), Tensor([[1.0, 2.0]]))


def test_mse_row_mask_ignores_rows():
    pred = Tensor([[1.0], [5.0]], requires_grad=True)
    loss = ad.mse_loss(pred, Tensor([[0.0], [0.0]]), row_mask=np.array([True, False]))
    assert loss.item() == 1.0
    loss.backward()
    assert pred.grad[1, 0] == 0.0


def test_kl_values():
    assert ad.kl_diag_gaussian(Tensor(np.zeros((2, 5))), Tensor(np.ones((2, 5)))).item() == 0.0
    assert ad.kl_diag_gaussian(Tensor([[1.0]]), Tensor([[1.0]])).item() == 0.5
    assert math.isclose(ad.kl_diag_gaussian(Tensor([[0.0]]), Tensor([[2.0]])).item(),
                        0.5 * (4 - 1 - math.log(4)), rel_tol=1e-15)
    assert math.isclose(0.5 * (4 - 1 - math.log(4)), 0.806852, abs_tol=1e-6)
    with pytest.raises(ValueError):
        ad.kl_diag_gaussian(Tensor([[0.0]]), Tensor([[0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 4), elements=st.floats(1e-3, 5)))
def test_kl_nonnegative(mu, sigma):
    val = ad.kl_diag_gaussian(Tensor(mu), Tensor(sigma)).item()
    assert val >= -1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
       arrays(np.float64, (2, 3), elements=st.floats(0.1, 3)))
def test_kl_zero_only_at_standard_normal(mu, sigma):
    val = ad.kl_diag_gaussian(Tensor(mu), Tensor(sigma)).item()
    if np.abs(mu).max() > 1e-3 or np.abs(sigma - 1).max() > 1e-3:
        assert val > 1e-12


def test_kl_gradient():
    rng = np.random.default_rng(2)
    mu = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    sg = Tensor(rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    ad.kl_diag_gaussian(mu, sg).backward()
    for t in (mu, sg):
        num = fd_grad(lambda: ad.kl_diag_gaussian(Tensor(mu.data), Tensor(sg.data)).item(), t.data)
        assert rel_err(t.grad, num) < 1e-6


# -- reparameterisation, sigma ---------------------------------------------------

def test_reparam():
    rng = np.random.default_rng(3)
    mu = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    sg = Tensor(rng.uniform(0.1, 1, (2, 3)), requires_grad=True)
    out = ad.reparam_sample(mu, sg, np.zeros((2, 3)))
    assert np.array_equal(out.data, mu.data)
    noise = rng.standard_normal((2, 3))
    ad.reparam_sample(mu, sg, noise).backward(np.ones((2, 3)))
    assert np.array_equal(sg.grad, noise)
    assert np.array_equal(mu.grad, np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.reparam_sample(mu, sg, np.zeros((3, 2)))


def test_reparam_at_sigma_floor():
    raw = Tensor(np.full((1, 3), -1e6))
    sigma = ad.positive_sigma(raw)
    assert np.all(sigma.data >= ad.SIGMA_FLOOR)
    mu = Tensor(np.array([[0.5, -0.5, 2.0]]))
    out = ad.reparam_sample(mu, sigma, np.ones((1, 3)))
    assert np.allclose(out.data, mu.data, atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_sigma_strictly_positive(raw):
    s = ad.positive_sigma(Tensor(raw)).data
    assert np.all(s >= ad.SIGMA_FLOOR) and np.all(np.isfinite(s))


# -- dropout ----------------------------------------------------------------

def test_dropout_identity_cases():
    rng = np.random.default_rng(0)
    x = np.ones((5, 4))
    assert np.array_equal(ad.dropout_mask(x, 0.0, rng, True), x)
    assert np.array_equal(ad.dropout_mask(x, 0.7, rng, False), x)
    with pytest.raises(ValueError):
        ad.dropout_mask(x, 1.0, rng, True)


def test_dropout_rate_monte_carlo():
    rng = np.random.default_rng(42)
    f = ad.dropout_mask(np.ones((100_000, 2)), 0.5, rng, True, block=slice(1, None))
    rate = np.mean(f[:, 1] == 0.0)
    assert abs(rate - 0.5) < 0.01
    assert np.all(f[:, 0] == 1.0)
    assert set(np.unique(f[:, 1])) <= {0.0, 2.0}


# -- params and Adam --------------------------------------------------------------

def make_store():
    s = ParamStore()
    s.add("E/W", np.ones((2, 2)), "E")
    s.add("D/W", np.ones(3), "D")
    return s


def test_param_store_names_and_partitions():
    s = make_store()
    assert s.names(("E",)) == ["E/W"]
    with pytest.raises(KeyError):
        s.add("E/W", np.zeros(1), "E")
    with pytest.raises(ValueError):
        s.add("X", np.zeros(1), "nope")


def test_adam_zero_grads_leave_params():
    s = make_store()
    st_ = AdamState()
    before = s.snapshot()
    ad.adam_step(s, {"E/W": np.zeros((2, 2))}, st_, 0.1, ("E",))
    assert np.array_equal(s["E/W"].data, before["E/W"])
    assert st_.step == 1


def test_adam_moments_decay_under_zero_grads():
    s = make_store()
    st_ = AdamState()
    ad.adam_step(s, {"E/W": np.ones((2, 2))}, st_, 1e-3, ("E",))
    m1 = st_.m["E/W"].copy()
    ad.adam_step(s, {"E/W": np.zeros((2, 2))}, st_, 1e-3, ("E",))
    assert np.allclose(st_.m["E/W"], 0.9 * m1)


def test_adam_first_step_is_lr():
    s = ParamStore()
    s.add("p", np.array([0.3]), "baseline")
    ad.adam_step(s, {"p": np.array([1.0])}, AdamState(), 0.01, ("baseline",))
    assert math.isclose(s["p"].data[0], 0.3 - 0.01, rel_tol=0, abs_tol=1e-9)


def test_adam_quadratic_bowl():
    s = ParamStore()
    s.add("x", np.array([1.0]), "baseline")
    st_ = AdamState()
    for _ in range(500):
        ad.adam_step(s, {"x": 2 * s["x"].data}, st_, 1e-2, ("baseline",))
    assert abs(s["x"].data[0]) < 1e-3


def test_adam_touches_only_selected_partition():
    s = make_store()
    ad.adam_step(s, {"E/W": np.ones((2, 2))}, AdamState(), 0.1, ("E",))
    assert np.array_equal(s["D/W"].data, np.ones(3))


def test_adam_errors():
    s = make_store()
    with pytest.raises(KeyError):
        ad.adam_step(s, {}, AdamState(), 0.1, ("E",))
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step(s, {"E/W": np.full((2, 2), np.inf)}, AdamState(), 0.1, ("E",))
    with pytest.raises(ad.ShapeError):
        ad.adam_step(s, {"E/W": np.ones(3)}, AdamState(), 0.1, ("E",))


def test_adam_bit_deterministic():
    outs = []
    for _ in range(2):
        s = make_store()
        st_ = AdamState()
        g = np.random.default_rng(5).standard_normal((2, 2))
        for _ in range(10):
            ad.adam_step(s, {"E/W": g.copy()}, st_, 0.05, ("E",))
        outs.append(s["E/W"].data.tobytes())
    assert outs[0] == outs[1]


# -- grad_check ---------------------------------------------------------------------

def test_grad_check_linear_exact():
    rng = np.random.default_rng(0)
    s = ParamStore()
    W = s.add("W", rng.standard_normal((3, 2)), "baseline")
    b = s.add("b", rng.standard_normal(2), "baseline")
    x = rng.standard_normal((4, 3))
    c = rng.standard_normal((4, 2))

    def loss():
        out = ad.dense(Tensor(x), W, b)
        return Tensor(np.sum(c * out.data), (out,), lambda g: (g * c,))

    rep = ad.grad_check(loss, s, 1e-8)
    assert rep.passed, rep.max_rel_err


def test_grad_check_detects_sabotage():
    s = ParamStore()
    W = s.add("W", np.array([[0.5, -1.0]]), "baseline")

    def loss():
        y = ad.activation(W, "tanh")
        # backward claims d tanh = 1 everywhere
        fake = Tensor(y.data, (W,), lambda g: (g,))
        return Tensor(np.sum(fake.data), (fake,), lambda g: (np.ones_like(fake.data) * g,))

    assert not ad.grad_check(loss, s, 1e-4).passed
