import numpy as np
import pytest

from copycat_lab import autodiff as ad
from copycat_lab.data import collect_demonstrations, make_history_windows
from copycat_lab.envs import EnvConfig
from copycat_lab.policies import PolicySpec, TCAIBModel, build_policy
from copycat_lab.training import (DaggerConfig, TrainingConfig, adversary_loss,
                                  checkpoint_iterations, learning_rate, objective_V, train_bc,
                                  train_dagger, train_policy, train_tcaib, write_log_csv)

ENV = EnvConfig(kind="inertial_tracker")
SMALL = dict(d_e=4, enc_widths=(8, 8), dec_widths=(6,), adv_widths=(6,))


@pytest.fixture(scope="module")
def data():
    return collect_demonstrations(ENV, 4, 0)


@pytest.fixture(scope="module")
def windows(data):
    return make_history_windows(data, 2)


def tca(seed=0, **kw):
    return TCAIBModel(PolicySpec("tca_ib", 2, 1, H=2, **{**SMALL, **kw}), seed)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lr_EF=-1)
    with pytest.raises(ValueError):
        TrainingConfig(decay_points=(0.7, 0.5))
    with pytest.raises(ValueError):
        TrainingConfig(mode="fancy")
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"n_iters": 10, "momentum": 0.9})


def test_schedule():
    cfg = TrainingConfig(n_iters=100)
    lrs = [learning_rate(1.0, i, cfg) for i in range(100)]
    assert lrs[0] == 1.0 and lrs[49] == 1.0 and lrs[50] == pytest.approx(0.1)
    assert lrs[75] == pytest.approx(0.01) and lrs[99] == pytest.approx(1e-3)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_checkpoint_iterations():
    assert checkpoint_iterations(TrainingConfig(n_iters=600)) == [560, 570, 580, 590, 600]
    assert checkpoint_iterations(TrainingConfig(n_iters=3)) == [1, 2, 3]


def test_objective_terms(windows):
    model = tca()
    batch = windows.subset(np.arange(8))
    noise = np.random.default_rng(0).standard_normal((8, 4))
    cfg = TrainingConfig(alpha=2.0, lam=1e-3)
    t = objective_V(model, batch, noise, cfg)
    v = t.values()
    assert v["V"] == pytest.approx(v["bc_loss"] + 1e-3 * v["kl"] - 2.0 * v["adv_loss"])
    plain = objective_V(model, batch, noise, TrainingConfig(alpha=0.0, lam=0.0))
    assert plain.values()["V"] == pytest.approx(v["bc_loss"])


def test_objective_skips_boundary_rows(windows):
    model = tca()
    batch = windows.subset(np.array([0]))
    assert batch.boundary.all()
    t = objective_V(model, batch, None, TrainingConfig())
    assert t.adv_loss is None


def test_objective_gradients_match_finite_differences(windows):
    model = tca(1)
    batch = windows.subset(np.arange(3, 8))
    noise = np.random.default_rng(2).standard_normal((5, 4))
    cfg = TrainingConfig()
    report = ad.grad_check(lambda: objective_V(model, batch, noise, cfg).V, model.params, 1e-4)
    assert report.worst <= 1e-4


def test_alpha_lambda_zero_equals_bc(windows):
    # with alpha = lambda = 0 and no sampling the loop is plain BC on E and F
    cfg = TrainingConfig(n_iters=30, alpha=0.0, lam=0.0, use_ib=False, seed=3)
    a = train_tcaib(tca(5), windows, cfg)
    b = train_bc(tca(5), windows, cfg)
    assert np.array_equal(a.policy.act(windows.obs), b.policy.act(windows.obs))


def test_zero_adversary_lr_leaves_d_unchanged(windows):
    model = tca(2)
    before = {n: model.params[n].data.copy() for n in model.params.names(("D",))}
    after_e = model.params[model.params.names(("E",))[0]].data.copy()
    train_tcaib(model, windows, TrainingConfig(n_iters=20, lr_D=0.0))
    assert all(np.array_equal(model.params[n].data, v) for n, v in before.items())
    assert not np.array_equal(model.params[model.params.names(("E",))[0]].data, after_e)


def test_adversary_step_descends(windows):
    model = tca(4)
    batch = windows.subset(np.arange(1, 40))
    mu = model.encode(batch.obs).mu
    loss0 = adversary_loss(model, mu, batch, None)
    model.params.zero_grad()
    loss0.backward()
    grads = model.params.grads(("D",))
    ad.adam_step(model.params, grads, ad.AdamState(), 1e-3, ("D",))
    assert adversary_loss(model, mu, batch, None).item() < loss0.item()


def test_encoder_step_raises_adversary_loss(windows):
    # the E update ascends the adversary's loss when only that term is active
    model = tca(6)
    batch = windows.subset(np.arange(1, 60))
    cfg = TrainingConfig(alpha=1.0, lam=0.0, use_ib=False)
    t = objective_V(model, batch, None, cfg)
    adv0 = t.adv_loss.item()
    model.params.zero_grad()
    model.params.set_trainable(("D",), False)
    (ad.weighted_sum([(-1.0, t.adv_loss)])).backward()
    model.params.set_trainable(("D",), True)
    ad.adam_step(model.params, model.params.grads(("E",)), ad.AdamState(), 1e-3, ("E",))
    assert objective_V(model, batch, None, cfg).adv_loss.item() > adv0


def test_training_deterministic(windows):
    cfg = TrainingConfig(n_iters=40, seed=1)
    a = train_tcaib(tca(0), windows, cfg)
    b = train_tcaib(tca(0), windows, cfg)
    assert a.log == b.log
    assert all(np.array_equal(a.policy.params[n].data, b.policy.params[n].data) for n in a.policy.params)


def test_adversary_noise_does_not_touch_bc_stream(windows):
    # the embedding noise only feeds D; changing its scale changes nothing about E/F at step 1
    cfg = TrainingConfig(n_iters=1, log_every=1)
    a = train_tcaib(tca(0), windows, cfg)
    b = train_tcaib(tca(0), windows, TrainingConfig(n_iters=1, log_every=1, sigma_noise=0.0))
    for n in a.policy.params.names(("E", "F")):
        assert np.array_equal(a.policy.params[n].data, b.policy.params[n].data)


def test_log_rows_and_lr_columns(windows, tmp_path):
    res = train_tcaib(tca(0), windows, TrainingConfig(n_iters=200, log_every=10))
    lrs = [r["lr_EF"] for r in res.log]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert len(res.checkpoints) == 5
    path = tmp_path / "log.csv"
    write_log_csv(res.log, path)
    assert path.read_text().splitlines()[0] == "iteration,bc_loss,kl,adv_loss,lr_EF,lr_D"


def test_staged_freeze_keeps_trunk(windows):
    model = tca(0)
    trunk = [n for pair in model.E.layers[:-1] for n in pair]
    cfg = TrainingConfig(n_iters=40, mode="staged", freeze_encoder=True)
    res = train_tcaib(model, windows, cfg)
    mid = dict(res.checkpoints[0][1]) if res.checkpoints else None
    assert all(model.params[n].requires_grad for n in trunk)
    assert len(res.checkpoints) == 5
    # every kept checkpoint falls in phase 2, where the trunk is frozen
    snaps = [dict(s) for _, s in res.checkpoints]
    for n in trunk:
        assert all(np.array_equal(s[n], snaps[0][n]) for s in snaps)
    assert mid is not None


def test_bc_trains_down(windows):
    pol = build_policy(PolicySpec("bc_oh", 2, 1, H=2, **SMALL), 0)
    res = train_bc(pol, windows, TrainingConfig(n_iters=300, lr_EF=3e-3))
    assert res.log[-1]["bc_loss"] < res.log[0]["bc_loss"]


def test_dagger_quotas():
    assert DaggerConfig(query_budget=100).quotas() == [25, 25, 25, 25]
    assert sum(DaggerConfig(query_budget=1001, n_rounds=4).quotas()) == 1001
    assert DaggerConfig(query_budget=2, n_rounds=4).quotas() == [1, 1]
    assert DaggerConfig(query_budget=0).quotas() == []
    with pytest.raises(ValueError):
        DaggerConfig(query_budget=-1)


def test_dagger_zero_budget_equals_bc(data):
    spec = PolicySpec("bc_oh", 2, 1, H=2, **SMALL)
    cfg = TrainingConfig(n_iters=30, seed=2)
    res = train_dagger(data, ENV, spec, cfg, DaggerConfig(query_budget=0), init_seed=7)
    ref = train_policy(build_policy(spec, 7), make_history_windows(data, 2), cfg)
    w = make_history_windows(data, 2).obs
    assert res.queries_used == 0 and res.rounds == 0
    assert np.array_equal(res.policy.act(w), ref.policy.act(w))


@pytest.mark.parametrize("budget", [7, 100])
def test_dagger_query_accounting(data, budget):
    spec = PolicySpec("bc_oh", 2, 1, H=2, **SMALL)
    res = train_dagger(data, ENV, spec, TrainingConfig(n_iters=20), DaggerConfig(query_budget=budget))
    assert res.queries_used == budget and res.rounds == min(4, budget)
