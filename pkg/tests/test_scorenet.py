import numpy as np
import pytest

from scoreflow.evalsuite import finite_diff_grad, mean_relative_l2, noisy_grid
from scoreflow.datasets import envelope_violations
from scoreflow.kernel import TrainingTuple, sample_training_tuple
from scoreflow.oracle import OracleEps
from scoreflow.samplers import SamplerConfig, sample_ddim, sample_sde
from scoreflow.schedules import make_schedule
from scoreflow.scorenet import (
    ADAM_LR,
    EMA,
    Adam,
    FiLMMLP,
    RFFEmbedding,
    dsm_loss_and_grads,
    eps_fn_of,
    train,
    train_step,
)


def tiny_net(seed=1, randomize=True):
    net = FiLMMLP(4, 4, hidden=(8, 8), n_freq=4, emb_hidden=8, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed)
        for k in net.params:
            net.params[k] = net.params[k] + 0.3 * rng.standard_normal(net.params[k].shape)
    return net


# -- embedding ---------------------------------------------------------------------


def test_rff_at_zero():
    emb = RFFEmbedding.random(32, 4.0, np.random.default_rng(0))
    e = emb(0.0)
    assert np.array_equal(e, np.r_[np.ones(32), np.zeros(32)])


def test_rff_bounded_and_deterministic():
    a = RFFEmbedding.random(32, 4.0, np.random.default_rng(3))
    b = RFFEmbedding.random(32, 4.0, np.random.default_rng(3))
    s = np.linspace(0, 5, 101)
    assert np.all(np.abs(a(s)) <= 1.0)
    assert np.array_equal(a(s), b(s))
    assert not a.frequencies.flags.writeable


def test_rff_rejects_negative_sigma():
    with pytest.raises(ValueError):
        RFFEmbedding.random()(-0.1)


# -- forward -----------------------------------------------------------------------


def test_zero_head_outputs_zero():
    net = FiLMMLP(3, 3, hidden=(16, 16))
    x = np.random.default_rng(0).standard_normal((10, 3))
    assert np.array_equal(net(x, 0.4), np.zeros((10, 3)))


def test_identity_film_equals_plain_mlp():
    from scoreflow.scorenet import silu

    net = tiny_net()
    for i, h in enumerate(net.hidden):
        net.params[f"film{i}.W"][:] = 0.0
        net.params[f"film{i}.b"] = np.r_[np.ones(h), np.zeros(h)]
    x = np.random.default_rng(1).standard_normal((5, 4))
    h = x
    for i in range(len(net.hidden)):
        h = silu(h @ net.params[f"dense{i}.W"] + net.params[f"dense{i}.b"])
    plain = h @ net.params["out.W"] + net.params["out.b"]
    np.testing.assert_allclose(net(x, 0.3), plain, rtol=1e-14)
    np.testing.assert_allclose(net(x, 0.9), plain, rtol=1e-14)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        tiny_net()(np.zeros((2, 3)), 0.5)


def test_single_vector_input():
    net = tiny_net()
    x = np.random.default_rng(0).standard_normal(4)
    np.testing.assert_allclose(net(x, 0.2), net(x[None], 0.2)[0], rtol=1e-15)


def test_sigma_continuity():
    net = tiny_net()
    rng = np.random.default_rng(2)
    for s in rng.uniform(0.0, 1.0, 50):
        x = rng.standard_normal(4)
        a, b = net(x, s), net(x, s + 1e-7)
        assert np.linalg.norm(a - b) <= 1e-4 * (1.0 + np.linalg.norm(a))


# -- loss and gradients -------------------------------------------------------------


def _batch(n=3, d=4, seed=0, weighting="unit"):
    rng = np.random.default_rng(seed)
    return sample_training_tuple(rng.standard_normal((n, d)), make_schedule("cos", "vp"), weighting, rng)


@pytest.mark.parametrize("weighting", ["sigma2", "g2", "unit"])
def test_every_parameter_gradient_matches_finite_differences(weighting):
    net, batch = tiny_net(), _batch(weighting=weighting)
    _, grads = dsm_loss_and_grads(net, batch)
    for name in net.names():
        base = net.params[name].copy()

        def loss_at(v, name=name):
            net.params[name] = v
            return dsm_loss_and_grads(net, batch)[0]

        fd = finite_diff_grad(loss_at, base)
        net.params[name] = base
        assert np.linalg.norm(fd - grads[name]) <= 1e-4 * np.linalg.norm(fd), name


def test_input_gradient_matches_finite_differences():
    net = tiny_net()
    x, s = np.random.default_rng(4).standard_normal(4), 0.37
    v = np.random.default_rng(5).standard_normal(4)
    out, cache = net.forward_cache(x, s)
    _, dx = net.backward(cache, v)
    fd = finite_diff_grad(lambda z: float(net(z, s) @ v), x)
    assert np.linalg.norm(fd - dx) <= 1e-4 * np.linalg.norm(fd)


def test_loss_zero_when_prediction_exact():
    net = tiny_net(randomize=False)
    b = _batch()
    b = TrainingTuple(b.t, b.x_t, b.sigma, np.zeros_like(b.eps), b.weight)
    loss, grads = dsm_loss_and_grads(net, b)
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_loss_plug_in():
    net = tiny_net(randomize=False)
    eps = np.array([[1.0, -2.0, 0.5, 3.0]])
    b = TrainingTuple(np.array([0.5]), np.zeros((1, 4)), np.array([0.5]), eps, np.array([1.0]))
    assert dsm_loss_and_grads(net, b)[0] == pytest.approx(float(np.sum(eps * eps)))


def test_sigma2_weighting_is_plain_mse():
    b = _batch(weighting="sigma2")
    assert np.array_equal(b.weight, np.ones(3))
    net = tiny_net()
    r = net(b.x_t, b.sigma) - b.eps
    assert dsm_loss_and_grads(net, b)[0] == pytest.approx(np.sum(r * r) / 3, rel=1e-14)


def test_empty_batch_rejected():
    b = TrainingTuple(np.zeros(0), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 4)), np.zeros(0))
    with pytest.raises(ValueError):
        dsm_loss_and_grads(tiny_net(), b)


# -- optimizer ---------------------------------------------------------------------


def test_adam_zero_gradients_and_ema_pull():
    net = tiny_net()
    before = {k: v.copy() for k, v in net.params.items()}
    adam, ema = Adam(net.params), EMA(net.params)
    ema.shadow = {k: v + 1.0 for k, v in ema.shadow.items()}
    adam.step(net.params, {k: np.zeros_like(v) for k, v in net.params.items()})
    ema.update(net.params)
    for k in before:
        assert np.array_equal(net.params[k], before[k])
        np.testing.assert_allclose(ema.shadow[k], before[k] + 0.999, rtol=1e-12)


def test_adam_first_step_is_signed_lr():
    net = tiny_net()
    before = {k: v.copy() for k, v in net.params.items()}
    rng = np.random.default_rng(0)
    grads = {k: rng.choice([-1.0, 1.0], size=v.shape) * rng.uniform(0.5, 2.0, v.shape) for k, v in net.params.items()}
    Adam(net.params).step(net.params, grads)
    for k in before:
        np.testing.assert_allclose(net.params[k] - before[k], -ADAM_LR * np.sign(grads[k]), rtol=1e-7)


def test_ema_rate_zero_tracks_params():
    net = tiny_net()
    adam, ema = Adam(net.params), EMA(net.params, rate=0.0)
    for seed in range(3):
        train_step(net, adam, ema, _batch(seed=seed))
    for k, v in net.params.items():
        assert np.array_equal(ema.shadow[k], v)


def test_ema_rate_validated():
    with pytest.raises(ValueError):
        EMA({}, rate=1.0)


def test_training_deterministic():
    sch = make_schedule("cos", "vp")
    data = np.random.default_rng(0).standard_normal((300, 2))
    kw = dict(epochs=10, batch_size=32, seed=4, max_steps=100, hidden=(16, 16), emb_hidden=16)
    a, b = train(data, sch, **kw), train(data, sch, **kw)
    assert a.steps == 100
    assert np.array_equal(a.net.to_flat(), b.net.to_flat())
    assert np.array_equal(a.ema_net.to_flat(), b.ema_net.to_flat())
    assert a.epoch_losses == b.epoch_losses


def test_zero_epochs_returns_initialization():
    sch = make_schedule("cos", "vp")
    res = train(np.zeros((4, 2)), sch, epochs=0, seed=1, hidden=(8,), emb_hidden=8)
    fresh = FiLMMLP(2, 2, hidden=(8,), emb_hidden=8, seed=res.net.seed)
    assert np.array_equal(res.net.to_flat(), fresh.to_flat())
    assert np.array_equal(res.ema_net.to_flat(), fresh.to_flat())
    assert res.epoch_losses == []


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(np.zeros((0, 2)), make_schedule("cos", "vp"))


# -- trained behaviour ---------------------------------------------------------------


def test_validation_loss_non_increasing(two_gauss_run):
    v = np.array(two_gauss_run["val_losses"])
    assert v.size == 10
    assert np.all(np.diff(v) <= 0.0)


def test_ema_net_matches_oracle(two_gauss_run):
    sch, gm, res = two_gauss_run["schedule"], two_gauss_run["gm"], two_gauss_run["result"]
    grid = noisy_grid(gm, sch.relation, np.linspace(0.1, 0.9, 9), 256, np.random.default_rng(7))
    assert mean_relative_l2(eps_fn_of(res.ema_net), OracleEps(gm, sch.relation), grid) <= 0.15


def test_single_point_dataset_ddim_collapses():
    # the degenerate data law has the analytic eps (x - m x*) / sigma
    sch = make_schedule("cos", "vp")
    x_star = np.array([0.6, -0.3, 0.9])

    def eps(x, sigma):
        return (x - sch.relation.m(sigma) * x_star) / sigma

    out = sample_ddim(eps, SamplerConfig(sch, 50, "ddim"), (20, 3), np.random.default_rng(0))
    assert np.max(np.linalg.norm(out - x_star, axis=1)) <= 0.1


def test_drumlet_envelope_statistic(drumlet_run):
    sch, res, data = drumlet_run["schedule"], drumlet_run["result"], drumlet_run["data"]
    reference = envelope_violations(data).mean()
    x = sample_sde(eps_fn_of(res.ema_net), SamplerConfig(sch, 400), (200, 64), np.random.default_rng(1))
    assert reference <= 0.10
    assert envelope_violations(x).mean() <= 0.10
