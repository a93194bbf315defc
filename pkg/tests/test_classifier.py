import numpy as np
import pytest

from scoreflow.classifier import BayesClassifier, TrainedClassifier, clf_train, cross_entropy_and_grads
from scoreflow.evalsuite import class_purity, finite_diff_grad
from scoreflow.oracle import GaussianMixture, OracleEps
from scoreflow.samplers import GuidanceSpec, SamplerConfig, guided_eps, sample_sde
from scoreflow.schedules import make_schedule


@pytest.fixture
def sch():
    return make_schedule("cos", "vp")


def test_bayes_symmetric_point(sch, two_class_gm):
    p = BayesClassifier(two_class_gm, sch.relation).posterior(np.zeros(2), 0.5)
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


def test_bayes_confident_at_class_mean(sch, two_class_gm):
    s = float(sch.coeffs(sch.t_min).sigma)
    p = BayesClassifier(two_class_gm, sch.relation).posterior(np.array([3.0, 3.0]), s)
    assert p[0] >= 0.99


def test_posteriors_sum_to_one(sch, two_class_gm):
    rng = np.random.default_rng(0)
    bayes = BayesClassifier(two_class_gm, sch.relation)
    mlp = TrainedClassifier.create(2, [0, 1], seed=1, hidden=(8,), emb_hidden=8)
    for k in mlp.net.params:
        mlp.net.params[k] = mlp.net.params[k] + rng.standard_normal(mlp.net.params[k].shape)
    x = rng.normal(0, 4, (200, 2))
    for s in (1e-4, 0.3, 0.99):
        assert np.max(np.abs(bayes.posterior(x, s).sum(1) - 1.0)) <= 1e-9
        assert np.max(np.abs(mlp.posterior(x, s).sum(1) - 1.0)) <= 1e-9


def test_zero_head_is_uniform():
    clf = TrainedClassifier.create(3, [0, 1, 2], hidden=(8, 8), emb_hidden=8)
    p = clf.posterior(np.random.default_rng(0).standard_normal((5, 3)), 0.2)
    np.testing.assert_allclose(p, np.full((5, 3), 1 / 3), rtol=1e-15)


def test_single_class_zero_gradient(sch):
    gm = GaussianMixture([0.4, 0.6], [[1.0], [-1.0]], [[1.0], [2.0]], [5, 5])
    g = BayesClassifier(gm, sch.relation).input_grad(np.array([[0.3], [2.0]]), 0.4, 5)
    assert np.array_equal(g, np.zeros((2, 1)))


def test_bayes_gradient_finite_differences(sch):
    gm = GaussianMixture([0.3, 0.3, 0.4], [[1.0, 0.0], [-1.0, 1.0], [0.0, -1.5]], [[0.5, 1.0], [1.0, 0.3], [0.8, 0.8]],
                         [0, 1, 1])
    clf = BayesClassifier(gm, sch.relation)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, s, y = rng.normal(0, 1.5, 2), rng.uniform(1e-3, sch.sigma_max), int(rng.integers(0, 2))
        k = list(clf.classes).index(y)
        fd = finite_diff_grad(lambda z: clf.log_posterior(z, s)[k], x)
        g = clf.input_grad(x, s, y)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_mlp_gradient_finite_differences():
    rng = np.random.default_rng(3)
    clf = TrainedClassifier.create(3, [2, 7, 9], seed=2, hidden=(8, 8), emb_hidden=8)
    for k in clf.net.params:
        clf.net.params[k] = clf.net.params[k] + 0.2 * rng.standard_normal(clf.net.params[k].shape)
    for _ in range(20):
        x, s, y = rng.standard_normal(3), rng.uniform(0, 1), int(rng.choice([2, 7, 9]))
        k = clf.index_of(y)
        fd = finite_diff_grad(lambda z: clf.log_posterior(z, s)[k], x)
        assert np.linalg.norm(clf.input_grad(x, s, y) - fd) <= 1e-4 * np.linalg.norm(fd)


def test_cross_entropy_parameter_gradients():
    rng = np.random.default_rng(1)
    clf = TrainedClassifier.create(2, [0, 1, 2], seed=0, hidden=(6,), emb_hidden=6)
    net = clf.net
    for k in net.params:
        net.params[k] = net.params[k] + 0.5 * rng.standard_normal(net.params[k].shape)
    x, s, tg = rng.standard_normal((4, 2)), rng.uniform(0, 1, 4), np.array([0, 2, 1, 2])
    _, grads = cross_entropy_and_grads(net, x, s, tg)
    for name in net.names():
        base = net.params[name].copy()

        def f(v, name=name):
            net.params[name] = v
            return cross_entropy_and_grads(net, x, s, tg)[0]

        fd = finite_diff_grad(f, base)
        net.params[name] = base
        assert np.linalg.norm(fd - grads[name]) <= 1e-4 * np.linalg.norm(fd), name


def test_unknown_label(sch, two_class_gm):
    with pytest.raises(KeyError):
        BayesClassifier(two_class_gm, sch.relation).input_grad(np.zeros(2), 0.3, 4)
    with pytest.raises(KeyError):
        TrainedClassifier.create(2, [0, 1], hidden=(4,), emb_hidden=4).input_grad(np.zeros(2), 0.3, 4)


def test_clf_train_needs_two_classes(sch):
    with pytest.raises(ValueError):
        clf_train(np.zeros((4, 2)), np.zeros(4, dtype=int), sch)


def test_clf_train_reproducible(sch, two_class_gm):
    x, y = two_class_gm.sample(200, np.random.default_rng(0))
    kw = dict(epochs=2, batch_size=32, seed=3, hidden=(8,), emb_hidden=8)
    a, b = clf_train(x, y, sch, **kw), clf_train(x, y, sch, **kw)
    assert np.array_equal(a.classifier.net.to_flat(), b.classifier.net.to_flat())


def _noisy_accuracy(clf, gm, sch, sigma, seed=5):
    x, y = gm.sample(2000, np.random.default_rng(seed))
    m = float(sch.relation.m(sigma))
    xn = m * x + sigma * np.random.default_rng(seed + 1).standard_normal(x.shape)
    return class_purity(clf.classes[clf.posterior(xn, sigma).argmax(1)], y)


def test_trained_accuracy_low_noise(separable_clf_run):
    run = separable_clf_run
    clf, sch = run["result"].classifier, run["schedule"]
    for s in (float(sch.coeffs(sch.t_min).sigma), 0.05, 0.1):
        assert _noisy_accuracy(clf, run["gm"], sch, s) >= 0.97


def test_trained_accuracy_terminal_noise_is_chance(separable_clf_run):
    run = separable_clf_run
    acc = _noisy_accuracy(run["result"].classifier, run["gm"], run["schedule"], run["schedule"].sigma_max)
    assert abs(acc - 0.5) <= 0.1


def test_trained_guidance_purity(separable_clf_run):
    run = separable_clf_run
    gm, sch, clf = run["gm"], run["schedule"], run["result"].classifier
    guided = guided_eps(OracleEps(gm, sch.relation), GuidanceSpec(clf.guidance_grad(), [0, 1], [1.0, 0.0]))
    x = sample_sde(guided, SamplerConfig(sch, 400), (1000, 2), np.random.default_rng(0))
    assert class_purity(gm.class_log_posterior(x).argmax(1), 0) >= 0.90
