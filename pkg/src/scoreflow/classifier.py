"""Noise-conditioned classifiers p(y | x, sigma) with input gradients for guidance.

Two interchangeable implementations: the exact Bayes posterior of a
Gaussian mixture, and a FiLM-MLP with a softmax head trained by
cross-entropy on corrupted data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .kernel import sample_training_tuple
from .oracle import GaussianMixture
from .schedules import Relation, Schedule
from .scorenet import ADAM_LR, Adam, FiLMMLP, batch_order


class BayesClassifier:
    def __init__(self, gm: GaussianMixture, relation: Relation):
        self.gm = gm
        self.relation = relation
        self.classes = gm.classes

    def _noisy(self, sigma):
        return self.gm.noisy(float(self.relation.m(sigma)), float(sigma))

    def log_posterior(self, x, sigma):
        return self._noisy(sigma).class_log_posterior(x)

    def posterior(self, x, sigma):
        return np.exp(self.log_posterior(x, sigma))

    def input_grad(self, x, sigma, y):
        return self._noisy(sigma).class_log_posterior_grad(x, y)[1]

    def guidance_grad(self):
        return self.input_grad


class TrainedClassifier:
    """FiLM-MLP logits over ``classes``; the zero-initialized head starts uniform."""

    def __init__(self, net: FiLMMLP, classes):
        self.net = net
        self.classes = np.asarray(classes, dtype=int)
        if net.out_dim != self.classes.size:
            raise ValueError("network output size must equal the number of classes")

    @classmethod
    def create(cls, dim: int, classes, seed: int = 0, **net_kwargs) -> "TrainedClassifier":
        classes = np.asarray(classes, dtype=int)
        return cls(FiLMMLP(dim, classes.size, seed=seed, **net_kwargs), classes)

    def index_of(self, y) -> int:
        hits = np.flatnonzero(self.classes == y)
        if hits.size == 0:
            raise KeyError(f"unknown class label {y!r}")
        return int(hits[0])

    def log_posterior(self, x, sigma):
        return log_softmax(self.net(x, sigma), axis=-1)

    def posterior(self, x, sigma):
        return np.exp(self.log_posterior(x, sigma))

    def input_grad(self, x, sigma, y):
        """grad_x log p(y | x, sigma) through the softmax and the MLP."""
        k = self.index_of(y)
        logits, cache = self.net.forward_cache(x, sigma)
        dlogits = -np.exp(log_softmax(logits, axis=-1))
        dlogits[..., k] += 1.0
        return self.net.backward(cache, dlogits)[1]

    def guidance_grad(self):
        return self.input_grad


def cross_entropy_and_grads(net: FiLMMLP, x, sigma, targets):
    """Mean cross-entropy over the batch; ``targets`` are class indices."""
    logits, cache = net.forward_cache(x, sigma)
    logp = log_softmax(logits, axis=1)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(logp[rows, targets]))
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    grads, _ = net.backward(cache, dlogits / n)
    return loss, grads


@dataclass
class ClassifierTrainResult:
    classifier: TrainedClassifier
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def clf_train(data, labels, schedule: Schedule, epochs: int = 1, batch_size: int = 128, seed: int = 0, *,
              max_steps: int | None = None, lr: float = ADAM_LR, **net_kwargs) -> ClassifierTrainResult:
    """Cross-entropy on (perturb(x0, t, eps), sigma(t), y) with t ~ U[t_min, 1]."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (data.shape[0],):
        raise ValueError("need one label per sample")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    targets = np.searchsorted(classes, labels)
    net_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    clf = TrainedClassifier.create(data.shape[1], classes, seed=int(net_seq.generate_state(1)[0]), **net_kwargs)
    rng = np.random.default_rng(data_seq)
    adam = Adam(clf.net.params, lr=lr)
    result = ClassifierTrainResult(clf)
    for _ in range(epochs):
        if max_steps is not None and len(result.step_losses) >= max_steps:
            break
        losses = []
        for idx in batch_order(data.shape[0], batch_size, rng):
            if max_steps is not None and len(result.step_losses) >= max_steps:
                break
            tup = sample_training_tuple(data[idx], schedule, "sigma2", rng)
            loss, grads = cross_entropy_and_grads(clf.net, tup.x_t, tup.sigma, targets[idx])
            adam.step(clf.net.params, grads)
            losses.append(loss)
            result.step_losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
    return result
