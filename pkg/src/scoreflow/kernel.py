"""Gaussian perturbation kernel and denoising-score-matching training tuples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedules import Schedule

WEIGHTINGS = ("sigma2", "g2", "unit")


@dataclass(frozen=True)
class TrainingTuple:
    """A batch of corrupted samples.  Leading axis is the batch."""

    t: np.ndarray
    x_t: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.t)


def perturb(x0, t, eps, schedule: Schedule):
    """Return m(t) x0 + sigma(t) eps.

    ``t`` may be a scalar or one time per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs eps {eps.shape}")
    c = schedule.coeffs(t)
    m, sigma = np.asarray(c.m), np.asarray(c.sigma)
    if m.ndim == 1 and x0.ndim > 1:
        m = m[:, None]
        sigma = sigma[:, None]
    return m * x0 + sigma * eps


def loss_weight(schedule: Schedule, weighting: str, t):
    """sqrt(lambda(t)) / sigma(t) for the chosen weighting lambda."""
    c = schedule.coeffs(t)
    if weighting == "sigma2":
        return np.ones_like(np.asarray(c.sigma, dtype=float))
    if weighting == "g2":
        return np.asarray(c.g) / np.asarray(c.sigma)
    if weighting == "unit":
        return 1.0 / np.asarray(c.sigma)
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def sample_training_tuple(x0, schedule: Schedule, weighting: str, rng: np.random.Generator) -> TrainingTuple:
    """Draw t ~ U[t_min, 1] and eps ~ N(0, I) for each row of ``x0``.

    Draw order is fixed (t first, then eps) so a seed pins the whole tuple.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    t = rng.uniform(schedule.t_min, 1.0, size=n)
    eps = rng.standard_normal(x0.shape)
    c = schedule.coeffs(t)
    x_t = c.m[:, None] * x0 + c.sigma[:, None] * eps
    return TrainingTuple(t=t, x_t=x_t, sigma=np.asarray(c.sigma), eps=eps,
                         weight=loss_weight(schedule, weighting, t))
