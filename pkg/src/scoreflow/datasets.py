"""Toy datasets: labeled 2D mixtures and "drumlets" (decaying sinusoids)."""

from __future__ import annotations

import numpy as np
from scipy.signal import hilbert

from .oracle import GaussianMixture

DRUMLET_DIM = 64
DRUMLET_BANDS = {0: (1, 2), 1: (3, 4, 5), 2: (6, 7, 8)}  # low / mid / high frequency index


def drumlets(n: int, rng: np.random.Generator, dim: int = DRUMLET_DIM):
    """x_j = A exp(-tau j / dim) sin(2 pi k j / dim); returns ``(x, labels)``.

    The band label is drawn uniformly first and the frequency index within
    its band second, which keeps the classes balanced.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.integers(0, len(DRUMLET_BANDS), size=n)
    k = np.array([rng.choice(DRUMLET_BANDS[int(y)]) for y in labels])
    amp = rng.uniform(0.5, 1.0, size=n)
    tau = rng.uniform(4.0, 16.0, size=n)
    j = np.arange(dim) / dim
    x = amp[:, None] * np.exp(-tau[:, None] * j) * np.sin(2.0 * np.pi * k[:, None] * j)
    return x, labels


def envelope_violations(x, tol: float = 0.05) -> np.ndarray:
    """Per-sample fraction of coordinates where the Hilbert envelope rises by more than ``tol``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    env = np.abs(hilbert(x, axis=1))
    return np.mean(np.diff(env, axis=1) > tol, axis=1)


def two_gaussians(separation: float = 1.0, var: float = 0.25) -> GaussianMixture:
    """Symmetric two-class mixture with means +-(s, s)."""
    mu = [[separation, separation], [-separation, -separation]]
    return GaussianMixture([0.5, 0.5], mu, [[var, var], [var, var]], [0, 1])
