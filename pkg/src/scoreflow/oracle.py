"""Labeled diagonal Gaussian mixtures with exact noisy marginals and scores.

The push-forward of N(mu, diag(v)) through the perturbation kernel is
N(m mu, diag(m^2 v + sigma^2)), so every quantity the samplers and the
classifier guidance need (score, eps = -sigma * score, class posteriors and
their input gradients) is available in closed form at any noise level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedules import Relation, Schedule

_LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape}")
    return x2, single


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    labels: np.ndarray  # (K,) int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.variances, dtype=float))
        lab = np.asarray(self.labels, dtype=int)
        if not (w.shape[0] == mu.shape[0] == var.shape[0] == lab.shape[0]):
            raise ValueError("weights, means, variances and labels disagree on the component count")
        if mu.shape != var.shape:
            raise ValueError("means and variances must have the same shape")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {w.sum()!r}")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for name, val in (("weights", w), ("means", mu), ("variances", var), ("labels", lab)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_spec(cls, components) -> "GaussianMixture":
        """Build from a list of ``{weight, mean, var, class}`` mappings."""
        return cls(
            weights=[c["weight"] for c in components],
            means=[c["mean"] for c in components],
            variances=[c["var"] for c in components],
            labels=[c.get("class", 0) for c in components],
        )

    def to_spec(self) -> list[dict]:
        return [
            {"weight": float(w), "mean": mu.tolist(), "var": v.tolist(), "class": int(y)}
            for w, mu, v, y in zip(self.weights, self.means, self.variances, self.labels)
        ]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def moments(self):
        """Per-coordinate mean and variance of the mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (self.variances + self.means**2)
        return mean, second - mean**2

    def noisy(self, m: float, sigma: float) -> "GaussianMixture":
        return GaussianMixture(self.weights, m * self.means, m * m * self.variances + sigma * sigma, self.labels)

    def restrict(self, label: int) -> "GaussianMixture":
        sel = self.labels == label
        if not np.any(sel):
            raise KeyError(f"unknown class label {label!r}")
        w = self.weights[sel]
        return GaussianMixture(w / w.sum(), self.means[sel], self.variances[sel], self.labels[sel])

    # -- densities -----------------------------------------------------------

    def _joint_log(self, x):
        # log w_k + log N(x; mu_k, v_k), shape (n, K)
        diff = x[:, None, :] - self.means[None]
        quad = np.sum(diff * diff / self.variances[None], axis=-1)
        logdet = np.sum(np.log(self.variances), axis=-1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None] - 0.5 * (quad + logdet[None] + self.dim * _LOG_2PI)

    def log_prob(self, x):
        xb, single = _as_batch(x, self.dim)
        lp = logsumexp(self._joint_log(xb), axis=1)
        return lp[0] if single else lp

    def _resp_and_scores(self, xb):
        joint = self._joint_log(xb)
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        comp_scores = -(xb[:, None, :] - self.means[None]) / self.variances[None]
        return joint, resp, comp_scores

    def score(self, x):
        """grad_x log p(x)."""
        xb, single = _as_batch(x, self.dim)
        _, resp, cs = self._resp_and_scores(xb)
        s = np.einsum("nk,nkd->nd", resp, cs)
        return s[0] if single else s

    def class_log_posterior(self, x):
        """log p(y | x) for every class in ``self.classes``, shape (n, C)."""
        xb, single = _as_batch(x, self.dim)
        joint = self._joint_log(xb)
        total = logsumexp(joint, axis=1)
        out = np.stack(
            [logsumexp(np.where(self.labels[None] == y, joint, -np.inf), axis=1) - total for y in self.classes],
            axis=1,
        )
        return out[0] if single else out

    def class_log_posterior_grad(self, x, label: int):
        """(log p(y | x), grad_x log p(y | x)) in closed form."""
        if label not in set(self.labels.tolist()):
            raise KeyError(f"unknown class label {label!r}")
        xb, single = _as_batch(x, self.dim)
        joint, resp, cs = self._resp_and_scores(xb)
        in_class = self.labels[None] == label
        class_joint = np.where(in_class, joint, -np.inf)
        class_lse = logsumexp(class_joint, axis=1, keepdims=True)
        resp_y = np.where(in_class, np.exp(class_joint - class_lse), 0.0)
        logp = class_lse[:, 0] - logsumexp(joint, axis=1)
        grad = np.einsum("nk,nkd->nd", resp_y - resp, cs)
        if single:
            return float(logp[0]), grad[0]
        return logp, grad

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` points; returns ``(x, labels)``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[k] + np.sqrt(self.variances[k]) * z
        return x, self.labels[k]


# -- schedule-indexed API ------------------------------------------------------


def marginal_at(gm: GaussianMixture, schedule: Schedule, t: float) -> GaussianMixture:
    c = schedule.coeffs(t)
    return gm.noisy(c.m, c.sigma)


def eps_oracle(gm: GaussianMixture, x, schedule: Schedule, t: float):
    """Exact eps(x, sigma(t)) = -sigma(t) grad log p_t(x)."""
    c = schedule.coeffs(t)
    if c.sigma == 0.0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return -c.sigma * gm.noisy(c.m, c.sigma).score(x)


def class_posterior_grad(gm: GaussianMixture, x, schedule: Schedule, t: float, y: int):
    c = schedule.coeffs(t)
    return gm.noisy(c.m, c.sigma).class_log_posterior_grad(x, y)


def sample_data(gm: GaussianMixture, n: int, rng: np.random.Generator):
    return gm.sample(n, rng)


class OracleEps:
    """Exact eps-function of a mixture, as an ``(x, sigma) -> eps`` callable.

    The signal scale is recovered from sigma through the m-sigma relation,
    so no time lookup is needed.
    """

    def __init__(self, gm: GaussianMixture, relation: Relation):
        self.gm = gm
        self.relation = relation

    @property
    def dim(self) -> int:
        return self.gm.dim

    def __call__(self, x, sigma):
        if sigma == 0.0:
            return np.zeros_like(np.asarray(x, dtype=float))
        m = float(self.relation.m(sigma))
        return -sigma * self.gm.noisy(m, sigma).score(x)
