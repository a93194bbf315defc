"""Verification statistics shared by the test-suite and the CLI metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .schedules import AffineLogSNRCurve, Relation, Schedule


@dataclass
class Check:
    """One named verification outcome; serializes to ``{name, value, tolerance, pass}``."""

    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["value"] = float(rec["value"])
        rec["pass"] = self.passed
        return rec


def empirical_moments(samples):
    """Per-coordinate mean and unbiased variance of an ``(n, d)`` array."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return x.mean(axis=0), x.var(axis=0, ddof=1)


def w2_gaussian(mean1, var1, mean2, var2) -> float:
    """2-Wasserstein distance between two diagonal Gaussians."""
    mean1, var1, mean2, var2 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (mean1, var1, mean2, var2))
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    return float(np.sqrt(np.sum((mean1 - mean2) ** 2) + np.sum((np.sqrt(var1) - np.sqrt(var2)) ** 2)))


def finite_diff_grad(fn, x, step: float = 1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        flat[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)


@dataclass
class AffineLogSNRReport:
    max_residual: float
    degenerate: bool
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return not self.degenerate and self.max_residual <= self.tolerance


def check_affine_logsnr(a: float, b: float, relation: Relation, points: int = 100) -> AffineLogSNRReport:
    """Verify g^2 = a sigma^2 on the schedule with sigma^2/m^2 = exp(a t + b).

    ``a = 0`` means a constant SNR, i.e. no diffusion at all; the report is
    then flagged degenerate.
    """
    sch = Schedule(AffineLogSNRCurve(a, b, relation), relation)
    c = sch.coeffs(np.linspace(0.0, 1.0, points))
    residual = float(np.max(np.abs(c.g**2 - a * c.sigma**2)))
    return AffineLogSNRReport(max_residual=residual, degenerate=bool(a == 0.0 or np.all(c.g == 0.0)))


def noisy_grid(gm, relation: Relation, sigmas, n: int, rng: np.random.Generator):
    """``[(sigma, x)]`` with ``x`` drawn from the noisy marginal at each level."""
    grid = []
    for s in sigmas:
        x, _ = gm.noisy(float(relation.m(s)), float(s)).sample(n, rng)
        grid.append((float(s), x))
    return grid


def mean_relative_l2(eps_a, eps_b, grid) -> float:
    """Average over noise levels of ||a - b|| / ||b|| on each level's points."""
    errs = []
    for s, x in grid:
        b = eps_b(x, s)
        errs.append(np.linalg.norm(eps_a(x, s) - b) / np.linalg.norm(b))
    return float(np.mean(errs))


def class_purity(predicted, target) -> float:
    return float(np.mean(np.asarray(predicted) == target))
