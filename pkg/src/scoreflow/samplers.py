"""Generation, encoding, editing and guidance driven by an eps-function.

An eps-function maps ``(x, sigma) -> eps`` where ``x`` has shape ``(n, d)``
(a batch) and ``sigma`` is a scalar noise level; it returns an array shaped
like ``x``.  Every sampler works on a batch at once.

The discrete samplers walk a decreasing time grid ``t_N > ... > t_0 = 0``
(uniform by default, ``t_i = i/N``) and evaluate all coefficients at the
current point ``t_{i+1}``.  With step ``h = t_{i+1} - t_i`` the updates are

    sde          x <- (1 - f h) x - (g^2 h / sigma) eps + g sqrt(h) z
    ode          x <- (1 - f h) x - (g^2 h / (2 sigma)) eps
    ddim         x <- (m_i/m_{i+1}) x + (sigma_i - sigma_{i+1} m_i/m_{i+1}) eps
    reparam_sde  x <- (m_i/m_{i+1}) x + 2 (sigma_i - sigma_{i+1} m_i/m_{i+1}) eps
                      + sqrt((sigma_{i+1} m_i/m_{i+1})^2 - sigma_i^2) z

with no noise on the final step.  RNG contract: one draw for the initial
latent, then one ``(n, d)`` Gaussian draw per noisy step in step order;
inpainting draws its mask noise right after the step noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .schedules import Schedule

EpsFn = Callable[[np.ndarray, float], np.ndarray]
METHODS = ("sde", "ode", "ddim", "reparam_sde", "rk45")

RADICAND_SLACK = 1e-12
MIN_STEP = 1e-12


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    schedule: Schedule
    steps: int = 400
    method: str = "sde"
    rtol: float = 1e-5
    atol: float = 1e-5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class GuidanceSpec:
    """Class (or class-mixture) guidance.

    ``grad_fn(x, sigma, y)`` returns grad_x log p(y | x) at noise level sigma.
    ``weights`` are the mixture weights over ``labels``; a one-hot vector is
    ordinary single-class guidance.
    """

    grad_fn: Callable[[np.ndarray, float, int], np.ndarray]
    labels: Sequence[int]
    weights: Sequence[float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.labels) or len(w) == 0:
            raise ValueError("labels and weights must be nonempty and of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"guidance weights must be nonnegative and sum to 1, got {self.weights}")


@dataclass(frozen=True)
class InpaintSpec:
    mask: np.ndarray  # 1 = keep fixed
    x_fixed: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        if np.shape(self.x_fixed)[-1] != mask.shape[-1] or mask.ndim != 1:
            raise ValueError(f"mask {mask.shape} and x_fixed {np.shape(self.x_fixed)} disagree")


def uniform_grid(steps: int, t_end: float = 1.0) -> np.ndarray:
    return t_end * np.arange(steps + 1) / steps


def initial_latent(schedule: Schedule, shape, rng) -> np.ndarray:
    """x_N ~ N(0, sigma(1)^2 I)."""
    return schedule.sigma_max * rng.standard_normal(shape)


def _proportional_steps(steps: int, t_level: float) -> int:
    return max(1, math.ceil(t_level * steps - 1e-9))


# ---------------------------------------------------------------------------
# discrete samplers


def denoise(eps_fn: EpsFn, schedule: Schedule, x, times, method: str, rng=None, inpaint: InpaintSpec | None = None):
    """Run ``method`` from ``x`` at ``times[-1]`` down to ``times[0]``."""
    x = np.array(x, dtype=float, copy=True)
    c = schedule.coeffs(np.asarray(times, dtype=float))
    f, g, sig, m = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (c.f, c.g, c.sigma, c.m))
    if inpaint is not None:
        keep = np.asarray(inpaint.mask).astype(bool)
        fixed = np.broadcast_to(np.asarray(inpaint.x_fixed, dtype=float), x.shape)[..., keep]
    for i in range(len(times) - 2, -1, -1):
        j = i + 1
        h = times[j] - times[i]
        eps = eps_fn(x, float(sig[j]))
        if method == "sde":
            x = (1.0 - f[j] * h) * x - (g[j] ** 2 * h / sig[j]) * eps
            if i > 0:
                x = x + g[j] * math.sqrt(h) * rng.standard_normal(x.shape)
        elif method == "ode":
            x = (1.0 - f[j] * h) * x - (g[j] ** 2 * h / (2.0 * sig[j])) * eps
        elif method in ("ddim", "reparam_sde"):
            ratio = m[i] / m[j]
            drift = sig[i] - sig[j] * ratio
            if method == "ddim":
                x = ratio * x + drift * eps
            else:
                x = ratio * x + 2.0 * drift * eps
                if i > 0:
                    x = x + reparam_noise_scale(sig[i], sig[j], ratio) * rng.standard_normal(x.shape)
        else:
            raise ValueError(f"method {method!r} is not a discrete sampler")
        if inpaint is not None:
            z = rng.standard_normal(fixed.shape)
            x[..., keep] = m[i] * fixed + sig[i] * z
    return x


def reparam_noise_scale(sigma_i, sigma_next, ratio) -> float:
    rad = (sigma_next * ratio) ** 2 - sigma_i**2
    if rad < 0.0:
        if rad < -RADICAND_SLACK:
            raise ValueError(f"negative noise variance {rad:.3e}: sigma/m is not increasing")
        rad = 0.0
    return math.sqrt(rad)


def _sample_discrete(eps_fn, cfg: SamplerConfig, shape, rng, method):
    x = initial_latent(cfg.schedule, shape, rng)
    return denoise(eps_fn, cfg.schedule, x, uniform_grid(cfg.steps), method, rng)


def sample_sde(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    return _sample_discrete(eps_fn, cfg, shape, rng, "sde")


def sample_ode(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    return _sample_discrete(eps_fn, cfg, shape, rng, "ode")


def sample_ddim(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    return _sample_discrete(eps_fn, cfg, shape, rng, "ddim")


def sample_reparam_sde(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    return _sample_discrete(eps_fn, cfg, shape, rng, "reparam_sde")


def sample_rk45(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    x = initial_latent(cfg.schedule, shape, rng)
    return decode(eps_fn, cfg.schedule, x, rtol=cfg.rtol, atol=cfg.atol)


def sample(eps_fn: EpsFn, cfg: SamplerConfig, shape, rng):
    """Dispatch on ``cfg.method``."""
    if cfg.method == "rk45":
        return sample_rk45(eps_fn, cfg, shape, rng)
    return _sample_discrete(eps_fn, cfg, shape, rng, cfg.method)


# ---------------------------------------------------------------------------
# adaptive probability-flow ODE

# Dormand-Prince 5(4)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_BHAT = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B - _DP_BHAT


@dataclass
class RK45Stats:
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0


def integrate_rk45(eps_fn: EpsFn, schedule: Schedule, x_start, t_start: float, t_end: float,
                   rtol: float = 1e-5, atol: float = 1e-5, stats: RK45Stats | None = None):
    """Integrate the probability-flow ODE between two times.

    Works on u = x/m, where the flow reads du = d(sigma/m) eps(x, sigma).  Forward
    in time encodes, backward decodes.  The whole batch shares one adaptive step
    with the max-norm error test ``max |err| / (atol + rtol |u|) <= 1``.
    """
    for t in (t_start, t_end):
        if not schedule.t_min - 1e-15 <= t <= 1.0:
            raise ValueError(f"time {t} outside [t_min={schedule.t_min}, 1]")
    x_start = np.asarray(x_start, dtype=float)
    if t_start == t_end:
        return x_start.copy()
    stats = stats if stats is not None else RK45Stats()

    def rhs(t, u):
        c = schedule.coeffs(t)
        stats.evaluations += 1
        dr = (c.dsigma_dt - c.f * c.sigma) / c.m
        return dr * eps_fn(c.m * u, c.sigma)

    direction = 1.0 if t_end > t_start else -1.0
    t = t_start
    u = x_start / schedule.coeffs(t_start).m
    h = (t_end - t_start) / 100.0
    k = [None] * 7
    k[0] = rhs(t, u)
    while direction * (t_end - t) > 0:
        if abs(h) < MIN_STEP:
            raise IntegrationError(f"step size underflow at t={t:.6g} (h={h:.3e})")
        if direction * (t + h - t_end) > 0:
            h = t_end - t
        for s in range(1, 7):
            du = sum(a * k[r] for r, a in enumerate(_DP_A[s]) if a != 0.0)
            t_s = min(max(t + _DP_C[s] * h, 0.0), 1.0)
            k[s] = rhs(t_s, u + h * du)
        u_new = u + h * sum(b * k[r] for r, b in enumerate(_DP_B) if b != 0.0)
        err = h * sum(e * k[r] for r, e in enumerate(_DP_E) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(u), np.abs(u_new))
        err_norm = float(np.max(np.abs(err) / scale))
        if err_norm <= 1.0:
            t = t_end if abs(t + h - t_end) < 1e-15 else t + h
            u = u_new
            k[0] = k[6]
            stats.accepted += 1
            factor = 10.0 if err_norm == 0.0 else min(10.0, max(0.2, 0.9 * err_norm ** -0.2))
        else:
            stats.rejected += 1
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h *= factor
    return schedule.coeffs(t_end).m * u


def encode(eps_fn: EpsFn, schedule: Schedule, x0, rtol: float = 1e-5, atol: float = 1e-5):
    """Map data (taken as x(t_min)) to its latent at t = 1."""
    return integrate_rk45(eps_fn, schedule, x0, schedule.t_min, 1.0, rtol, atol)


def decode(eps_fn: EpsFn, schedule: Schedule, latent, rtol: float = 1e-5, atol: float = 1e-5):
    """Map a latent at t = 1 back to data at t_min."""
    return integrate_rk45(eps_fn, schedule, latent, 1.0, schedule.t_min, rtol, atol)


# ---------------------------------------------------------------------------
# editing


def inpaint(eps_fn: EpsFn, cfg: SamplerConfig, spec: InpaintSpec, shape, rng):
    """Regenerate the unmasked coordinates, clamping the masked ones after every step.

    The clamp runs last in each step, so at t_0 = 0 (m = 1, sigma = 0) the
    masked coordinates equal ``x_fixed`` exactly.
    """
    if cfg.method not in ("sde", "ode"):
        raise ValueError("inpainting runs with the sde or ode sampler")
    if np.asarray(spec.mask).shape[-1] != shape[-1]:
        raise ValueError(f"mask dimension {np.shape(spec.mask)} does not match samples {shape}")
    x = initial_latent(cfg.schedule, shape, rng)
    return denoise(eps_fn, cfg.schedule, x, uniform_grid(cfg.steps), cfg.method, rng, inpaint=spec)


def slerp_latent(eps1, eps2, lam: float):
    """lam * eps1 + sqrt(1 - lam^2) * eps2; keeps unit variance for independent N(0, I) latents."""
    eps1 = np.asarray(eps1, dtype=float)
    eps2 = np.asarray(eps2, dtype=float)
    if eps1.shape != eps2.shape:
        raise ValueError("latents must have equal shapes")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * eps1 + math.sqrt(1.0 - lam * lam) * eps2


def interpolate_latent(eps_fn: EpsFn, schedule: Schedule, x1, x2, lam: float,
                       rtol: float = 1e-5, atol: float = 1e-5):
    """Encode both inputs, combine the latents spherically, decode."""
    z1 = encode(eps_fn, schedule, x1, rtol, atol)
    z2 = encode(eps_fn, schedule, x2, rtol, atol)
    return decode(eps_fn, schedule, slerp_latent(z1, z2, lam), rtol, atol)


def t_indexed_interpolate(eps_fn: EpsFn, cfg: SamplerConfig, x1, x2, lam: float, t_mid: float, rng,
                          shared_noise: bool = True, combine: str = "spherical", denoiser: str = "ode"):
    """Corrupt both inputs to ``t_mid``, combine them, then denoise back to t = 0.

    ``combine`` is ``"spherical"`` (lam a + sqrt(1 - lam^2) b) or ``"linear"``
    (lam a + (1 - lam) b).  The denoiser uses ceil(t_mid N) uniform steps.
    """
    schedule = cfg.schedule
    if not schedule.t_min < t_mid <= 1.0:
        raise ValueError("t_mid must lie in (t_min, 1]")
    if denoiser not in ("sde", "ode"):
        raise ValueError("denoiser must be 'sde' or 'ode'")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    c = schedule.coeffs(t_mid)
    z1 = rng.standard_normal(x1.shape)
    z2 = z1 if shared_noise else rng.standard_normal(x2.shape)
    a = c.m * x1 + c.sigma * z1
    b = c.m * x2 + c.sigma * z2
    if combine == "spherical":
        x = slerp_latent(a, b, lam)
    elif combine == "linear":
        x = lam * a + (1.0 - lam) * b
    else:
        raise ValueError(f"unknown combination rule {combine!r}")
    times = uniform_grid(_proportional_steps(cfg.steps, t_mid), t_mid)
    return denoise(eps_fn, schedule, x, times, denoiser, rng)


def variations(eps_fn: EpsFn, cfg: SamplerConfig, x0, t_level: float, rng):
    """Noise ``x0`` to ``t_level`` with the kernel, then run the SDE back to 0."""
    schedule = cfg.schedule
    if not schedule.t_min - 1e-15 <= t_level <= 1.0:
        raise ValueError("t_level must lie in [t_min, 1]")
    x0 = np.asarray(x0, dtype=float)
    c = schedule.coeffs(t_level)
    x = c.m * x0 + c.sigma * rng.standard_normal(x0.shape)
    times = uniform_grid(_proportional_steps(cfg.steps, t_level), t_level)
    return denoise(eps_fn, schedule, x, times, "sde", rng)


# ---------------------------------------------------------------------------
# guidance


def guided_eps(base: EpsFn, guidance: GuidanceSpec) -> EpsFn:
    """eps(x, sigma) - sigma * sum_i lambda_i grad_x log p(y_i | x).

    Zero-weight classes are skipped, so a one-hot mixture reproduces
    single-class guidance bit for bit.
    """
    terms = [(y, float(w)) for y, w in zip(guidance.labels, guidance.weights) if w != 0.0]

    def eps_fn(x, sigma):
        grad = None
        for y, w in terms:
            gy = guidance.grad_fn(x, sigma, y)
            gy = gy if w == 1.0 else w * gy
            grad = gy if grad is None else grad + gy
        out = base(x, sigma)
        return out if grad is None else out - sigma * grad

    return eps_fn
