"""Noise schedules: sigma(t) curves, m-sigma relations and SDE coefficients.

A schedule is fully determined by a noise-level curve ``sigma(t)`` on ``[0, 1]``
and a relation ``m = (1 - sigma**gamma)**eta`` (or ``m = 1`` for the variance
exploding family).  Every other quantity of the forward SDE
``dx = f(t) x dt + g(t) dw`` follows in closed form:

    beta = 2 eta gamma sigma' sigma**(gamma-1) / (1 - sigma**gamma),  f = -beta/2
    g    = sqrt(2 sigma' sigma (gamma eta sigma**gamma / (1 - sigma**gamma) + 1))

All functions accept scalars or numpy arrays of times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 1e-4
BISECT_TOL = 1e-10


class ScheduleError(ValueError):
    """Raised for out-of-domain times or a misconfigured schedule."""


# ---------------------------------------------------------------------------
# sigma curves


@dataclass(frozen=True)
class CosCurve:
    """sigma(t) = (1 - cos((1 - s) pi t)) / 2."""

    s: float = 0.006
    kind: str = field(default="cos", init=False)

    def sigma(self, t):
        return 0.5 * (1.0 - np.cos((1.0 - self.s) * np.pi * t))

    def dsigma(self, t):
        w = (1.0 - self.s) * np.pi
        return 0.5 * w * np.sin(w * t)

    def dsigma2(self, t):
        # d(sigma^2)/dt; finite everywhere
        return 2.0 * self.sigma(t) * self.dsigma(t)


@dataclass(frozen=True)
class ExpCurve:
    """sigma(t) = sqrt(1 - exp(-a t - b t^2)), the linear-beta VP curve."""

    a: float = 0.1
    b: float = 9.95
    kind: str = field(default="exp", init=False)

    def _decay(self, t):
        return np.exp(-self.a * t - self.b * t * t)

    def sigma(self, t):
        return np.sqrt(-np.expm1(-self.a * t - self.b * t * t))

    def dsigma2(self, t):
        return (self.a + 2.0 * self.b * t) * self._decay(t)

    def dsigma(self, t):
        s = self.sigma(t)
        with np.errstate(divide="ignore"):
            return np.where(s > 0, self.dsigma2(t) / (2.0 * np.where(s > 0, s, 1.0)), np.inf)


@dataclass(frozen=True)
class AffineLogSNRCurve:
    """The curve for which sigma^2/m^2 = exp(a t + b) under a given relation.

    sigma(0) > 0 here, so schedules built on it have t_min = 0.
    """

    a: float
    b: float
    relation: "Relation"
    kind: str = field(default="logsnr", init=False)

    def sigma(self, t):
        r = np.exp(0.5 * (self.a * np.asarray(t, dtype=float) + self.b))
        rel = self.relation
        if rel.is_ve:
            return r
        if rel.name == "vp":
            return np.sqrt(r * r / (1.0 + r * r))
        # sigma/m(sigma) is increasing on (0, 1): bisect elementwise
        lo = np.zeros_like(r)
        hi = np.ones_like(r)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = mid / rel.m(mid) < r
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def dsigma(self, t):
        s = self.sigma(t)
        rel = self.relation
        if rel.is_ve:
            return 0.5 * self.a * s
        sg = np.power(s, rel.gamma)
        return 0.5 * self.a * s / (1.0 + rel.gamma * rel.eta * sg / (1.0 - sg))

    def dsigma2(self, t):
        return 2.0 * self.sigma(t) * self.dsigma(t)


# ---------------------------------------------------------------------------
# m-sigma relations


_VARIANTS = {
    "vp": (2.0, 0.5),
    "subvp": (1.0, 0.5),
    "subvp11": (1.0, 1.0),
    "subvp12": (1.0, 2.0),
}


@dataclass(frozen=True)
class Relation:
    """Link between the signal scale m and the noise level sigma.

    ``name`` is one of ``vp``, ``subvp``, ``subvp11``, ``subvp12``, ``ve`` or
    ``custom``.  For everything except ``ve`` the relation is
    ``m = (1 - sigma**gamma)**eta``.
    """

    name: str
    gamma: float | None = None
    eta: float | None = None

    def __post_init__(self):
        if self.name == "ve":
            return
        if self.name in _VARIANTS:
            gamma, eta = _VARIANTS[self.name]
            if self.gamma not in (None, gamma) or self.eta not in (None, eta):
                raise ScheduleError(f"relation {self.name!r} fixes gamma={gamma}, eta={eta}")
            object.__setattr__(self, "gamma", gamma)
            object.__setattr__(self, "eta", eta)
        elif self.name == "custom":
            if self.gamma is None or self.eta is None or self.gamma <= 0 or self.eta <= 0:
                raise ScheduleError("custom relation needs gamma > 0 and eta > 0")
            object.__setattr__(self, "gamma", float(self.gamma))
            object.__setattr__(self, "eta", float(self.eta))
        else:
            raise ScheduleError(f"unknown relation {self.name!r}")

    @property
    def is_ve(self) -> bool:
        return self.name == "ve"

    def m(self, sigma):
        """Signal scale as a function of the noise level."""
        if self.is_ve:
            return np.ones_like(np.asarray(sigma, dtype=float))
        return (1.0 - np.power(sigma, self.gamma)) ** self.eta


VP = Relation("vp")
SUBVP = Relation("subvp")
SUBVP11 = Relation("subvp11")
SUBVP12 = Relation("subvp12")
VE = Relation("ve")
RELATIONS = {r.name: r for r in (VP, SUBVP, SUBVP11, SUBVP12, VE)}


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class Coeffs:
    t: float | np.ndarray
    sigma: float | np.ndarray
    dsigma_dt: float | np.ndarray
    m: float | np.ndarray
    f: float | np.ndarray
    beta: float | np.ndarray
    g: float | np.ndarray
    snr: float | np.ndarray


def _scalarize(v):
    return float(v) if np.ndim(v) == 0 else v


def coeffs_from_sigma(relation: Relation, sigma, dsigma, dsigma2, t=None) -> Coeffs:
    """Evaluate all SDE coefficients from sigma, sigma' and d(sigma^2)/dt.

    ``dsigma2`` is passed separately so curves whose sigma' is singular at
    t = 0 (``ExpCurve``) still give finite ``g`` there.
    """
    sigma = np.asarray(sigma, dtype=float)
    dsigma = np.asarray(dsigma, dtype=float)
    dsigma2 = np.asarray(dsigma2, dtype=float)
    if relation.is_ve:
        m = np.ones_like(sigma)
        beta = np.zeros_like(sigma)
        g = np.sqrt(dsigma2)
    else:
        gamma, eta = relation.gamma, relation.eta
        sg = np.power(sigma, gamma)
        if np.any(sg >= 1.0):
            raise ScheduleError("sigma**gamma >= 1: m vanishes and beta is singular")
        m = (1.0 - sg) ** eta
        # beta = eta*gamma * sigma^(gamma-2) * d(sigma^2)/dt / (1 - sigma^gamma), rewritten to
        # avoid 0*inf at sigma = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            if gamma == 1.0:
                num = 2.0 * dsigma
            elif gamma == 2.0:
                num = dsigma2
            else:
                num = np.where(sigma > 0, 2.0 * dsigma * np.power(sigma, gamma - 1.0), 0.0)
        beta = eta * gamma * num / (1.0 - sg)
        g = np.sqrt(dsigma2 * (gamma * eta * sg / (1.0 - sg) + 1.0))
    with np.errstate(divide="ignore"):
        snr = np.where(sigma > 0, m * m / np.where(sigma > 0, sigma * sigma, 1.0), np.inf)
    return Coeffs(
        t=_scalarize(t) if t is not None else None,
        sigma=_scalarize(sigma),
        dsigma_dt=_scalarize(dsigma),
        m=_scalarize(m),
        f=_scalarize(-0.5 * beta),
        beta=_scalarize(beta),
        g=_scalarize(g),
        snr=_scalarize(snr),
    )


@dataclass(frozen=True)
class Schedule:
    """A sigma curve together with an m-sigma relation, on the horizon T = 1.

    ``t_min`` is derived at construction so that ``sigma(t_min) = 1e-4``.
    """

    curve: CosCurve | ExpCurve
    relation: Relation = VP
    t_min: float = field(init=False)
    T: float = field(default=1.0, init=False)

    def __post_init__(self):
        s1 = float(self.curve.sigma(1.0))
        if not self.relation.is_ve and s1 ** self.relation.gamma >= 1.0:
            raise ScheduleError("sigma(1)**gamma must stay below 1")
        if float(self.curve.sigma(0.0)) >= SIGMA_FLOOR:
            t_min = 0.0
        else:
            t_min = _bisect_sigma(self.curve, SIGMA_FLOOR)
        object.__setattr__(self, "t_min", t_min)

    @property
    def sigma_max(self) -> float:
        return float(self.curve.sigma(self.T))

    def sigma(self, t):
        return self.curve.sigma(t)

    def m(self, t):
        return self.relation.m(self.curve.sigma(t))

    def coeffs(self, t) -> Coeffs:
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
            raise ScheduleError(f"time outside [0, 1]: {t}")
        c = self.curve
        return coeffs_from_sigma(self.relation, c.sigma(t_arr), c.dsigma(t_arr), c.dsigma2(t_arr), t=t_arr)

    def solve_time_for_sigma(self, target: float) -> float:
        if target < 0.0 or target >= self.sigma_max:
            raise ScheduleError(f"target sigma {target} outside [0, sigma(1)={self.sigma_max})")
        return _bisect_sigma(self.curve, target)


def _bisect_sigma(curve, target: float) -> float:
    if target == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = float(curve.sigma(mid))
        if abs(val - target) <= BISECT_TOL * 1e-3 or hi - lo < 1e-16:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_schedule(curve: str = "cos", relation: str = "vp", *, s: float = 0.006,
                  gamma: float | None = None, eta: float | None = None) -> Schedule:
    """Build a schedule from the config vocabulary."""
    if curve == "cos":
        sc = CosCurve(s)
    elif curve == "exp":
        sc = ExpCurve()
    else:
        raise ScheduleError(f"unknown curve {curve!r}")
    return Schedule(sc, Relation(relation, gamma, eta))


# ---------------------------------------------------------------------------
# alternate algebraic forms, used as cross-checks


def beta_integral(schedule: Schedule, t):
    """Closed form of int_0^t beta(s) ds, from m(t) = exp(-1/2 int beta)."""
    return -2.0 * np.log(schedule.m(t))


def g_from_beta_integral(schedule: Schedule, t, beta_int=None):
    """g(t) written through beta and the integral of beta.

    ``beta_int`` may be supplied (e.g. from quadrature) instead of the closed form.
    """
    rel = schedule.relation
    if rel.is_ve:
        raise ScheduleError("the beta form of g is undefined for the VE family")
    c = schedule.coeffs(t)
    B = beta_integral(schedule, t) if beta_int is None else np.asarray(beta_int, dtype=float)
    gamma, eta = rel.gamma, rel.eta
    e = np.exp(-B / (2.0 * eta))
    one_minus = -np.expm1(-B / (2.0 * eta))
    inner = one_minus ** (2.0 / gamma) + e * one_minus ** (2.0 / gamma - 1.0) / (gamma * eta)
    return np.sqrt(c.beta * inner)


def g_table_form(schedule: Schedule, t):
    """g(t) in the per-family tabulated form (VP, sub-VP, sub-VP 1-1, sub-VP 1-2, VE)."""
    rel = schedule.relation
    c = schedule.coeffs(t)
    if rel.is_ve:
        return np.sqrt(schedule.curve.dsigma2(np.asarray(t, dtype=float)))
    B = beta_integral(schedule, t)
    if rel.name == "vp":
        return np.sqrt(c.beta)
    if rel.name == "subvp":
        return np.sqrt(c.beta * -np.expm1(-2.0 * B))
    if rel.name == "subvp11":
        return np.sqrt(c.beta * -np.expm1(-0.5 * B))
    if rel.name == "subvp12":
        # (1 - sigma) = exp(-B/4) for m = (1 - sigma)^2
        return np.sqrt(c.beta * (1.0 - 1.5 * np.exp(-0.25 * B) + 0.5 * np.exp(-0.5 * B)))
    raise ScheduleError(f"no tabulated form for relation {rel.name!r}")


# ---------------------------------------------------------------------------
# validation


CSV_COLUMNS = ("t", "sigma", "m", "f", "beta", "g", "snr", "residual_a", "residual_b", "residual_c")


@dataclass
class ValidationReport:
    rows: np.ndarray  # one row per grid point, columns as CSV_COLUMNS
    max_residual_a: float
    max_residual_b: float
    max_residual_c: float
    max_residual_d: float  # algebraic: beta-integral form of g vs sigma/sigma' form
    tolerance: float = 1e-3
    algebraic_tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return (
            max(self.max_residual_a, self.max_residual_b, self.max_residual_c) < self.tolerance
            and self.max_residual_d < self.algebraic_tolerance
        )


def _scaled_residual(lhs, rhs):
    return np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))


def validate(schedule: Schedule, grid_size: int = 256, step: float = 1e-5) -> ValidationReport:
    """Check the m/sigma ODE system and the g/m identity by central differences.

    Residuals on a uniform grid over ``[t_min, 1 - 1/grid_size]``:

    a. dm/dt against f m
    b. d(sigma^2)/dt against 2 f sigma^2 + g^2
    c. sqrt(d/dt (sigma^2/m^2)) against g/m

Each residual is ``|lhs - rhs| / max(1, |rhs|)``: absolute for O(1)
quantities, relative where g/m grows like 1/m near t = 1.

    The difference step shrinks to ``1e-3 t`` near t = 0 so curves with a
    sqrt(t) onset are not differenced across the origin.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be >= 16")
    t = np.linspace(schedule.t_min, 1.0 - 1.0 / grid_size, grid_size)
    h = np.minimum(step, 1e-3 * t)
    h = np.where(h > 0, h, step)
    t_lo = np.maximum(t - h, 0.0)
    t_hi = t + h
    width = t_hi - t_lo
    c = schedule.coeffs(t)

    def ddt(fn):
        return (fn(t_hi) - fn(t_lo)) / width

    dm = ddt(schedule.m)
    ds2 = ddt(lambda u: schedule.sigma(u) ** 2)
    dr2 = ddt(lambda u: (schedule.sigma(u) / schedule.m(u)) ** 2)
    res_a = _scaled_residual(dm, c.f * c.m)
    res_b = _scaled_residual(ds2, 2.0 * c.f * c.sigma**2 + c.g**2)
    res_c = _scaled_residual(np.sqrt(np.maximum(dr2, 0.0)), c.g / c.m)
    if schedule.relation.is_ve:
        res_d = 0.0
    else:
        res_d = float(np.max(np.abs(g_from_beta_integral(schedule, t) - c.g)))
    rows = np.column_stack([t, c.sigma, c.m, c.f, c.beta, c.g, c.snr, res_a, res_b, res_c])
    return ValidationReport(
        rows=rows,
        max_residual_a=float(res_a.max()),
        max_residual_b=float(res_b.max()),
        max_residual_c=float(res_c.max()),
        max_residual_d=res_d,
    )

