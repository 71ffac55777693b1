"""Explicit self-similar barriers and their parameter searches.

Supersolution::

    W(t, x) = (T - t)^alpha * f(|x| (T - t)^beta),   f(y) = (a + b y^theta)^(-gamma)

Subsolution::

    w(t, x) = (T - t)^(1/(1-q)) * (a + b |x|^theta)^(-gamma)

Both residuals are available in closed form. Feasibility is certified by
dense scans, never by symbolic argument.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import mpmath
import numpy as np

from .exponents import Exponents

# default scan settings for the certificates
SCAN_POINTS = 10_000
SCAN_Y_RANGE = (1e-6, 1e6)
SUB_SCAN_T = 40
SUB_SCAN_R = 250
SUB_SCAN_R_RANGE = (1e-4, 1e6)


class BarrierKind(enum.Enum):
    SUPER = "super"
    SUB = "sub"


class SubFeasibilityError(RuntimeError):
    """Search budget exhausted before a certified subsolution was found."""

    def __init__(self, message, best: "BarrierParams", best_violation: float):
        super().__init__(message)
        self.best = best
        self.best_violation = best_violation


@dataclass(frozen=True)
class BarrierParams:
    kind: BarrierKind
    a: float
    b: float
    T: float
    exps: Exponents
    y0: Optional[float] = None
    # scan certificate: the extremal residual value found and the scan it covered
    certificate: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.T > 0):
            raise ValueError(f"barrier parameters must be positive: a={self.a}, b={self.b}, T={self.T}")
        if self.kind is BarrierKind.SUPER and self.y0 is not None and not self.y0 > 0:
            raise ValueError("y0 must be positive")

    def with_T(self, T: float) -> "BarrierParams":
        return replace(self, T=float(T))

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "a": self.a, "b": self.b, "T": self.T,
             "N": self.exps.N, "p": self.exps.p, "q": self.exps.q}
        if self.y0 is not None:
            d["y0"] = self.y0
        return d


@dataclass(frozen=True)
class ResidualDecomposition:
    h1: np.ndarray
    h2: np.ndarray
    y: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.h1 + self.h2


def _require(params: BarrierParams, kind: BarrierKind):
    if params.kind is not kind:
        raise ValueError(f"expected a {kind.value} barrier, got {params.kind.value}")


def _time_left(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t >= T):
        raise ValueError(f"barrier evaluated at t >= T = {T}")
    return T - t


# ---------------------------------------------------------------- supersolution

def super_profile(y, params: BarrierParams):
    _require(params, BarrierKind.SUPER)
    e = params.exps
    y = np.asarray(y, dtype=float)
    return (params.a + params.b * y ** e.theta) ** (-e.gamma)


def super_value(t, x, params: BarrierParams):
    """W(t, x) as a function of the radius |x| (scalar or array)."""
    _require(params, BarrierKind.SUPER)
    e = params.exps
    tau = _time_left(t, params.T)
    r = np.abs(np.asarray(x, dtype=float))
    return tau ** e.alpha * super_profile(r * tau ** e.beta, params)


def super_value_or_zero(t, r, params: BarrierParams):
    """W extended by zero for t >= T."""
    if t >= params.T:
        return np.zeros_like(np.asarray(r, dtype=float))
    return super_value(t, r, params)


def residual_h1h2(y, params: BarrierParams) -> ResidualDecomposition:
    _require(params, BarrierKind.SUPER)
    e = params.exps
    N, p, q = e.N, e.p, e.q
    a, b = params.a, params.b
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("residual decomposition requires y > 0")
    by = b * y ** e.theta
    s = a + by
    c = (e.gamma * b * e.theta)
    h1 = -e.alpha * a + c ** (p - 1) * (N - p * (e.gamma + 1) * by / s) * s ** ((e.gamma + 1) * (2 - p))
    h2 = (c ** q * y ** (q * (e.theta - 1)) * s ** ((1 - q) * (e.gamma + 1))
          + (e.beta * e.gamma * e.theta - e.alpha) * by)
    return ResidualDecomposition(h1=h1, h2=h2, y=y)


def residual_operator(t, r, params: BarrierParams):
    """Closed-form dt W - Delta_p W + |grad W|^q at radius r > 0."""
    _require(params, BarrierKind.SUPER)
    e = params.exps
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("residual_operator is only classical away from the origin (r > 0)")
    tau = _time_left(t, params.T)
    y = r * tau ** e.beta
    dec = residual_h1h2(y, params)
    s = params.a + params.b * y ** e.theta
    return tau ** (e.alpha - 1) * s ** (-e.gamma - 1) * dec.total


def scan_super(params: BarrierParams, points: int = SCAN_POINTS, y_range=SCAN_Y_RANGE) -> float:
    """Minimum of (H1 + H2) over a log-spaced y scan."""
    y = np.logspace(math.log10(y_range[0]), math.log10(y_range[1]), points)
    return float(np.min(residual_h1h2(y, params).total))


def super_conditions(e: Exponents, b: float):
    """Bounds on y0^((p-2q)/(1-q)) at fixed b: (lower, upper), and the b threshold."""
    p, q, N = e.p, e.q, e.N
    gt = e.gamma * e.theta
    lam = e.lam
    b_thresh = max(2 / ((1 - q) * gt ** q), 4 * lam * e.alpha / gt ** q) ** (1 / ((1 - q) * e.gamma))
    lower = 4 * e.big_l * (1 + lam) ** ((2 - p) * (e.gamma + 1)) / gt ** q * b ** ((q - p + 1) * e.gamma)
    upper = (N * gt ** (p - 1) * lam ** (e.gamma * (2 - p) - p + 1) / (2 * e.alpha)
             * b ** (e.gamma * (2 - p)))
    return lower, upper, b_thresh


def feasible_super_params(e: Exponents, margin: float = 2.0, T: float = 1.0,
                          scan_points: int = SCAN_POINTS, max_doublings: int = 4000) -> BarrierParams:
    """Pick (a, b, y0) satisfying every sufficient condition of the supersolution proof.

    lambda is fixed to 2p(gamma+1)/N, b starts at the smallest value allowed by
    the two lower bounds on b^((1-q)gamma) and is doubled until the admissible
    interval for y0^((p-2q)/(1-q)) has upper/lower >= margin. y0 sits at the
    geometric mean of that interval.
    """
    if not margin > 1:
        raise ValueError("margin must exceed 1")
    p, q = e.p, e.q
    _, _, b = super_conditions(e, 1.0)
    for _ in range(max_doublings):
        lower, upper, _ = super_conditions(e, b)
        if upper >= margin * lower:
            Y = math.sqrt(lower * upper)
            y0 = Y ** ((1 - q) / (p - 2 * q))
            a = e.lam * b * y0 ** e.theta
            params = BarrierParams(BarrierKind.SUPER, a=a, b=b, T=T, exps=e, y0=y0)
            smin = scan_super(params, scan_points)
            if smin >= 0:
                return replace(params, certificate={
                    "scan_min_h1h2": smin, "scan_points": scan_points,
                    "y_range": SCAN_Y_RANGE, "y0_interval": (lower, upper),
                })
        b *= 2.0
    raise RuntimeError("no feasible supersolution parameters found within the doubling budget")


def dominating_supersolution(C0: float, e: Exponents, base: BarrierParams,
                             max_power: int = 200, check_r_max: float = 1e4,
                             check_points: int = 2000) -> BarrierParams:
    """Smallest T = 2^k (k >= 0) for which W(0, .) >= C0 (1 + |x|)^(-q/(1-q)).

    For beta > 0 the two proof conditions a/(b T^(beta theta)) < 1 and
    T^(1/(1-q)) b^(-gamma) >= C0 are used. For beta <= 0 the first cannot be
    reached by enlarging T, so the weaker sufficient condition
    T^(1/(1-q)) b^(-gamma) min(1, kappa^(-gamma)) >= C0 with
    kappa = a/(b T^(beta theta)) is used instead.
    """
    _require(base, BarrierKind.SUPER)
    if not C0 > 0:
        raise ValueError("C0 must be positive")
    a, b = base.a, base.b
    bt = e.beta * e.theta
    for k in range(max_power + 1):
        T = 2.0 ** k
        kappa = a / (b * T ** bt)
        amp = T ** (1 / (1 - e.q)) * b ** (-e.gamma)
        if e.beta > 0:
            ok = kappa < 1 and amp >= C0
        else:
            ok = amp * min(1.0, kappa ** (-e.gamma)) >= C0
        if ok:
            break
    else:
        raise RuntimeError("no dominating horizon T found")
    out = base.with_T(T)
    r = np.concatenate([[0.0], np.logspace(-4, math.log10(check_r_max), check_points)])
    gap = super_value(0.0, r, out) - C0 * (1 + r) ** (-e.sigma_opt)
    if np.min(gap) < 0:
        raise RuntimeError(f"pointwise domination failed, min gap {np.min(gap):.3e}")
    return out


# ---------------------------------------------------------------- subsolution

def _sub_profile_derivs(r, params: BarrierParams):
    e = params.exps
    a, b = params.a, params.b
    br = b * r ** e.theta
    s = a + br
    g = s ** (-e.gamma)
    g1 = -e.gamma * b * e.theta * s ** (-e.gamma - 1) * r ** (e.theta - 1)
    g2 = (-e.gamma * b * e.theta * s ** (-e.gamma - 1) * r ** (e.theta - 2)
          * (e.theta - 1 - e.theta * (e.gamma + 1) * br / s))
    return g, g1, g2


def sub_profile_value(t, r, params: BarrierParams):
    _require(params, BarrierKind.SUB)
    e = params.exps
    tau = _time_left(t, params.T)
    r = np.asarray(r, dtype=float)
    return tau ** (1 / (1 - e.q)) * (params.a + params.b * r ** e.theta) ** (-e.gamma)


def sub_residual(t, r, params: BarrierParams):
    """Closed-form dt w - Delta_p w + |grad w|^q for r > 0."""
    _require(params, BarrierKind.SUB)
    e = params.exps
    N, p, q = e.N, e.p, e.q
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("sub_residual requires r > 0")
    tau = _time_left(t, params.T)
    g, g1, g2 = _sub_profile_derivs(r, params)
    ag = np.abs(g1)
    dt_w = -(1 / (1 - q)) * tau ** (q / (1 - q)) * g
    lap = tau ** ((p - 1) / (1 - q)) * ((p - 1) * ag ** (p - 2) * g2 + (N - 1) * ag ** (p - 2) * g1 / r)
    grad_q = tau ** (q / (1 - q)) * ag ** q
    return dt_w - lap + grad_q


def sub_scan_grid(T: float, nt: int = SUB_SCAN_T, nr: int = SUB_SCAN_R, r_range=SUB_SCAN_R_RANGE):
    """Log-spaced (t, r) scan: T - t in [T/100, 99T/100], r in r_range."""
    tau = np.logspace(math.log10(T / 100), math.log10(0.99 * T), nt)
    t = T - tau
    r = np.logspace(math.log10(r_range[0]), math.log10(r_range[1]), nr)
    return np.meshgrid(t, r, indexing="ij")


def scan_sub(params: BarrierParams, nt: int = SUB_SCAN_T, nr: int = SUB_SCAN_R) -> float:
    """Maximum of the subsolution residual over the certificate scan."""
    tt, rr = sub_scan_grid(params.T, nt, nr)
    return float(np.max(sub_residual(tt, rr, params)))


def feasible_sub_params(e: Exponents, T: float = 1.0, max_iter: int = 2000,
                        max_a_doublings: int = 80, nt: int = SUB_SCAN_T,
                        nr: int = SUB_SCAN_R) -> BarrierParams:
    """Search b downward and a upward (both from 1, factor 2) until the scan certifies w.

    ``max_iter`` bounds the total number of scans. On exhaustion a
    ``SubFeasibilityError`` carries the candidate with the smallest violation.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    best, best_v = None, math.inf
    it = 0
    b = 1.0
    while it < max_iter:
        a = 1.0
        for _ in range(max_a_doublings):
            params = BarrierParams(BarrierKind.SUB, a=a, b=b, T=T, exps=e)
            with np.errstate(over="ignore", under="ignore"):
                v = scan_sub(params, nt, nr)
            it += 1
            if v <= 0:
                return replace(params, certificate={
                    "scan_max_residual": v, "scan_shape": (nt, nr),
                    "t_range": (T / 100, 0.99 * T), "r_range": SUB_SCAN_R_RANGE,
                })
            if v < best_v:
                best, best_v = params, v
            if it >= max_iter:
                break
            a *= 2.0
        b *= 0.5
    raise SubFeasibilityError(
        f"no certified subsolution within {max_iter} scans; best violation {best_v:.3e}",
        best=best, best_violation=best_v)


def subsolution_below(e: Exponents, T: float, r, values, max_doublings: int = 400,
                      nt: int = SUB_SCAN_T, nr: int = SUB_SCAN_R) -> BarrierParams:
    """Certified subsolution with horizon T lying under ``values`` on the nodes ``r`` at t = 0.

    Starts from ``feasible_sub_params`` and doubles ``a``, rescanning each candidate.
    """
    r = np.asarray(r, dtype=float)
    values = np.asarray(values, dtype=float)
    params = feasible_sub_params(e, T=T, nt=nt, nr=nr)
    for _ in range(max_doublings):
        with np.errstate(over="ignore", under="ignore"):
            below = bool(np.all(sub_profile_value(0.0, r, params) <= values))
            v = scan_sub(params, nt, nr) if below else math.inf
        if below and v <= 0:
            cert = dict(params.certificate, scan_max_residual=v)
            return replace(params, certificate=cert)
        params = replace(params, a=2.0 * params.a)
    raise SubFeasibilityError(f"no certified subsolution under the data after {max_doublings} doublings",
                              best=params, best_violation=math.inf)


# ---------------------------------------------------------------- FD oracle

def fd_operator(value: Callable, t: float, r: float, N: int, p: float, q: float, h: float) -> float:
    """Centered finite-difference evaluation of dt v - Delta_p v + |grad v|^q for a radial v(t, r).

    The p-Laplacian is taken in flux form r^(1-N) d/dr(r^(N-1) |v_r|^(p-2) v_r)
    with the flux sampled at r +- h/2. Second order in h.
    """
    dt_v = (value(t + h, r) - value(t - h, r)) / (2 * h)

    def flux(rr):
        g = (value(t, rr + h / 2) - value(t, rr - h / 2)) / h
        return rr ** (N - 1) * abs(g) ** (p - 2) * g

    lap = (flux(r + h / 2) - flux(r - h / 2)) / h / r ** (N - 1)
    grad = (value(t, r + h) - value(t, r - h)) / (2 * h)
    return dt_v - lap + abs(grad) ** q


def richardson_ratio(exact: float, value: Callable, t: float, r: float, N: int, p: float,
                     q: float, h: float) -> float:
    """Error ratio |FD(h) - exact| / |FD(h/2) - exact|; ~4 for a second-order match."""
    e1 = abs(fd_operator(value, t, r, N, p, q, h) - exact)
    e2 = abs(fd_operator(value, t, r, N, p, q, h / 2) - exact)
    return e1 / e2


def super_value_mp(params: BarrierParams, dps: int = 60) -> Callable:
    """W(t, r) evaluated in ``dps``-digit arithmetic.

    The residual of a feasible barrier is a small difference of large terms,
    so finite differences of W in double precision drown in rounding.
    """
    _require(params, BarrierKind.SUPER)
    e = params.exps
    ctx = mpmath.mp.clone()
    ctx.dps = dps
    a, b, T = ctx.mpf(params.a), ctx.mpf(params.b), ctx.mpf(params.T)
    alpha, beta, theta, gamma = (ctx.mpf(x) for x in (e.alpha, e.beta, e.theta, e.gamma))

    def value(t, r):
        s = T - t
        y = abs(r) * s ** beta
        return s ** alpha * (a + b * y ** theta) ** (-gamma)

    value.ctx = ctx
    return value


def super_richardson(params: BarrierParams, t: float, r: float, h_rel: float = 1e-2,
                     dps: int = 60) -> float:
    """Richardson ratio of the high-precision FD operator against ``residual_operator``.

    The step is ``h_rel * min(r, T - t)``.
    """
    e = params.exps
    value = super_value_mp(params, dps)
    mpf = value.ctx.mpf
    exact = float(residual_operator(t, r, params))
    h = mpf(h_rel * min(r, params.T - t))
    ratio = richardson_ratio(exact, value, mpf(t), mpf(r), e.N, mpf(e.p), mpf(e.q), h)
    return float(ratio)
