"""Post-processing of solver runs: norms, extinction-rate fits, and the
empirical constants behind the lower/upper rate bounds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares, minimize_scalar
from scipy.special import gamma as gamma_fn


class FitError(ValueError):
    """Not enough resolved decades of (t_e - t) to fit a rate."""


@dataclass
class NormSeries:
    t: np.ndarray
    linf: np.ndarray
    l1: np.ndarray
    lip: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.linf = np.asarray(self.linf, dtype=float)
        self.l1 = np.asarray(self.l1, dtype=float)
        self.lip = np.asarray(self.lip, dtype=float)
        if not (len(self.t) == len(self.linf) == len(self.l1) == len(self.lip)):
            raise ValueError("norm series columns differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("series times must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def window(self, t_lo: float, t_hi: float) -> "NormSeries":
        m = (self.t > t_lo) & (self.t < t_hi)
        return NormSeries(self.t[m], self.linf[m], self.l1[m], self.lip[m])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "linf", "l1", "lip"])
            for row in zip(self.t, self.linf, self.l1, self.lip):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "NormSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


@dataclass
class RateFit:
    t_e: float
    exponent: float
    r2: float
    window: tuple
    target: float

    @property
    def rel_error(self) -> float:
        return abs(self.exponent / self.target - 1)

    @property
    def decades(self) -> float:
        """Decades of (t_e - t) covered by the fit window."""
        return math.log10((self.t_e - self.window[0]) / (self.t_e - self.window[1]))

    def to_dict(self) -> dict:
        return {"t_e": self.t_e, "exponent": self.exponent, "r2": self.r2,
                "window": list(self.window), "target": self.target, "decades": self.decades}


def norms(u) -> tuple[float, float, float]:
    """(sup norm, L1 norm with radial measure, max face difference quotient)."""
    grid = u.grid
    v = u.values
    r = grid.r
    area = 2 * math.pi ** (grid.N / 2) / gamma_fn(grid.N / 2)
    linf = float(np.max(v))
    l1 = float(area * np.trapezoid(r ** (grid.N - 1) * v, r))
    lip = float(np.max(np.abs(np.diff(v)))) / grid.dr
    return linf, l1, lip


# ---------------------------------------------------------------- rate fitting

def _linfit(x, y):
    A = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return coef, float(res @ res)


def fit_rate(series: NormSeries, which: str, target: float, extinct_tol: float,
             decades: float = 2.0, min_decades: float = 2.0, t_e_guess: Optional[float] = None) -> RateFit:
    """Joint least-squares fit of log(norm) = c + k log(t_e - t) for (c, k, t_e).

    The window keeps points with norm >= 10 * extinct_tol whose distance to
    t_e spans the last ``decades`` decades. Raises ``FitError`` when fewer
    than ``min_decades`` are resolved.
    """
    which = which.lower()
    if which not in ("linf", "l1"):
        raise ValueError("which must be 'linf' or 'l1'")
    y_all = series.linf if which == "linf" else series.l1
    t_all = series.t
    keep = y_all >= 10 * extinct_tol
    if keep.sum() < 5:
        raise FitError(f"only {keep.sum()} points above the noise floor")
    idx = np.nonzero(keep)[0]
    last = idx[-1]
    # restrict to the final monotone stretch above the floor
    t_res, y_res = t_all[: last + 1], y_all[: last + 1]
    t_last = t_res[-1]
    if t_e_guess is None:
        # extinction just after the last resolved point; refined below
        t_e_guess = t_all[-1] if t_all[-1] > t_last else t_last + (t_last - t_res[-2])

    def select(t_e):
        # last `decades` decades of t_e - t, plus the first point just outside
        d = t_e - t_res
        m = (d <= d[-1] * 10 ** decades) & (d > 0)
        first = int(np.argmax(m))
        if first > 0:
            m[first - 1] = True
        return m

    def sse(t_e):
        m = select(t_e)
        if m.sum() < 3:
            return math.inf
        _, s = _linfit(np.log(t_e - t_res[m]), np.log(y_res[m]))
        return s / m.sum()

    dt_last = t_last - t_res[-2]
    lo = t_last + 1e-6 * dt_last
    hi = t_last + 50 * max(dt_last, t_e_guess - t_last)
    best = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-14 * max(1, hi)})
    t_e = float(best.x)
    for _ in range(5):
        m = select(t_e)
        x_t, x_y = t_res[m], np.log(y_res[m])
        coef, _ = _linfit(np.log(t_e - x_t), x_y)

        def resid(theta, x_t=x_t, x_y=x_y):
            c, k, te = theta
            return c + k * np.log(te - x_t) - x_y

        sol = least_squares(resid, x0=[coef[0], coef[1], t_e],
                            bounds=([-np.inf, -np.inf, lo], [np.inf, np.inf, np.inf]),
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, method="trf")
        new_te = float(sol.x[2])
        converged = abs(new_te - t_e) <= 1e-13 * max(1.0, abs(t_e))
        t_e = new_te
        if converged:
            break
    m = select(t_e)
    x = np.log(t_e - t_res[m])
    y = np.log(y_res[m])
    coef, s = _linfit(x, y)
    span = math.log10((t_e - t_res[m][0]) / (t_e - t_res[m][-1]))
    if span < min_decades - 1e-9:
        raise FitError(f"resolved span of (t_e - t) is {span:.2f} decades, need {min_decades}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - s / ss_tot if ss_tot > 0 else 1.0
    return RateFit(t_e=t_e, exponent=float(coef[1]), r2=float(min(max(r2, 0.0), 1.0)),
                   window=(float(t_res[m][0]), float(t_res[m][-1])), target=target)


# ---------------------------------------------------------------- iteration lemma

def iteration_bound_coefficient(delta: float, m: float) -> float:
    """(delta^(1-m) / 2)^(1/(1-m)^2)."""
    if not 0 < m < 1:
        raise ValueError(f"m must lie in (0, 1), got {m}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    # same value, written so that powers of two stay exact in floating point
    return delta ** (1 / (1 - m)) * 2.0 ** (-1 / (1 - m) ** 2)


def verify_iteration_lemma(t, h, T: float, delta: float, m: float, rtol: float = 1e-12):
    """Check delta (t - s) h(t)^m <= h(s) on all sampled pairs s < t, and the power-law floor.

    ``t`` and ``h`` sample h on [0, T). Returns (hypothesis_ok, conclusion_ok).
    """
    t = np.asarray(t, dtype=float)
    h = np.asarray(h, dtype=float)
    order = np.argsort(t)
    t, h = t[order], h[order]
    lhs = delta * (t[None, :] - t[:, None]) * h[None, :] ** m  # rows s, cols t
    upper = np.triu(np.ones_like(lhs, dtype=bool), k=1)
    slack = h[:, None] * (1 + rtol) - lhs
    hypothesis_ok = bool(np.all(slack[upper] >= 0))
    coef = iteration_bound_coefficient(delta, m)
    floor = coef * np.clip(T - t, 0, None) ** (1 / (1 - m))
    conclusion_ok = bool(np.all(h * (1 + rtol) >= floor))
    return hypothesis_ok, conclusion_ok


def subsample_index(n: int, max_points: int = 600) -> np.ndarray:
    """Evenly spaced indices (first and last included) used by the pairwise suprema."""
    if n <= max_points:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_points).astype(int))


def _pair_sup(t, a, b, fn, max_points=600):
    """sup over sampled pairs s < t of fn(t_s, t_t, a_s, b_t); None when there is no pair."""
    if len(t) < 2:
        return None
    sel = subsample_index(len(t), max_points)
    t, a, b = t[sel], a[sel], b[sel]
    S, Tt = np.meshgrid(t, t, indexing="ij")
    with np.errstate(invalid="ignore", divide="ignore"):  # lower triangle is discarded
        vals = fn(S, Tt, a[:, None], b[None, :])
    upper = np.triu(np.ones_like(vals, dtype=bool), k=1)
    v = vals[upper]
    v = v[np.isfinite(v)]
    return float(np.max(v)) if v.size else None


def functional_inequality_constant(series: NormSeries, e, max_points: int = 600) -> Optional[float]:
    """sup_{s<t} (t - s) ||u(t)||_inf^(q/(p-q)) / ||u(s)||_inf over sampled pairs."""
    mexp = e.q / (e.p - e.q)
    good = series.linf > 0
    t, h = series.t[good], series.linf[good]
    return _pair_sup(t, h, h, lambda s, tt, hs, ht: (tt - s) * ht ** mexp / hs, max_points)


# ---------------------------------------------------------------- proof-chain diagnostics

@dataclass
class SmoothingReport:
    c_l1_linf: Optional[float]
    c_grad_time: Optional[float]
    c_grad_pointwise: Optional[float]
    c_linf_l1: Optional[float]
    t_e: float
    window: tuple

    def as_dict(self) -> dict:
        return {
            "c_l1_linf": self.c_l1_linf,
            "c_grad_time": self.c_grad_time,
            "c_grad_pointwise": self.c_grad_pointwise,
            "c_linf_l1": self.c_linf_l1,
            "t_e": self.t_e,
            "window": list(self.window),
        }


def smoothing_diagnostics(rec, e, t_e: Optional[float] = None, floor: Optional[float] = None,
                          max_points: int = 600) -> SmoothingReport:
    """Empirical constants of the four estimates on (t_e/2, t_e).

    * ||u||_1 <= C ||u||_inf^nu
    * ||grad u(t)||_inf <= C ||u(s)||_inf^(1/q) (t - s)^(-1/q)
    * |grad u| <= C u^(1/(p-q)) pointwise (nodes within 10 * floor of zero skipped)
    * ||u||_inf <= C ||u||_1^((p-q)/((N+1)(p-q)-N))

    Empty suprema are reported as None.
    """
    p, q = e.p, e.q
    if t_e is None:
        t_e = rec.t_extinct if rec.t_extinct is not None else float(rec.series.t[-1])
    if floor is None:
        floor = rec.config.extinct_tol if rec.config is not None else 0.0
    lo, hi = t_e / 2, t_e
    s = rec.series.window(lo, hi)
    ok = (s.linf >= 10 * floor) & (s.l1 > 0)
    t, linf, l1, lip = s.t[ok], s.linf[ok], s.l1[ok], s.lip[ok]

    c1 = float(np.max(l1 / linf ** e.nu)) if len(t) else None
    c8 = float(np.max(linf / l1 ** e.linf_l1_power)) if len(t) else None
    c2 = _pair_sup(t, linf, lip,
                   lambda s_, t_, ls, lt: lt * (t_ - s_) ** (1 / q) / ls ** (1 / q), max_points)

    c5 = None
    for ts, f in rec.snapshots:
        if not lo < ts < hi:
            continue
        v = f.values
        g = np.abs(np.diff(v)) / f.grid.dr
        umax = np.maximum(v[:-1], v[1:])
        m = umax >= 10 * floor
        if not np.any(m):
            continue
        val = float(np.max(g[m] / umax[m] ** (1 / (p - q))))
        c5 = val if c5 is None else max(c5, val)
    return SmoothingReport(c_l1_linf=c1, c_grad_time=c2, c_grad_pointwise=c5, c_linf_l1=c8,
                           t_e=t_e, window=(lo, hi))


def tail_growth(rec, e, r_min: float = 1.0) -> float:
    """Largest u(t,r) r^sigma_fast over all snapshots, divided by its value at t = 0."""
    if e.sigma_fast is None:
        raise ValueError("the fast-tail bound needs q > p - 1")
    sig = e.sigma_fast
    _, f0 = rec.snapshots[0]
    r = f0.grid.r
    m = r >= r_min
    w = r[m] ** sig
    initial = float(np.max(f0.values[m] * w))
    worst = max(float(np.max(f.values[m] * w)) for _, f in rec.snapshots)
    return worst / initial


def tail_decay_check(rec, e, K: Optional[float] = None, factor: float = 2.0, r_min: float = 1.0) -> bool:
    """Every snapshot stays below C4 r^(-sigma_fast) on r >= r_min.

    C4 is ``factor`` times the largest u0(r) r^sigma_fast on r >= r_min. ``K``
    is the fast-tail constant of the initial datum; when given, the datum is
    checked against it first (``ValueError`` if the precondition fails).
    """
    if e.sigma_fast is None:
        raise ValueError("the fast-tail bound needs q > p - 1")
    _, f0 = rec.snapshots[0]
    r = f0.grid.r
    if K is not None:
        pos = r > 0
        if np.any(f0.values[pos] > K * r[pos] ** (-e.sigma_fast) * (1 + 1e-12)):
            raise ValueError("initial datum does not satisfy the fast-tail bound with constant K")
    return tail_growth(rec, e, r_min) <= factor


# ---------------------------------------------------------------- report format

def format_report(pairs: dict, comments=()) -> str:
    """``key = value`` lines with '#' comments on top."""
    lines = [f"# {c}" for c in comments]
    for k, v in pairs.items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "absent"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
