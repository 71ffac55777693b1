"""Radial finite-volume solver for dt u - Delta_p u + |grad u|^q = 0.

Nodes sit at r_i = i*dr, i = 0..n. Fluxes live on faces r_{i+1/2}; node i owns
the shell between r_{i-1/2} and r_{i+1/2} (a half shell at both ends). The
singular diffusivity |g|^(p-2) is regularized to (g^2 + eps^2)^((p-2)/2).
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import gamma as gamma_fn

from .analysis import NormSeries, norms

log = logging.getLogger(__name__)


REJECT_FACTOR = 4.0  # a step changing u by more than this many rel_change is redone


class SolverError(RuntimeError):
    """A step produced non-finite values or the linear solve failed."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class Scheme(enum.Enum):
    EXPLICIT = "explicit"
    SEMI_IMPLICIT = "semi_implicit"


class Boundary(enum.Enum):
    DIRICHLET_ZERO = "dirichlet_zero"
    BARRIER_TRACE = "barrier_trace"
    NEUMANN = "neumann"


class Absorption(enum.Enum):
    EXPLICIT = "explicit"
    # sink |g^n|^q / u^n applied to u^{n+1}: still linear, keeps u^{n+1} > 0
    LINEARIZED = "linearized"


def sphere_area(N: int) -> float:
    """Surface measure of the unit sphere in R^N (2 for N = 1)."""
    return 2 * math.pi ** (N / 2) / gamma_fn(N / 2)


@dataclass(frozen=True)
class RadialGrid:
    r_max: float
    n: int
    N: int

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("grid needs n >= 16 cells")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    @property
    def dr(self) -> float:
        return self.r_max / self.n

    @property
    def r(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dr

    @property
    def faces(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.dr

    @property
    def volumes(self) -> np.ndarray:
        """Shell volumes per node, without the sphere-area factor."""
        N = self.N
        hi = np.minimum(self.r + self.dr / 2, self.r_max)
        lo = np.maximum(self.r - self.dr / 2, 0.0)
        return (hi ** N - lo ** N) / N

    def describe(self) -> str:
        return f"r_max={self.r_max:g} n={self.n} N={self.N}"


@dataclass(frozen=True)
class RadialField:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n + 1,):
            raise ValueError(f"expected {self.grid.n + 1} node values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite values")
        if np.any(v < 0):
            raise ValueError("field has negative values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SolverConfig:
    p: float
    q: float
    eps: Optional[float] = None
    eps_relative: bool = False
    cfl: float = 0.4
    scheme: Scheme = Scheme.SEMI_IMPLICIT
    absorption: Absorption = Absorption.EXPLICIT
    # use (g^2 + eps^2)^(q/2) - eps^q: quadratic below eps, so regularized diffusion still
    # dominates tiny ripples near flat states (plain |g|^q with q < 1 amplifies them)
    regularize_absorption: bool = False
    extinct_tol: float = 1e-8
    t_max: float = 10.0
    boundary: Boundary = Boundary.DIRICHLET_ZERO
    # accuracy control: target relative change of ||u||_inf per step
    rel_change: float = 0.01
    dt_max: float = 0.1
    dt_min: float = 1e-14
    # new snapshot whenever ||u||_inf has dropped by this factor since the last one
    snapshot_ratio: float = 0.8
    snapshot_every: Optional[float] = None
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.extinct_tol > 0:
            raise ValueError("extinct_tol must be positive")
        if not 0 < self.cfl < 1:
            raise ValueError("cfl must lie in (0, 1)")

    def resolved_eps(self, u0: RadialField) -> float:
        if self.eps is not None:
            return self.eps
        return 1e-6 * float(np.max(u0.values)) / u0.grid.r_max

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    series: NormSeries
    snapshots: list
    t_extinct: Optional[float]
    mass_balance_residual: float
    clipped_mass: float = 0.0
    steps: int = 0
    config: Optional[SolverConfig] = None

    @property
    def grid(self) -> RadialGrid:
        return self.snapshots[0][1].grid


def init_from(profile: Callable, grid: RadialGrid) -> RadialField:
    """Sample ``profile`` at the nodes. Rejects negative, non-finite or all-zero data."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        v = np.asarray(profile(grid.r), dtype=float) * np.ones(grid.n + 1)
    if not np.all(np.isfinite(v)):
        raise ValueError("initial profile has non-finite samples")
    if np.any(v < 0):
        raise ValueError("initial profile has negative samples")
    if not np.any(v > 0):
        raise ValueError("initial profile is identically zero")
    return RadialField(grid, v)


# ---------------------------------------------------------------- discretization

def face_gradients(u: np.ndarray, dr: float) -> np.ndarray:
    return np.diff(u) / dr


def node_gradients(u: np.ndarray, dr: float) -> np.ndarray:
    """Centered gradient; zero at r = 0 by symmetry, one-sided at r_max."""
    g = np.empty_like(u)
    g[0] = 0.0
    g[1:-1] = (u[2:] - u[:-2]) / (2 * dr)
    g[-1] = (u[-1] - u[-2]) / dr
    return g


def _diffusion_coefficients(u, grid: RadialGrid, p: float, eps: float):
    """Off-diagonal couplings of the lagged-coefficient operator.

    Returns (lo, up) with (L u)_i = lo_i (u_{i-1} - u_i) + up_i (u_{i+1} - u_i).
    """
    dr = grid.dr
    g = face_gradients(u, dr)
    D = (g * g + eps * eps) ** ((p - 2) / 2)
    c = grid.faces ** (grid.N - 1) * D / dr  # face conductance
    vol = grid.volumes
    lo = np.zeros(grid.n + 1)
    up = np.zeros(grid.n + 1)
    up[:-1] = c / vol[:-1]
    lo[1:] = c / vol[1:]
    return lo, up


def _absorption_rate(u: np.ndarray, dr: float, q: float, eps: float, regularize: bool):
    g = node_gradients(u, dr)
    if regularize:
        return eps ** q * np.expm1(0.5 * q * np.log1p((g / eps) ** 2))
    return np.abs(g) ** q


def discrete_operator(u: np.ndarray, grid: RadialGrid, p: float, q: float, eps: float,
                      regularize_absorption: bool = False):
    """Nodal values of -Delta_p u + |grad u|^q (regularized, centered absorption)."""
    lo, up = _diffusion_coefficients(u, grid, p, eps)
    lap = np.zeros_like(u)
    lap[1:] += lo[1:] * (u[:-1] - u[1:])
    lap[:-1] += up[:-1] * (u[1:] - u[:-1])
    return -lap + _absorption_rate(u, grid.dr, q, eps, regularize_absorption)


def _boundary_value(cfg: SolverConfig, bc: Optional[Callable], t: float, current: float) -> Optional[float]:
    if cfg.boundary is Boundary.NEUMANN:
        return None
    if cfg.boundary is Boundary.DIRICHLET_ZERO:
        return 0.0
    if bc is None:
        raise ValueError("barrier_trace boundary needs a boundary function bc(t)")
    return float(bc(t))


def step(u: RadialField, cfg: SolverConfig, dt_hint: float, t: float = 0.0,
         eps: Optional[float] = None, bc: Optional[Callable] = None, stats: Optional[dict] = None):
    """Advance one time step.

    Returns ``(new_field, dt_used)``. When ``stats`` is a dict it receives the
    absorbed mass (nominal, before clipping), the clipped mass, the mass
    entering through r_max and the boundary value used, all per step.
    """
    grid = u.grid
    v = u.values
    p, q = cfg.p, cfg.q
    if eps is None:
        eps = cfg.resolved_eps(u)
    lo, up = _diffusion_coefficients(v, grid, p, eps)
    gq = _absorption_rate(v, grid.dr, q, eps, cfg.regularize_absorption)
    if cfg.boundary is Boundary.NEUMANN:
        gq[-1] = 0.0
    dirichlet = cfg.boundary is not Boundary.NEUMANN

    if cfg.scheme is Scheme.EXPLICIT:
        stab = cfg.cfl / max(float(np.max(lo + up)), 1e-300)
        dt = min(dt_hint, stab)
    else:
        dt = dt_hint
    if not dt > 0:
        raise SolverError(f"non-positive time step {dt}")

    bval = _boundary_value(cfg, bc, t + dt, float(v[-1]))

    if cfg.scheme is Scheme.EXPLICIT:
        lap = np.zeros_like(v)
        lap[1:] += lo[1:] * (v[:-1] - v[1:])
        lap[:-1] += up[:-1] * (v[1:] - v[:-1])
        if cfg.absorption is Absorption.LINEARIZED:
            new = (v + dt * lap) / (1 + dt * _sink(gq, v))
        else:
            new = v + dt * (lap - gq)
    else:
        n1 = grid.n + 1
        ab = np.zeros((3, n1))
        diag = 1 + dt * (lo + up)
        rhs = v.copy()
        if cfg.absorption is Absorption.LINEARIZED:
            diag = diag + dt * _sink(gq, v)
        else:
            rhs = rhs - dt * gq
        ab[1] = diag
        ab[0, 1:] = -dt * up[:-1]
        ab[2, :-1] = -dt * lo[1:]
        if dirichlet:
            ab[1, -1] = 1.0
            ab[2, -2] = 0.0
            rhs[-1] = bval
        try:
            new = solve_banded((1, 1), ab, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"tridiagonal solve failed at t={t}: {exc}", state=v.copy()) from exc

    if dirichlet:
        new[-1] = bval
    # flux through the last face, evaluated on the values the scheme used for it
    flux_vals = v if cfg.scheme is Scheme.EXPLICIT else new
    influx = 0.0
    if dirichlet:
        cond = up[-2] * grid.volumes[-2]
        influx = float(sphere_area(grid.N) * dt * cond * (flux_vals[-1] - flux_vals[-2]))
    if not np.all(np.isfinite(new)):
        raise SolverError(f"non-finite values after step at t={t}", state=v.copy())
    neg = new < 0
    clipped = 0.0
    area = sphere_area(grid.N)
    if np.any(neg):
        clipped = float(-area * np.sum(grid.volumes[neg] * new[neg]))
        new[neg] = 0.0
    if stats is not None:
        w = grid.volumes.copy()
        if dirichlet:
            w[-1] = 0.0
        if cfg.absorption is Absorption.LINEARIZED:
            applied = _sink(gq, v) * new
        else:
            applied = gq
        stats["absorbed"] = float(area * dt * np.sum(w * applied))
        stats["clipped"] = clipped
        stats["influx"] = influx
        stats["boundary"] = bval
    return RadialField(grid, new), dt


def _sink(gq, v):
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(v > 0, gq / np.where(v > 0, v, 1.0), 0.0)
    return k


def _dt_accuracy(v, grid: RadialGrid, cfg: SolverConfig, eps: float) -> float:
    """Step that changes the solution by about rel_change * ||u||_inf."""
    rate = np.abs(discrete_operator(v, grid, cfg.p, cfg.q, eps, cfg.regularize_absorption))
    if cfg.boundary is not Boundary.NEUMANN:
        rate[-1] = 0.0
    top = float(np.max(rate))
    linf = float(np.max(v))
    if top <= 0:
        return cfg.dt_max
    return min(cfg.dt_max, cfg.rel_change * linf / top)


def _interior_mass(v, grid: RadialGrid, dirichlet: bool) -> float:
    w = grid.volumes.copy()
    if dirichlet:
        w[-1] = 0.0
    return float(sphere_area(grid.N) * np.sum(w * v))


def run(u0: RadialField, cfg: SolverConfig, bc: Optional[Callable] = None,
        snapshot_times=None, callback: Optional[Callable] = None) -> RunRecord:
    """Evolve until ||u||_inf < extinct_tol or t_max.

    Norms are recorded every step; the accuracy control keeps steps
    proportional to the distance to extinction, so the series is geometric in
    (T_e - t) near the end. Snapshots are taken at the start, whenever
    ||u||_inf has dropped by ``snapshot_ratio``, at ``snapshot_times``, and at the end.
    """
    grid = u0.grid
    dirichlet = cfg.boundary is not Boundary.NEUMANN
    eps0 = cfg.resolved_eps(u0)
    u = u0
    t = 0.0
    ts, linfs, l1s, lips = [], [], [], []

    def record(field_, time):
        a, b, c = norms(field_)
        ts.append(time)
        linfs.append(a)
        l1s.append(b)
        lips.append(c)

    record(u, t)
    snapshots = [(0.0, u)]
    last_snap_linf = linfs[-1]
    last_snap_t = 0.0
    pending = sorted(snapshot_times or [])

    mass0 = _interior_mass(u.values, grid, dirichlet)
    m0_norm = l1s[0]
    absorbed_total = 0.0
    clipped_total = 0.0
    influx_total = 0.0
    balance = 0.0
    t_extinct = None
    steps = 0
    stats: dict = {}
    dt_next = None
    while t < cfg.t_max and steps < cfg.max_steps:
        v = u.values
        linf = float(np.max(v))
        if cfg.eps_relative:
            eps = max(eps0 * linf / float(np.max(u0.values)), 1e-300)
        else:
            eps = eps0
        if dt_next is None or cfg.scheme is Scheme.EXPLICIT:
            dt = _dt_accuracy(v, grid, cfg, eps)
        else:
            dt = min(dt_next, cfg.dt_max)
        dt = max(dt, cfg.dt_min)
        if pending and t + dt > pending[0] > t:
            dt = pending[0] - t
        dt = min(dt, cfg.t_max - t)
        while True:
            trial, dt_used = step(u, cfg, dt, t=t, eps=eps, bc=bc, stats=stats)
            # a-posteriori control: the implicit step tolerates stiff relaxation, so
            # size steps from the observed relative change; reject large jumps
            change = float(np.max(np.abs(trial.values - v))) / max(linf, 1e-300)
            if change <= REJECT_FACTOR * cfg.rel_change or dt_used <= cfg.dt_min:
                break
            dt = max(dt_used * max(0.1, cfg.rel_change / change), cfg.dt_min)
        u = trial
        t += dt_used
        steps += 1
        dt_next = dt_used * min(1.5, max(0.2, cfg.rel_change / max(change, 1e-300)))
        absorbed_total += stats["absorbed"]
        clipped_total += stats["clipped"]
        influx_total += stats["influx"]
        mass = _interior_mass(u.values, grid, dirichlet)
        # clipping adds mass; it is reported separately and kept out of the residual
        drift = mass - mass0 + absorbed_total - influx_total - clipped_total
        balance = max(balance, abs(drift) / mass0)
        record(u, t)
        if callback is not None:
            callback(t, u)
        take = linfs[-1] <= cfg.snapshot_ratio * last_snap_linf
        if cfg.snapshot_every is not None and t - last_snap_t >= cfg.snapshot_every:
            take = True
        while pending and t >= pending[0] - 1e-12 * max(1.0, abs(t)):
            pending.pop(0)
            take = True
        if take:
            snapshots.append((t, u))
            last_snap_linf = linfs[-1]
            last_snap_t = t
        if linfs[-1] < cfg.extinct_tol:
            t_extinct = t
            break
    if snapshots[-1][0] != t:
        snapshots.append((t, u))
    if clipped_total > 0:
        log.info("clipped mass %.3e (%.2e of initial)", clipped_total, clipped_total / mass0)
    series = NormSeries(np.array(ts), np.array(linfs), np.array(l1s), np.array(lips))
    return RunRecord(series=series, snapshots=snapshots, t_extinct=t_extinct,
                     mass_balance_residual=balance, clipped_mass=clipped_total, steps=steps,
                     config=cfg)


# ---------------------------------------------------------------- comparison

def compare_with_barrier(rec: RunRecord, params, side: str, rel_tol: float = 1e-12) -> float:
    """Largest pointwise ordering violation against a barrier over all snapshots.

    ``side="above"`` pairs with a supersolution (checks u <= W), ``side="below"``
    with a subsolution (checks w <= u). Raises if the ordering already fails at t = 0.
    Differences below ``rel_tol`` times the local magnitude are treated as zero.
    """
    from .barriers import BarrierKind, sub_profile_value, super_value_or_zero

    side = side.lower()
    if side == "above":
        if params.kind is not BarrierKind.SUPER:
            raise ValueError("side 'above' needs a supersolution")

        def barrier(t, r):
            return super_value_or_zero(t, r, params)

        def gap(u, bv):
            return u - bv
    elif side == "below":
        if params.kind is not BarrierKind.SUB:
            raise ValueError("side 'below' needs a subsolution")

        def barrier(t, r):
            if t >= params.T:
                return np.zeros_like(r)
            return sub_profile_value(t, r, params)

        def gap(u, bv):
            return bv - u
    else:
        raise ValueError(f"side must be 'above' or 'below', got {side!r}")

    def excess(u, bv):
        # gaps within rel_tol of the local magnitude are rounding, not ordering failures
        g = gap(u, bv)
        g[np.abs(g) <= rel_tol * np.maximum(np.abs(u), np.abs(bv))] = 0.0
        return g

    t0, f0 = rec.snapshots[0]
    r = f0.grid.r
    g0 = excess(f0.values, barrier(t0, r))
    if np.max(g0) > 0:
        raise ValueError(f"initial ordering violated by {np.max(g0):.3e}; comparison hypothesis fails")
    worst = 0.0
    for t, f in rec.snapshots[1:]:
        worst = max(worst, float(np.max(excess(f.values, barrier(t, r)))))
    return worst


def comparison_tolerance(grid: RadialGrid, dt: float, eps: float, p: float, scale: float) -> float:
    """Reported bound on discretization-induced ordering violations, scale*(dr^2 + dt + eps^(p-1))."""
    return scale * (grid.dr ** 2 + dt + eps ** (p - 1))


# ---------------------------------------------------------------- dumps

def dump_snapshot(path, t: float, u: RadialField, cfg: SolverConfig):
    header = (f"# t = {t!r}\n# config = {cfg.digest()}\n# grid = {u.grid.describe()}\n"
              "# columns: r u\n")
    with open(path, "w") as fh:
        fh.write(header)
        for ri, ui in zip(u.grid.r, u.values):
            fh.write(f"{ri:.17g} {ui:.17g}\n")


def load_snapshot(path, grid: RadialGrid) -> tuple[float, RadialField]:
    t = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("# t ="):
                t = float(line.split("=", 1)[1])
    data = np.loadtxt(path, comments="#")
    return t, RadialField(grid, data[:, 1])
