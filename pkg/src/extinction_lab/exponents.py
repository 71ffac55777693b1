"""Exponent algebra for dt u - Delta_p u + |grad u|^q = 0.

Everything here is a closed-form function of the triple (N, p, q). The regime
checks are strict: parameters on a boundary of the admissible range are
rejected, because several exponents blow up there (alpha at p = 2q, for one).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional


class RegimeError(ValueError):
    """Raised when (N, p, q) lies outside 2N/(N+1) < p < 2, 0 < q < p/2."""


class Regime(enum.Enum):
    BELOW_CRITICAL = "below_critical"  # q < p - 1
    CRITICAL = "critical"  # q == p - 1
    ABOVE_CRITICAL = "above_critical"  # q > p - 1


class TailClass(enum.Enum):
    EXTINGUISHING = "extinguishing"
    NON_EXTINGUISHING = "non_extinguishing"


@dataclass(frozen=True)
class ParamTriple:
    N: int
    p: float
    q: float

    def __post_init__(self):
        violations = regime_violations(self.N, self.p, self.q)
        if violations:
            raise RegimeError(
                f"(N={self.N}, p={self.p}, q={self.q}) violates: " + "; ".join(violations)
            )

    @property
    def p_c(self) -> float:
        return 2.0 * self.N / (self.N + 1)


def regime_violations(N, p, q) -> list[str]:
    """List every violated inequality of the admissible regime (empty if valid)."""
    out = []
    if not isinstance(N, int) or isinstance(N, bool) or N < 1:
        out.append("N >= 1 integer")
        return out
    p_c = 2.0 * N / (N + 1)
    if not p > p_c:
        out.append(f"p > p_c = 2N/(N+1) = {p_c:g}")
    if not p < 2:
        out.append("p < 2")
    if not q > 0:
        out.append("q > 0")
    if not q < p / 2:
        out.append("q < p/2")
    return out


@dataclass(frozen=True)
class Exponents:
    triple: ParamTriple
    p_c: float
    alpha: float
    beta: float
    theta: float
    gamma: float
    q_star: float
    nu: float
    omega: float
    lam: float
    big_l: float
    sigma_opt: float
    sigma_fast: Optional[float]
    regime: Regime

    @property
    def N(self) -> int:
        return self.triple.N

    @property
    def p(self) -> float:
        return self.triple.p

    @property
    def q(self) -> float:
        return self.triple.q

    @property
    def l1_rate(self) -> float:
        """Exponent of the L1 extinction rate, alpha - N*beta."""
        return self.alpha - self.N * self.beta

    @property
    def m(self) -> float:
        """q/(p-q), the power in the L-infinity functional inequality."""
        return self.q / (self.p - self.q)

    @property
    def linf_l1_power(self) -> float:
        """(p-q)/((N+1)(p-q)-N): power of ||u||_1 bounding ||u||_inf."""
        p, q, N = self.p, self.q, self.N
        return (p - q) / ((N + 1) * (p - q) - N)

    def as_dict(self) -> dict:
        d = {
            "N": self.N,
            "p": self.p,
            "q": self.q,
            "regime": self.regime.value,
        }
        for name in ("p_c", "alpha", "beta", "theta", "gamma", "q_star", "nu", "omega",
                     "lam", "big_l", "sigma_opt", "sigma_fast"):
            d[name] = getattr(self, name)
        d["l1_rate"] = self.l1_rate
        return d


def derive(triple_or_N, p=None, q=None) -> Exponents:
    """Compute the full exponent record.

    Accepts either a ``ParamTriple`` or the three numbers ``(N, p, q)``.
    Raises ``RegimeError`` naming the violated inequality when out of range.
    """
    if isinstance(triple_or_N, ParamTriple):
        t = triple_or_N
    else:
        t = ParamTriple(triple_or_N, p, q)
    N, p, q = t.N, t.p, t.q

    alpha = (p - q) / (p - 2 * q)
    beta = (q - p + 1) / (p - 2 * q)
    theta = p / (p - 1)
    gamma = (p - 1) * q / (p * (1 - q))
    q_star = p - N / (N + 1)
    nu = (N + 1) * (q_star - q) / (p - q)
    omega = q / (p - q) - N * (p - 2 * q) * (q - p + 1) / ((p - q) * ((N + 1) * (p - q) - N))
    lam = 2 * p * (gamma + 1) / N
    big_l = p * (gamma + 1) * (gamma * theta) ** (p - 1)
    sigma_opt = q / (1 - q)

    # exact comparison on purpose: the critical case is selected by exact input
    if q == p - 1:
        regime = Regime.CRITICAL
    elif q > p - 1:
        regime = Regime.ABOVE_CRITICAL
    else:
        regime = Regime.BELOW_CRITICAL
    sigma_fast = (p - q) / (q - p + 1) if regime is Regime.ABOVE_CRITICAL else None

    return Exponents(
        triple=t, p_c=t.p_c, alpha=alpha, beta=beta, theta=theta, gamma=gamma,
        q_star=q_star, nu=nu, omega=omega, lam=lam, big_l=big_l,
        sigma_opt=sigma_opt, sigma_fast=sigma_fast, regime=regime,
    )


def identity_residuals(e: Exponents) -> float:
    """Largest absolute residual among the algebraic identities tying the exponents."""
    N, p, q = e.N, e.p, e.q
    k = (N + 1) * (p - q) - N
    res = [
        e.alpha - e.beta * e.theta * e.gamma - 1 / (1 - q),
        (e.theta - 1) * (p - 1) - 1,
        (p - 1) * e.theta - p,
        1 - e.omega - (p - 2 * q) / k,
        e.alpha - N * e.beta - k / (p - 2 * q),
    ]
    return max(abs(r) for r in res)


def classify_tail(sigma: float, e: Exponents) -> TailClass:
    """Classify an initial tail (1+|x|)^(-sigma).

    The threshold sigma == sigma_opt counts as extinguishing: it is exactly the
    optimal-tail hypothesis with constant 1.
    """
    if not sigma > 0:
        raise ValueError(f"decay exponent must be positive, got {sigma}")
    if sigma >= e.sigma_opt:
        return TailClass.EXTINGUISHING
    return TailClass.NON_EXTINGUISHING


def fast_tail_exponent(Q: float, p: float) -> float:
    return (p - Q) / (Q - p + 1)


def fast_tail_dominates(Q: float, e: Exponents) -> bool:
    """True iff the tail exponent (p-Q)/(Q-p+1) decays faster than the optimal one."""
    p = e.p
    if not (p - 1 < Q < p / 2):
        raise ValueError(f"Q must lie in (p-1, p/2) = ({p - 1:g}, {p / 2:g}), got {Q}")
    return fast_tail_exponent(Q, p) > e.sigma_opt
