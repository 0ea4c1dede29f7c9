"""Convergence-condition constants and step-size prescriptions for AD-PSGD.

All quantities use the batch-sum gradient convention: one update moves a
worker by ``gamma * sum_{m=1}^M grad F``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import mpmath

from .errors import DomainError, ValidationError


@dataclass(frozen=True)
class TheoryInputs:
    n: int
    M: int
    L: float
    T: int
    rho: float
    sigma_sq: float
    varsigma_sq: float
    gamma: float
    K: int

    def __post_init__(self):
        if self.n < 1 or self.M < 1 or self.K < 1:
            raise ValidationError("n, M and K must be at least 1")
        for name in ("L", "T", "sigma_sq", "varsigma_sq", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if not 0 <= self.rho < 1:
            raise DomainError(f"rho must lie in [0, 1), got {self.rho}")


@dataclass(frozen=True)
class TheoryReport:
    bar_rho: float
    C1: float
    C2: float
    C3: float
    gamma: float
    gamma_corollary: float
    K_min: float
    valid: bool
    bound_rhs: float | None
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "diagnostic" or v]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def bar_rho(rho: float, n: int) -> float:
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    s = math.sqrt(rho)
    return (n - 1) / n * (1.0 / (1.0 - rho) + 2.0 * s / (1.0 - s) ** 2)


def constants(inp: TheoryInputs) -> tuple[float, float, float]:
    """Return ``(C1, C2, C3)``; C2 and C3 are NaN when C1 is exactly zero."""
    n, M, L, T, g = inp.n, inp.M, inp.L, inp.T, inp.gamma
    br = bar_rho(inp.rho, n)
    mix = T * (n - 1) / n + br
    c1 = 1.0 - 24.0 * M**2 * L**2 * g**2 * mix
    if c1 == 0.0:
        return c1, math.nan, math.nan
    c2 = (
        g * M / (2 * n)
        - g**2 * L * M**2 / n**2
        - 2 * M**3 * L**2 * T**2 * g**3 / n**3
        - (6 * g**2 * L**3 * M**2 / n**2 + g * M / n * L**2 + 12 * M**3 * L**4 * T**2 * g**3 / n**3)
        * 4 * M**2 * g**2 * mix
        / c1
    )
    c3 = (
        0.5
        + 2.0 / c1 * (6 * g**2 * L**2 * M**2 + g * n * M * L + 12 * M**3 * L**3 * T**2 * g**3 / n) * br
        + L * T**2 * g * M / n
    )
    return c1, c2, c3


def constants_valid(c1: float, c2: float, c3: float) -> bool:
    return c1 > 0 and c2 >= 0 and c3 <= 1


def corollary_gamma(n: int, M: int, L: float, sigma_sq: float, varsigma_sq: float, K: int) -> float:
    if K < 1 or L <= 0:
        raise ValidationError("corollary step size needs K >= 1 and L > 0")
    return n / (10 * M * L + math.sqrt(sigma_sq + 6 * M * varsigma_sq) * math.sqrt(K * M))


def _kmin_terms(n: int, T: int, br: float) -> tuple[float, float, float, float]:
    mix = T * (n - 1) / n + br
    t4 = 0.0
    if n > 1:
        t4 = (
            (8 * math.sqrt(6) * T ** (2 / 3) + 8) ** 2
            * (T + br * n / (n - 1)) ** (2 / 3)
            * math.sqrt(n - 1)
            / n ** (1 / 6)
        )
    return 192 * mix, 64 * T**4 / n**2, 1024 * n**2 * br**2, t4


def min_iterations(inp: TheoryInputs) -> float:
    """Right-hand side of the iteration requirement attached to the corollary step size.

    Returns ``inf`` when there is no gradient noise: the prescription then
    degenerates to the noiseless constant ``n / (10 M L)``.
    """
    noise = inp.sigma_sq + 6 * inp.M * inp.varsigma_sq
    if noise <= 0:
        return math.inf
    br = bar_rho(inp.rho, inp.n)
    terms = _kmin_terms(inp.n, inp.T, br)
    return inp.M * inp.L**2 * inp.n**2 / noise * max(terms)


def min_iterations_extended(inp: TheoryInputs, dps: int = 50) -> mpmath.mpf:
    """Independent re-evaluation of :func:`min_iterations` at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        mp = mpmath.mpf
        rho = mp(inp.rho)
        n = mp(inp.n)
        s = mpmath.sqrt(rho)
        br = (n - 1) / n * (1 / (1 - rho) + 2 * s / (1 - s) ** 2)
        noise = mp(inp.sigma_sq) + 6 * mp(inp.M) * mp(inp.varsigma_sq)
        if noise <= 0:
            return mpmath.inf
        T = mp(inp.T)
        mix = T * (n - 1) / n + br
        terms = [192 * mix, 64 * T**4 / n**2, 1024 * n**2 * br**2]
        if inp.n > 1:
            cbrt2 = lambda x: mpmath.cbrt(x) ** 2  # noqa: E731
            terms.append(
                (8 * mpmath.sqrt(6) * cbrt2(T) + 8) ** 2
                * cbrt2(T + br * n / (n - 1))
                * mpmath.sqrt(n - 1)
                / mpmath.root(n, 6)
            )
        return mp(inp.M) * mp(inp.L) ** 2 * n**2 / noise * max(terms)


def theorem_bound(inp: TheoryInputs, f0_minus_fstar: float, strict: bool = True) -> float:
    """Upper bound on ``(1/K) sum_k E||grad f(average model)||^2``.

    With ``strict=False`` the right-hand side is evaluated even when the step
    size falls outside the region where it is guaranteed to hold.
    """
    c1, c2, c3 = constants(inp)
    if strict and not constants_valid(c1, c2, c3):
        raise ValidationError(
            f"step size {inp.gamma} violates the convergence conditions "
            f"(C1={c1:.6g} > 0, C2={c2:.6g} >= 0, C3={c3:.6g} <= 1 required)"
        )
    noise = inp.sigma_sq + 6 * inp.M * inp.varsigma_sq
    return 2 * f0_minus_fstar * inp.n / (inp.gamma * inp.K * inp.M) + 2 * inp.gamma * inp.L * noise / inp.n


def check(inp: TheoryInputs, f0_minus_fstar: float | None = None) -> TheoryReport:
    c1, c2, c3 = constants(inp)
    valid = constants_valid(c1, c2, c3)
    reasons = []
    if not c1 > 0:
        reasons.append(f"C1={c1:.6g} is not positive")
    if not c2 >= 0:
        reasons.append(f"C2={c2:.6g} is negative")
    if not c3 <= 1:
        reasons.append(f"C3={c3:.6g} exceeds 1")
    gamma_c = (
        corollary_gamma(inp.n, inp.M, inp.L, inp.sigma_sq, inp.varsigma_sq, inp.K) if inp.L > 0 else math.nan
    )
    k_min = min_iterations(inp)
    if inp.K < k_min:
        reasons.append(f"K={inp.K} is below the corollary requirement {k_min:.6g}")
    bound = None
    if valid and f0_minus_fstar is not None:
        bound = theorem_bound(inp, f0_minus_fstar)
    return TheoryReport(
        bar_rho=bar_rho(inp.rho, inp.n),
        C1=c1,
        C2=c2,
        C3=c3,
        gamma=inp.gamma,
        gamma_corollary=gamma_c,
        K_min=k_min,
        valid=valid,
        bound_rhs=bound,
        diagnostic="; ".join(reasons),
    )
