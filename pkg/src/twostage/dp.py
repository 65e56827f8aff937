"""Differentially private release of per-window zero proportions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .cohort import Cohort, N_WINDOWS
from .tradeoff import budget_of_gdp


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class GdpParam:
    mu: float

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")


@dataclass(frozen=True)
class DpSummary:
    zero_props: tuple[float, ...]
    sigma: float
    sensitivity: float
    budget: PrivacyBudget
    seed: int

    def __post_init__(self):
        props = tuple(float(p) for p in self.zero_props)
        if len(props) != N_WINDOWS or any(not 0.0 <= p <= 1.0 for p in props):
            raise ValueError(f"zero_props must be 4 values in [0, 1], got {props}")
        if not (self.sigma > 0 and self.sensitivity > 0):
            raise ValueError("sigma and sensitivity must be positive")
        object.__setattr__(self, "zero_props", props)

    def to_dict(self) -> dict:
        return asdict(self) | {"zero_props": list(self.zero_props)}

    @classmethod
    def from_dict(cls, d: dict) -> "DpSummary":
        return cls(
            zero_props=tuple(d["zero_props"]),
            sigma=float(d["sigma"]),
            sensitivity=float(d["sensitivity"]),
            budget=PrivacyBudget(**d["budget"]),
            seed=int(d["seed"]),
        )


class CalibrationError(RuntimeError):
    pass


def zero_proportions(cohort: Cohort) -> np.ndarray:
    """Fraction of zero cells per window over all students and weeks."""
    return (cohort.minutes == 0).mean(axis=(0, 2))


def l2_sensitivity(n: int) -> float:
    """L2 sensitivity of the zero-proportion vector under replace-one adjacency.

    Replacing one student moves each window's proportion by at most 1/n, so
    the 4-vector moves by at most sqrt(4)/n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return 2.0 / n


def gaussian_delta(epsilon: float, sigma: float, sensitivity: float) -> float:
    """Exact delta of the Gaussian mechanism at a given epsilon.

    delta = Phi(D/(2s) - e*s/D) - exp(e) * Phi(-D/(2s) - e*s/D)
    """
    a = sensitivity / (2.0 * sigma)
    b = epsilon * sigma / sensitivity
    return float(ndtr(a - b) - np.exp(epsilon + log_ndtr(-a - b)))


def _bisect(pred, lo: float, hi: float, tol: float, max_iter: int = 400) -> float:
    """Smallest x in [lo, hi] with pred(x) true, assuming pred is monotone."""
    for _ in range(max_iter):
        if hi - lo <= tol * max(hi, 1e-300):
            return hi
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    raise CalibrationError("bisection did not converge")


def calibrate_gaussian(budget: PrivacyBudget, sensitivity: float, tol: float = 1e-12) -> float:
    """Smallest noise scale meeting the exact Gaussian-mechanism condition.

    Binary search on sigma; the returned value always satisfies the
    condition, and shrinking it by more than ``tol`` (relative) breaks it.
    """
    if not sensitivity > 0:
        raise ValueError("sensitivity must be positive")
    eps, delta = budget.epsilon, budget.delta

    def ok(s):
        return gaussian_delta(eps, s, sensitivity) <= delta

    hi = sensitivity
    while not ok(hi):
        hi *= 2.0
        if hi > 1e12 * sensitivity:
            raise CalibrationError(f"no sigma found for {budget}")
    lo = hi
    while ok(lo):
        lo *= 0.5
        if lo < 1e-12 * sensitivity:
            return lo
    return _bisect(ok, lo, hi, tol)


def noise_vector(sigma: float, seed: int, size: int = N_WINDOWS) -> np.ndarray:
    """The Gaussian noise ``release_summary`` adds for a given seed."""
    return np.random.default_rng(seed).normal(0.0, sigma, size=size)


def release_summary(cohort: Cohort, budget: PrivacyBudget, seed: int) -> DpSummary:
    """Noised, clamped zero proportions under the given budget."""
    delta_2 = l2_sensitivity(cohort.n)
    sigma = calibrate_gaussian(budget, delta_2)
    noisy = zero_proportions(cohort) + noise_vector(sigma, seed)
    return DpSummary(
        zero_props=tuple(np.clip(noisy, 0.0, 1.0)),
        sigma=sigma,
        sensitivity=delta_2,
        budget=budget,
        seed=int(seed),
    )


def gdp_of_budget(budget: PrivacyBudget, tol: float = 1e-12) -> GdpParam:
    """The mu whose GDP curve passes through (epsilon, delta).

    For the Gaussian mechanism this equals sensitivity / sigma exactly.
    """
    eps, delta = budget.epsilon, budget.delta

    def reaches(mu):
        return budget_of_gdp(mu, eps) >= delta

    hi = 1.0
    while not reaches(hi):
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError(f"no mu found for {budget}")
    return GdpParam(_bisect(reaches, 0.0, hi, tol))


def classic_sigma(budget: PrivacyBudget, sensitivity: float) -> float:
    """Textbook bound sqrt(2 ln(1.25/delta)) * sensitivity / epsilon."""
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * sensitivity / budget.epsilon
