"""Gaussian trade-off functions, composition and empirical curve fitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri


class TooFewPointsError(ValueError):
    pass


def g_mu_eval(mu: float, alpha):
    """Gaussian trade-off G_mu(alpha) = Phi(Phi^-1(1 - alpha) - mu)."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    # Phi^-1(1 - a) == -Phi^-1(a), which keeps precision for small a
    beta = ndtr(-ndtri(a) - mu)
    return float(beta) if beta.ndim == 0 else beta


def compose_gdp(mu: float, nu: float) -> float:
    """Parameter of G_mu (x) G_nu, which is G_sqrt(mu^2 + nu^2)."""
    if mu < 0 or nu < 0:
        raise ValueError("mu and nu must be nonnegative")
    return float(np.hypot(mu, nu))


def budget_of_gdp(mu: float, epsilon: float) -> float:
    """delta(epsilon) = Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2)."""
    if mu < 0 or epsilon < 0:
        raise ValueError("mu and epsilon must be nonnegative")
    if mu == 0:
        return 0.0
    first = ndtr(-epsilon / mu + mu / 2)
    second = np.exp(epsilon + log_ndtr(-epsilon / mu - mu / 2))
    return float(max(first - second, 0.0))


def lower_convex_hull(points: np.ndarray) -> np.ndarray:
    """Lower convex hull of (fpr, fnr) points together with (0, 1) and (1, 0).

    The result is the trade-off curve achievable by randomising between the
    given tests: convex, nonincreasing and never above 1 - alpha.
    """
    pts = np.vstack([np.asarray(points, dtype=float).reshape(-1, 2), [[0.0, 1.0], [1.0, 0.0]]])
    pts = np.unique(pts, axis=0)  # sorted by fpr, then fnr
    hull: list[tuple[float, float]] = []
    for x, y in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # drop the middle point unless the turn is strictly counter-clockwise
            if (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append((x, y))
    return np.array(hull)


@dataclass(frozen=True, eq=False)
class TradeoffCurve:
    """Points (fpr, fnr) sorted by fpr."""

    fpr: np.ndarray
    fnr: np.ndarray

    def __post_init__(self):
        fpr = np.asarray(self.fpr, dtype=float).ravel()
        fnr = np.asarray(self.fnr, dtype=float).ravel()
        if fpr.shape != fnr.shape or fpr.size == 0:
            raise ValueError("fpr and fnr must be nonempty and of equal length")
        if np.any((fpr < 0) | (fpr > 1) | (fnr < 0) | (fnr > 1)):
            raise ValueError("rates must lie in [0, 1]")
        order = np.lexsort((-fnr, fpr))
        fpr, fnr = fpr[order], fnr[order]
        fpr.setflags(write=False)
        fnr.setflags(write=False)
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "fnr", fnr)

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]]) -> "TradeoffCurve":
        arr = np.asarray(points, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.fpr, self.fnr])

    def __len__(self) -> int:
        return self.fpr.size

    def convexified(self) -> "TradeoffCurve":
        hull = lower_convex_hull(self.points)
        return TradeoffCurve(hull[:, 0], hull[:, 1])

    def evaluate(self, alpha):
        """Piecewise-linear value of the hull-enforced curve at ``alpha``."""
        hull = lower_convex_hull(self.points)
        return np.interp(alpha, hull[:, 0], hull[:, 1])

    def resampled(self, alphas) -> "TradeoffCurve":
        alphas = np.asarray(alphas, dtype=float)
        return TradeoffCurve(alphas, self.evaluate(alphas))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "beta"])
            for a, b in zip(self.fpr, self.fnr):
                w.writerow([repr(float(a)), repr(float(b))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TradeoffCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["alpha"]) for r in rows], [float(r["beta"]) for r in rows])


def curve_from_scores(in_scores, out_scores) -> TradeoffCurve:
    """Raw (FPR, FNR) points of the rule "reject H0 when score >= gamma".

    gamma sweeps every achieved score plus +inf; the smallest achieved
    score yields (1, 0) and +inf yields (0, 1).
    """
    s_in = np.sort(np.asarray(in_scores, dtype=float))
    s_out = np.sort(np.asarray(out_scores, dtype=float))
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("need scores on both sides")
    gammas = np.unique(np.concatenate([s_in, s_out]))
    fnr = np.searchsorted(s_in, gammas, side="left") / s_in.size
    fpr = 1.0 - np.searchsorted(s_out, gammas, side="left") / s_out.size
    return TradeoffCurve(np.append(fpr, 0.0), np.append(fnr, 1.0))


class GwmipFit(NamedTuple):
    nu: float
    regret: float


def fit_gwmip(curve: TradeoffCurve, n_shadows: int, two_sided: bool = True) -> GwmipFit:
    """Fit a Gaussian trade-off parameter to an empirical curve.

    Points with FPR strictly inside (2/n, 1 - 2/n) each give a per-point
    estimate Phi^-1(1 - alpha) - Phi^-1(beta), with beta clamped half a
    shadow away from 0 and 1; the median is the fitted parameter (floored
    at zero).  Regret is the largest gap between the fitted curve and the
    empirical one over the retained points; with ``two_sided=False`` only
    points where the empirical curve falls below the fit count.
    """
    if n_shadows < 1:
        raise ValueError("n_shadows must be positive")
    pts = np.unique(curve.points, axis=0)
    lo, hi = 2.0 / n_shadows, 1.0 - 2.0 / n_shadows
    keep = (pts[:, 0] > lo) & (pts[:, 0] < hi)
    if keep.sum() < 3:
        raise TooFewPointsError(
            f"{int(keep.sum())} points with FPR in ({lo:.4g}, {hi:.4g}); need 3"
        )
    alpha, beta = pts[keep, 0], pts[keep, 1]
    floor = 1.0 / (2 * n_shadows)
    per_point = -ndtri(alpha) - ndtri(np.clip(beta, floor, 1.0 - floor))
    nu = max(float(np.median(per_point)), 0.0)
    gap = g_mu_eval(nu, alpha) - beta
    regret = float(np.max(np.abs(gap))) if two_sided else float(max(np.max(gap), 0.0))
    return GwmipFit(nu, regret)
