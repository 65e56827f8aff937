"""Empirical membership-inference audit of the two-stage release.

For a target record, shadow datasets are resampled with (IN) and without
(OUT) the target, every released output is computed on each shadow, and a
Gaussian likelihood-ratio attacker scores each shadow.  Scores are
leave-one-out: a shadow's own output never enters the Gaussian fit used to
score it.  The resulting trade-off curve is summarised by a fitted Gaussian
parameter, its regret, and the attacker's advantage.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .cohort import (
    LABELS,
    N_WEEKS,
    N_WINDOWS,
    Cohort,
    GroundTruthConfig,
    StudentRecord,
    feature_matrix,
    sample_minutes,
)
from .dp import PrivacyBudget, release_summary
from .seeding import derive_seed, rng_for
from .tradeoff import TooFewPointsError, TradeoffCurve, compose_gdp, curve_from_scores, fit_gwmip
from .validate import QueryKind, QueryOutput, SdcPolicy, ValidationRequest, run_request

SHADOW_SEP = "@"


class DistributionTooSmall(ValueError):
    pass


class DistributionSource(str, enum.Enum):
    BOOTSTRAP = "bootstrap-of-cohort"
    GENERATOR = "ground-truth-generator"


@dataclass(frozen=True)
class DataDistribution:
    """Stand-in for the population records are drawn from.

    Either a bootstrap over a cohort or fresh draws from the ground-truth
    generator (labels uniform over the three classes).
    """

    source: DistributionSource
    cohort: Cohort | None = None
    config: GroundTruthConfig | None = None

    @classmethod
    def bootstrap(cls, cohort: Cohort) -> "DataDistribution":
        return cls(DistributionSource.BOOTSTRAP, cohort=cohort)

    @classmethod
    def generator(cls, config: GroundTruthConfig) -> "DataDistribution":
        return cls(DistributionSource.GENERATOR, config=config)

    def draw(
        self, rng: np.random.Generator, size: int, exclude_id: str | None = None
    ) -> tuple[list[str], np.ndarray, np.ndarray]:
        """``size`` i.i.d. records as (source ids, minutes, label indices)."""
        if self.source is DistributionSource.BOOTSTRAP:
            ids = self.cohort.ids
            pool = np.array([i for i, sid in enumerate(ids) if sid != exclude_id])
            if pool.size == 0:
                raise DistributionTooSmall("no records left after excluding the target")
            idx = pool[rng.integers(pool.size, size=size)]
            return [ids[i] for i in idx], self.cohort.minutes[idx], self.cohort.labels[idx]
        cfg = self.config
        labels = rng.integers(len(LABELS), size=size)
        minutes = np.empty((size, N_WINDOWS, N_WEEKS), dtype=np.int64)
        for c in range(len(LABELS)):
            rows = np.flatnonzero(labels == c)
            if rows.size:
                minutes[rows] = sample_minutes(
                    rng, rows.size, cfg.zero_prob[c], cfg.shape[c], cfg.scale[c], cfg.student_shape
                )
        tags = rng.integers(1 << 62, size=size)
        return [f"gen-{t:x}" for t in tags], minutes, labels


@dataclass(frozen=True)
class ShadowConfig:
    num_in: int = 64
    num_out: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_in < 2 or self.num_out < 2:
            raise ValueError("need at least 2 IN and 2 OUT shadows")


def origin_id(shadow_record_id: str) -> str:
    """Source id of a record inside a shadow dataset."""
    return shadow_record_id.rsplit(SHADOW_SEP, 1)[0]


def _shadow(ids, minutes, labels, tail_id, tail_minutes, tail_label) -> Cohort:
    n = len(ids) + 1
    all_ids = [*ids, tail_id]
    return Cohort(
        ids=tuple(f"{sid}{SHADOW_SEP}{slot}" for slot, sid in enumerate(all_ids)),
        minutes=np.concatenate([minutes, np.asarray(tail_minutes)[None]]),
        labels=np.append(labels, tail_label),
        year=f"shadow-{n}",
    )


def make_shadow_datasets(
    dist: DataDistribution, target: StudentRecord, n: int, config: ShadowConfig
) -> tuple[list[Cohort], list[Cohort]]:
    """IN and OUT shadow datasets of size ``n`` for one target.

    Each shadow holds n-1 draws that exclude the target; IN shadows then
    add the target in the last slot, OUT shadows a fresh non-target draw.
    """
    if n < 2:
        raise ValueError("shadow datasets need n >= 2")
    ins, outs = [], []
    for j in range(config.num_in):
        rng = rng_for(config.seed, "shadow", target.id, "in", j)
        ids, minutes, labels = dist.draw(rng, n - 1, exclude_id=target.id)
        ins.append(_shadow(ids, minutes, labels, target.id, target.minutes, target.label.index))
    for j in range(config.num_out):
        rng = rng_for(config.seed, "shadow", target.id, "out", j)
        ids, minutes, labels = dist.draw(rng, n, exclude_id=target.id)
        outs.append(_shadow(ids[:-1], minutes[:-1], labels[:-1], ids[-1], minutes[-1], labels[-1]))
    return ins, outs


# ---------------------------------------------------------------------------
# Mechanisms: anything released about the dataset


class Mechanism(Protocol):
    name: str
    dim: int

    def __call__(self, cohort: Cohort, seed: int) -> np.ndarray | None: ...


@dataclass(frozen=True)
class RequestMechanism:
    """A validation request as released under a disclosure-control policy.

    Suppressed outputs return None: nothing reaches the attacker.
    """

    request: ValidationRequest
    policy: SdcPolicy = SdcPolicy()

    @property
    def name(self) -> str:
        return self.request.id

    @property
    def dim(self) -> int:
        return self.request.dim

    def __call__(self, cohort: Cohort, seed: int) -> np.ndarray | None:
        out = run_request(self.request, cohort, self.policy, dataset="shadow")
        return out.array if out.released else None


@dataclass(frozen=True)
class DpSummaryMechanism:
    """The Stage-1 DP zero-proportion release, with fresh noise per run."""

    budget: PrivacyBudget
    name: str = "dp_summary"
    dim: int = N_WINDOWS

    def __call__(self, cohort: Cohort, seed: int) -> np.ndarray:
        return np.asarray(release_summary(cohort, self.budget, seed).zero_props)


def as_mechanism(item, policy: SdcPolicy = SdcPolicy()):
    if isinstance(item, ValidationRequest):
        return RequestMechanism(item, policy)
    if callable(item) and hasattr(item, "dim"):
        return item
    raise TypeError(f"cannot audit {item!r}")


# ---------------------------------------------------------------------------
# Gaussian likelihood-ratio attacker


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mu_in: np.ndarray
    sigma_in: np.ndarray
    mu_out: np.ndarray
    sigma_out: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu_in.size


def _floor(sigma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.maximum(sigma, np.maximum(1e-8, 1e-6 * np.abs(mu)))


def fit_output_gaussians(in_outputs, out_outputs) -> GaussianFit:
    """Per-dimension mean and population standard deviation on each side."""
    a = np.atleast_2d(np.asarray(in_outputs, dtype=float))
    b = np.atleast_2d(np.asarray(out_outputs, dtype=float))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two outputs per side")
    if a.shape[1] != b.shape[1]:
        raise ValueError("IN and OUT outputs differ in dimension")
    mu_in, mu_out = a.mean(axis=0), b.mean(axis=0)
    return GaussianFit(
        mu_in, _floor(a.std(axis=0), mu_in), mu_out, _floor(b.std(axis=0), mu_out)
    )


def _log_normal_ratio(y, mu_in, sd_in, mu_out, sd_out):
    z_in = (y - mu_in) / sd_in
    z_out = (y - mu_out) / sd_out
    return np.sum(np.log(sd_out) - np.log(sd_in) - 0.5 * z_in**2 + 0.5 * z_out**2, axis=-1)


def log_likelihood_ratio(outputs: Sequence, fits: Sequence[GaussianFit]) -> float:
    """log Lambda summed over requests and output dimensions.

    ``outputs`` holds one vector (or ``QueryOutput``) per request;
    suppressed outputs (None, or unreleased) contribute nothing.
    """
    if len(outputs) != len(fits):
        raise ValueError(f"{len(outputs)} outputs for {len(fits)} fits")
    total = 0.0
    for y, fit in zip(outputs, fits):
        if isinstance(y, QueryOutput):
            y = y.array if y.released else None
        if y is None:
            continue
        y = np.asarray(y, dtype=float).ravel()
        if y.size != fit.dim:
            raise ValueError(f"output has {y.size} dims, fit has {fit.dim}")
        total += float(_log_normal_ratio(y, fit.mu_in, fit.sigma_in, fit.mu_out, fit.sigma_out))
    return total


def _loo_moments(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out means and floored population std for each row of ``a``."""
    k = a.shape[0]
    mean = (a.sum(axis=0)[None, :] - a) / (k - 1)
    dev = (a[None, :, :] - mean[:, None, :]) ** 2
    var = (dev.sum(axis=1) - (a - mean) ** 2) / (k - 1)
    return mean, _floor(np.sqrt(np.maximum(var, 0.0)), mean)


def _side_scores(own: np.ndarray, other: np.ndarray, own_is_in: bool) -> np.ndarray:
    """Scores for rows of ``own`` with ``own`` fitted leave-one-out."""
    if own.shape[0] < 3 or other.shape[0] < 2:
        return np.zeros(own.shape[0])
    loo_mu, loo_sd = _loo_moments(own)
    o_mu = other.mean(axis=0)
    o_sd = _floor(other.std(axis=0), o_mu)
    if own_is_in:
        return _log_normal_ratio(own, loo_mu, loo_sd, o_mu, o_sd)
    return _log_normal_ratio(own, o_mu, o_sd, loo_mu, loo_sd)


def request_scores(in_outputs: Sequence, out_outputs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out log-likelihood-ratio scores of one request on every shadow.

    Suppressed outputs (None) score 0 and are left out of every fit.
    """
    def stack(outputs):
        mask = np.array([o is not None for o in outputs])
        rows = [np.asarray(o, dtype=float).ravel() for o in outputs if o is not None]
        return mask, (np.vstack(rows) if rows else np.empty((0, 0)))

    in_mask, a = stack(in_outputs)
    out_mask, b = stack(out_outputs)
    s_in = np.zeros(len(in_outputs))
    s_out = np.zeros(len(out_outputs))
    if a.shape[0] and b.shape[0]:
        s_in[in_mask] = _side_scores(a, b, own_is_in=True)
        s_out[out_mask] = _side_scores(b, a, own_is_in=False)
    return s_in, s_out


class ShadowScores(NamedTuple):
    in_scores: np.ndarray   # (R, num_in)
    out_scores: np.ndarray  # (R, num_out)


def shadow_scores(
    target: StudentRecord,
    requests: Sequence,
    dist: DataDistribution,
    n: int,
    config: ShadowConfig,
    policy: SdcPolicy = SdcPolicy(),
) -> ShadowScores:
    """Per-request leave-one-out scores for every IN and OUT shadow."""
    mechs = [as_mechanism(r, policy) for r in requests]
    ins, outs = make_shadow_datasets(dist, target, n, config)
    s_in = np.zeros((len(mechs), config.num_in))
    s_out = np.zeros((len(mechs), config.num_out))
    for r, mech in enumerate(mechs):
        y_in = [mech(d, derive_seed(config.seed, "mech", target.id, "in", j, r)) for j, d in enumerate(ins)]
        y_out = [mech(d, derive_seed(config.seed, "mech", target.id, "out", j, r)) for j, d in enumerate(outs)]
        s_in[r], s_out[r] = request_scores(y_in, y_out)
    return ShadowScores(s_in, s_out)


def curve_of_scores(in_scores, out_scores) -> TradeoffCurve:
    """Hull-enforced trade-off curve on the attainable FPR grid k / num_out.

    Interpolating the hull is the same as randomising between neighbouring
    thresholds, so tied scores give a straight segment rather than a jump.
    """
    raw = curve_from_scores(in_scores, out_scores)
    m = np.asarray(out_scores).size
    return raw.resampled(np.arange(m + 1) / m)


def empirical_curve(
    target: StudentRecord,
    requests: Sequence,
    dist: DataDistribution,
    n: int,
    config: ShadowConfig,
    policy: SdcPolicy = SdcPolicy(),
) -> TradeoffCurve:
    """Trade-off curve of the attacker who sees every output in ``requests``."""
    scores = shadow_scores(target, requests, dist, n, config, policy)
    return curve_of_scores(scores.in_scores.sum(axis=0), scores.out_scores.sum(axis=0))


def advantage(curve: TradeoffCurve) -> float:
    """Best TPR - FPR over the curve's thresholds, in [0, 1]."""
    return float(np.clip(np.max(1.0 - curve.fnr - curve.fpr), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Reporting


@dataclass(frozen=True)
class TargetRow:
    request_index: int
    nu: float
    regret: float
    advantage: float


@dataclass(frozen=True)
class AuditRow:
    request_index: int
    nu_hat: float
    regret: float
    advantage: float
    total_mu: float
    worst_target: str
    max_advantage: float


@dataclass(frozen=True)
class AuditReport:
    stage1_mu: float
    rows: tuple[AuditRow, ...]
    per_target: dict[str, tuple[TargetRow, ...]] = field(default_factory=dict)
    request_ids: tuple[str, ...] = ()

    @property
    def total_mu(self) -> float:
        return self.rows[-1].total_mu if self.rows else self.stage1_mu

    @property
    def worst_target(self) -> str | None:
        return self.rows[-1].worst_target if self.rows else None

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "stage1_mu": self.stage1_mu,
            "total_mu": self.total_mu,
            "worst_target": self.worst_target,
            "request_ids": list(self.request_ids),
            "rows": [{k: clean(v) for k, v in vars(r).items()} for r in self.rows],
            "per_target": {
                t: [{k: clean(v) for k, v in vars(r).items()} for r in rows]
                for t, rows in self.per_target.items()
            },
        }

    def write_csv(self, path: str | Path, comments: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["request_index", "nu_hat", "regret", "advantage", "total_mu"])
            for r in self.rows:
                w.writerow(
                    [r.request_index]
                    + [repr(float(v)) for v in (r.nu_hat, r.regret, r.advantage, r.total_mu)]
                )


def _target_rows(scores: ShadowScores, n_shadows: int) -> tuple[TargetRow, ...]:
    cum_in = np.cumsum(scores.in_scores, axis=0)
    cum_out = np.cumsum(scores.out_scores, axis=0)
    rows = []
    for r in range(cum_in.shape[0]):
        curve = curve_of_scores(cum_in[r], cum_out[r])
        try:
            nu, regret = fit_gwmip(curve, n_shadows)
        except TooFewPointsError:
            nu, regret = math.nan, math.nan
        rows.append(TargetRow(r + 1, nu, regret, advantage(curve)))
    return tuple(rows)


def audit_requests(
    requests: Sequence,
    dist: DataDistribution,
    n: int,
    targets: Sequence[StudentRecord],
    stage1_mu: float,
    config: ShadowConfig = ShadowConfig(),
    policy: SdcPolicy = SdcPolicy(),
    *,
    max_workers: int = 1,
) -> AuditReport:
    """Audit every prefix 1..R of ``requests`` against every candidate target.

    At each prefix the worst-case target is the one with the largest fitted
    parameter (ties broken by advantage); the total privacy parameter
    composes it with the Stage-1 guarantee.
    """
    if not targets:
        raise ValueError("at least one target is required")
    ids = tuple(as_mechanism(r, policy).name for r in requests)
    if not requests:
        return AuditReport(stage1_mu=stage1_mu, rows=(), request_ids=ids)

    def run(target):
        return _target_rows(shadow_scores(target, requests, dist, n, config, policy), config.num_out)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as ex:
            results = list(ex.map(run, targets))
    else:
        results = [run(t) for t in targets]
    per_target = {t.id: rows for t, rows in zip(targets, results)}

    def rank(item):
        nu = item[1].nu
        return (-math.inf if math.isnan(nu) else nu, item[1].advantage)

    rows = []
    for r in range(len(requests)):
        at_r = [(t.id, res[r]) for t, res in zip(targets, results)]
        worst_id, worst = max(at_r, key=rank)  # first maximum wins ties
        total = stage1_mu if math.isnan(worst.nu) else compose_gdp(stage1_mu, worst.nu)
        rows.append(
            AuditRow(
                request_index=r + 1,
                nu_hat=worst.nu,
                regret=worst.regret,
                advantage=worst.advantage,
                total_mu=total,
                worst_target=worst_id,
                max_advantage=max(row.advantage for _, row in at_r),
            )
        )
    return AuditReport(stage1_mu=stage1_mu, rows=tuple(rows), per_target=per_target, request_ids=ids)


def select_candidates(
    cohort: Cohort,
    n_far: int = 8,
    n_random: int = 8,
    seed: int = 0,
    exhaustive: bool = False,
) -> list[StudentRecord]:
    """Candidate worst-case targets.

    The ``n_far`` records farthest from their class centroid in standardised
    feature space, plus ``n_random`` others chosen uniformly.  This only
    approximates the true worst case; pass ``exhaustive=True`` for all.
    """
    records = cohort.records
    if exhaustive:
        return list(records)
    feats = feature_matrix(cohort.minutes)
    sd = feats.std(axis=0)
    z = (feats - feats.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    dist = np.zeros(cohort.n)
    for c in range(len(LABELS)):
        rows = cohort.labels == c
        if rows.any():
            dist[rows] = np.linalg.norm(z[rows] - z[rows].mean(axis=0), axis=1)
    order = np.argsort(-dist, kind="stable")
    far = list(order[:n_far])
    rest = np.setdiff1d(np.arange(cohort.n), far)
    k = min(n_random, rest.size)
    picked = np.random.default_rng(seed).choice(rest, size=k, replace=False) if k else []
    return [records[i] for i in far] + [records[i] for i in sorted(picked)]


def identity_leak_request(window: str = "evening") -> ValidationRequest:
    """A request that releases the last record's window total.

    Disclosure control blocks it under any policy with ``min_cell > 1``; it
    exists to check that the auditor detects an individual-level leak.
    """
    return ValidationRequest(
        "leak",
        QueryKind.RECORD_TOTAL,
        {"slot": -1, "window": window},
        requester="auditor",
        research_question="identity leak probe",
    )


def constant_request(value: float = 0.0) -> ValidationRequest:
    return ValidationRequest(
        "null", QueryKind.CONSTANT, {"value": value}, requester="auditor",
        research_question="null probe",
    )
