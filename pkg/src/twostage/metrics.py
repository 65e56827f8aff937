"""Utility metrics: binned Jensen-Shannon divergence, AJS, and EPrec."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import LABELS, N_FEATURES, Cohort, feature_matrix

EPREC_SCALE = (0.0, 0.5, 1.0)


class EmptyClassError(ValueError):
    pass


@dataclass(frozen=True)
class BinningSpec:
    bins: int = 20
    smoothing: float = 1e-10
    log_base: float = 2.0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")


def js_from_histograms(p, q, log_base: float = 2.0) -> float:
    """JS divergence between two (unnormalised) histograms on the same bins."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    js = (0.5 * kl(p) + 0.5 * kl(q)) / np.log(log_base)
    # bounded by log_base(2); clip rounding noise only
    return float(np.clip(js, 0.0, np.log(2) / np.log(log_base)))


def js_divergence(p_samples, q_samples, spec: BinningSpec = BinningSpec()) -> float:
    """JS divergence of two samples over shared equal-width bins.

    Bins span the pooled min/max of both samples; every bin receives
    ``spec.smoothing`` pseudo-mass before normalisation.
    """
    p = np.asarray(p_samples, dtype=float).ravel()
    q = np.asarray(q_samples, dtype=float).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("both samples must be nonempty")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if hi == lo:
        return 0.0
    hp, _ = np.histogram(p, bins=spec.bins, range=(lo, hi))
    hq, _ = np.histogram(q, bins=spec.bins, range=(lo, hi))
    hp = hp / p.size + spec.smoothing
    hq = hq / q.size + spec.smoothing
    return js_from_histograms(hp, hq, spec.log_base)


def ajs(real: Cohort, synthetic: Cohort, spec: BinningSpec = BinningSpec()) -> float:
    """Average over classes and the 24 summary features of the per-feature JS."""
    fr = feature_matrix(real.minutes)
    fs = feature_matrix(synthetic.minutes)
    per_class = []
    for c, label in enumerate(LABELS):
        r_rows = fr[real.labels == c]
        s_rows = fs[synthetic.labels == c]
        if r_rows.shape[0] == 0 or s_rows.shape[0] == 0:
            raise EmptyClassError(f"class {label.value} is empty in one cohort")
        per_class.append(
            np.mean([js_divergence(r_rows[:, d], s_rows[:, d], spec) for d in range(N_FEATURES)])
        )
    return float(np.mean(per_class))


@dataclass(frozen=True)
class EprecRecord:
    request_id: str
    score: float

    def __post_init__(self):
        if self.score not in EPREC_SCALE:
            raise ValueError(f"EPrec score must be one of {EPREC_SCALE}, got {self.score}")


@dataclass(frozen=True)
class EprecSummary:
    per_group: dict[str, Fraction]
    counts: dict[str, int]
    overall: Fraction

    def as_floats(self) -> dict[str, float]:
        return {g: float(v) for g, v in self.per_group.items()} | {"overall": float(self.overall)}


def eprec_aggregate(records: Sequence[EprecRecord], grouping: Sequence[str]) -> EprecSummary:
    """Per-dataset mean EPrec and the request-weighted overall mean.

    Arithmetic is exact on the {0, 0.5, 1} scale.
    """
    if not records:
        raise ValueError("no EPrec records")
    if len(grouping) != len(records):
        raise ValueError("grouping must give one dataset tag per record")
    sums: dict[str, Fraction] = {}
    counts: dict[str, int] = {}
    for rec, group in zip(records, grouping):
        sums[group] = sums.get(group, Fraction(0)) + Fraction(rec.score)
        counts[group] = counts.get(group, 0) + 1
    total = sum(sums.values(), Fraction(0))
    return EprecSummary(
        per_group={g: sums[g] / counts[g] for g in sums},
        counts=counts,
        overall=total / len(records),
    )


def eprec_records_from_counts(
    counts: dict[str, tuple[int, int, int]]
) -> tuple[list[EprecRecord], list[str]]:
    """Expand per-dataset counts of (0.0, 0.5, 1.0) scores into records."""
    records, groups = [], []
    for group, per_score in counts.items():
        i = 0
        for score, k in zip(EPREC_SCALE, per_score):
            for _ in range(k):
                records.append(EprecRecord(f"{group}-{i}", score))
                groups.append(group)
                i += 1
    return records, groups


def write_ajs_csv(rows: Iterable[tuple[str, str, float]], path: str | Path, comments=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "ajs"])
        for dataset, method, value in rows:
            w.writerow([dataset, method, repr(float(value))])
