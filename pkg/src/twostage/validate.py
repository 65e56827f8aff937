"""Real-data validation: typed query catalog, disclosure control, feedback.

Researchers submit ``ValidationRequest`` objects instead of arbitrary code.
Each kind has a fixed output dimension; every output passes ``sdc_check``
before any value leaves ``run_request``.  New kinds are added by extending
``QueryKind`` and ``_evaluate``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .cohort import LABELS, WINDOWS, Cohort, as_label, as_window


class RequestError(ValueError):
    pass


class KindMismatch(ValueError):
    pass


class QueryKind(str, enum.Enum):
    WEEKLY_MEAN_CURVE = "weekly_mean_curve"
    WINDOW_LABEL_MEANS = "window_label_means"
    ZERO_PROFILE = "zero_profile"
    TOTAL_MINUTES_LABEL_CORRELATION = "total_minutes_label_correlation"
    OLS_OUTCOME_ON_WINDOW_TOTALS = "ols_outcome_on_window_totals"
    # per-group maxima; refused while extrema are forbidden
    WINDOW_LABEL_MAX = "window_label_max"
    # one record's window total; an individual-level probe for audits
    RECORD_TOTAL = "record_total"
    # data-independent output; null probe for auditor calibration
    CONSTANT = "constant"

    @property
    def dim(self) -> int:
        return _DIMS[self]

    @property
    def statistic(self) -> str:
        return _STATISTIC[self]


_DIMS = {
    QueryKind.WEEKLY_MEAN_CURVE: 17,
    QueryKind.WINDOW_LABEL_MEANS: 12,
    QueryKind.ZERO_PROFILE: 4,
    QueryKind.TOTAL_MINUTES_LABEL_CORRELATION: 1,
    QueryKind.OLS_OUTCOME_ON_WINDOW_TOTALS: 5,
    QueryKind.WINDOW_LABEL_MAX: 12,
    QueryKind.RECORD_TOTAL: 1,
    QueryKind.CONSTANT: 1,
}
_STATISTIC = {
    QueryKind.WEEKLY_MEAN_CURVE: "mean",
    QueryKind.WINDOW_LABEL_MEANS: "mean",
    QueryKind.ZERO_PROFILE: "zero_prop",
    QueryKind.TOTAL_MINUTES_LABEL_CORRELATION: "correlation",
    QueryKind.OLS_OUTCOME_ON_WINDOW_TOTALS: "coefficient",
    QueryKind.WINDOW_LABEL_MAX: "max",
    QueryKind.RECORD_TOTAL: "value",
    QueryKind.CONSTANT: "constant",
}
_REQUIRED = {
    QueryKind.WEEKLY_MEAN_CURVE: ("label", "window"),
    QueryKind.RECORD_TOTAL: ("slot", "window"),
}
EXTREMA = frozenset({"max", "min"})


@dataclass(frozen=True)
class ValidationRequest:
    id: str
    kind: QueryKind
    params: Mapping[str, object] = field(default_factory=dict)
    requester: str = ""
    research_question: str = ""

    def __post_init__(self):
        try:
            kind = QueryKind(self.kind)
        except ValueError:
            raise RequestError(f"unknown query kind {self.kind!r}") from None
        params = dict(self.params)
        missing = [p for p in _REQUIRED.get(kind, ()) if p not in params]
        if missing:
            raise RequestError(f"request {self.id}: {kind.value} needs {missing}")
        try:
            if "label" in params:
                params["label"] = as_label(params["label"]).value
            if "window" in params:
                params["window"] = as_window(params["window"]).value
            if "slot" in params:
                params["slot"] = int(params["slot"])
            if "value" in params:
                params["value"] = float(params["value"])
        except (ValueError, IndexError, TypeError) as exc:
            raise RequestError(f"request {self.id}: {exc}") from None
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "id", str(self.id))

    @property
    def dim(self) -> int:
        return self.kind.dim

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "params": dict(self.params),
            "requester": self.requester,
            "research_question": self.research_question,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValidationRequest":
        return cls(
            id=d["id"],
            kind=d["kind"],
            params=d.get("params", {}),
            requester=d.get("requester", ""),
            research_question=d.get("research_question", ""),
        )


@dataclass(frozen=True)
class SdcPolicy:
    min_cell: int = 5
    rounding: int = 4
    forbid_extrema: bool = True

    def __post_init__(self):
        if self.min_cell < 1:
            raise ValueError("min_cell must be >= 1")
        if self.rounding < 0:
            raise ValueError("rounding must be >= 0")


@dataclass(frozen=True)
class SdcVerdict:
    accepted: bool
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class QueryOutput:
    """Result of one request on one dataset.

    ``values`` is None when disclosure control suppressed the output.
    """

    request_id: str
    kind: QueryKind
    values: tuple[float, ...] | None
    dataset: str = "real"
    sdc: SdcVerdict | None = None
    params: Mapping[str, object] = field(default_factory=dict)

    @property
    def released(self) -> bool:
        return self.sdc is not None and self.sdc.accepted and self.values is not None

    @property
    def array(self) -> np.ndarray:
        if self.values is None:
            raise ValueError(f"output of {self.request_id} was suppressed")
        return np.asarray(self.values, dtype=float)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "kind": self.kind.value,
            "values": None if self.values is None else list(self.values),
            "dataset": self.dataset,
            "sdc": None if self.sdc is None else asdict(self.sdc),
            "params": dict(self.params),
        }


def load_requests(path: str | Path) -> tuple[list[ValidationRequest], SdcPolicy | None]:
    """Read a requests file: a JSON list, or {"requests": [...], "sdc_policy": {...}}."""
    doc = json.loads(Path(path).read_text())
    policy = None
    if isinstance(doc, dict):
        if "sdc_policy" in doc:
            policy = SdcPolicy(**doc["sdc_policy"])
        doc = doc.get("requests", [])
    requests = [ValidationRequest.from_dict(d) for d in doc]
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise RequestError("duplicate request id")
    return requests, policy


# ---------------------------------------------------------------------------
# Query evaluation


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry) / denom if denom > 0 else 0.0


def _evaluate(request: ValidationRequest, cohort: Cohort) -> tuple[np.ndarray, list[int]]:
    """Raw query values and the sizes of every group they aggregate."""
    kind, p = request.kind, request.params
    x = cohort.minutes
    counts = [int(c) for c in cohort.label_counts()]
    n = cohort.n
    with np.errstate(invalid="ignore", divide="ignore"):
        if kind is QueryKind.WEEKLY_MEAN_CURVE:
            c = as_label(p["label"]).index
            w = as_window(p["window"]).index
            rows = x[cohort.labels == c, w, :]
            values = rows.mean(axis=0) if rows.shape[0] else np.full(17, np.nan)
            return values, [rows.shape[0]]
        if kind is QueryKind.WINDOW_LABEL_MEANS or kind is QueryKind.WINDOW_LABEL_MAX:
            reduce = np.mean if kind is QueryKind.WINDOW_LABEL_MEANS else np.max
            out = np.full((len(LABELS), len(WINDOWS)), np.nan)
            for c in range(len(LABELS)):
                rows = x[cohort.labels == c]
                if rows.shape[0]:
                    out[c] = reduce(rows, axis=(0, 2))
            return out.ravel(), counts
        if kind is QueryKind.ZERO_PROFILE:
            return (x == 0).mean(axis=(0, 2)), [n]
        if kind is QueryKind.TOTAL_MINUTES_LABEL_CORRELATION:
            totals = x.sum(axis=(1, 2))
            return np.array([_spearman(totals, cohort.labels + 1)]), [n]
        if kind is QueryKind.OLS_OUTCOME_ON_WINDOW_TOTALS:
            design = np.column_stack([x.sum(axis=2).astype(float), np.ones(n)])
            coef, *_ = np.linalg.lstsq(design, (cohort.labels + 1).astype(float), rcond=None)
            return coef, [n]
        if kind is QueryKind.RECORD_TOTAL:
            slot = int(p["slot"])
            if not -n <= slot < n:
                raise RequestError(f"request {request.id}: slot {slot} outside cohort")
            return np.array([float(x[slot, as_window(p["window"]).index].sum())]), [1]
        if kind is QueryKind.CONSTANT:
            return np.array([float(p.get("value", 0.0))]), [n]
    raise RequestError(f"no evaluator for {kind}")


def sdc_check(output: QueryOutput, group_sizes: Sequence[int], policy: SdcPolicy) -> SdcVerdict:
    """Disclosure-control verdict for an unchecked output."""
    reasons = []
    small = sorted({int(g) for g in group_sizes if g < policy.min_cell})
    if small:
        reasons.append(f"group size {small[0]} below min_cell {policy.min_cell}")
    if policy.forbid_extrema and output.kind.statistic in EXTREMA:
        reasons.append(f"per-group {output.kind.statistic} is an individual value")
    if output.values is None or not all(math.isfinite(v) for v in output.values):
        reasons.append("non-finite output")
    return SdcVerdict(accepted=not reasons, reasons=tuple(reasons))


class ProvenanceLog:
    """Append-only record of executed requests, optionally mirrored to JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(line + "\n")


def run_request(
    request: ValidationRequest,
    cohort: Cohort,
    policy: SdcPolicy = SdcPolicy(),
    *,
    dataset: str = "real",
    log: ProvenanceLog | None = None,
) -> QueryOutput:
    """Evaluate a request, apply disclosure control, round, and log it."""
    raw, groups = _evaluate(request, cohort)
    unchecked = QueryOutput(
        request.id, request.kind, tuple(float(v) for v in raw), dataset, params=request.params
    )
    verdict = sdc_check(unchecked, groups, policy)
    values = None
    if verdict.accepted:
        values = tuple(float(v) + 0.0 for v in np.round(raw, policy.rounding))
    out = replace(unchecked, values=values, sdc=verdict)
    if log is not None:
        digest = None
        if values is not None:
            digest = hashlib.sha256(json.dumps(values).encode()).hexdigest()[:16]
        log.append(
            {
                "request_id": request.id,
                "requester": request.requester,
                "kind": request.kind.value,
                "params": dict(request.params),
                "dataset": dataset,
                "cohort_year": cohort.year,
                "policy": asdict(policy),
                "accepted": verdict.accepted,
                "reasons": list(verdict.reasons),
                "values_sha256": digest,
            }
        )
    return out


# ---------------------------------------------------------------------------
# Feedback

FeatureKey = tuple[str, str, str]  # (label or "all", window, statistic)


def _render(deltas: Mapping[FeatureKey, float], top: int = 3) -> tuple[str, ...]:
    ranked = sorted(
        ((k, d) for k, d in deltas.items() if abs(d) > 1e-12),
        key=lambda kd: (-abs(kd[1]), kd[0]),
    )
    lines = []
    for (label, window, stat), d in ranked[:top]:
        who = "all students" if label == "all" else f"{label} achievers"
        direction = "above" if d > 0 else "below"
        lines.append(
            f"{window} {stat.replace('_', ' ')} for {who}: synthetic is "
            f"{abs(d):.0%} {direction} real; {'lower' if d > 0 else 'raise'} it"
        )
    return tuple(lines)


@dataclass(frozen=True)
class FeedbackNote:
    cycle: int
    per_feature_deltas: Mapping[FeatureKey, float]
    rendered_text: tuple[str, ...] = ()

    @classmethod
    def from_deltas(cls, cycle: int, deltas: Mapping[FeatureKey, float]) -> "FeedbackNote":
        clean = {tuple(k): float(v) for k, v in sorted(deltas.items())}
        if not all(math.isfinite(v) for v in clean.values()):
            raise ValueError("feedback deltas must be finite")
        return cls(cycle, clean, _render(clean))

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "deltas": [
                {"label": k[0], "window": k[1], "statistic": k[2], "delta": v}
                for k, v in self.per_feature_deltas.items()
            ],
            "text": list(self.rendered_text),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeedbackNote":
        deltas = {(e["label"], e["window"], e["statistic"]): e["delta"] for e in d["deltas"]}
        return cls.from_deltas(int(d["cycle"]), deltas)


def relative_delta(synthetic: float, real: float, cap: float = 10.0) -> float:
    """Signed (synthetic - real) / |real|, bounded to +-cap."""
    diff = synthetic - real
    if abs(real) > 1e-9:
        rel = diff / abs(real)
    elif abs(diff) <= 1e-9:
        rel = 0.0
    else:
        rel = math.copysign(cap, diff)
    return float(np.clip(rel, -cap, cap))


def _feature_keys(request_kind: QueryKind) -> list[FeatureKey] | None:
    if request_kind is QueryKind.WINDOW_LABEL_MEANS:
        return [(c.value, w.value, "mean") for c in LABELS for w in WINDOWS]
    if request_kind is QueryKind.WINDOW_LABEL_MAX:
        return [(c.value, w.value, "max") for c in LABELS for w in WINDOWS]
    if request_kind is QueryKind.ZERO_PROFILE:
        return [("all", w.value, "zero_prop") for w in WINDOWS]
    return None


def discrepancy_report(
    synthetic_out: QueryOutput, real_out: QueryOutput, cycle: int = 0
) -> FeedbackNote:
    """Relative differences between a request's synthetic and real outputs.

    Dimensions are mapped to (label, window, statistic) features where the
    kind allows; a weekly mean curve collapses to one (label, window, mean)
    entry.  Correlation and regression outputs carry no feature mapping.
    """
    if synthetic_out.kind is not real_out.kind or synthetic_out.request_id != real_out.request_id:
        raise KindMismatch(
            f"cannot compare {synthetic_out.request_id}/{synthetic_out.kind.value} "
            f"with {real_out.request_id}/{real_out.kind.value}"
        )
    if not (synthetic_out.released and real_out.released):
        return FeedbackNote.from_deltas(cycle, {})
    syn, real = synthetic_out.array, real_out.array
    kind, params = real_out.kind, real_out.params
    if kind is QueryKind.WEEKLY_MEAN_CURVE:
        key = (as_label(params["label"]).value, as_window(params["window"]).value, "mean")
        return FeedbackNote.from_deltas(cycle, {key: relative_delta(syn.sum(), real.sum())})
    keys = _feature_keys(kind)
    if keys is None:
        return FeedbackNote.from_deltas(cycle, {})
    return FeedbackNote.from_deltas(
        cycle, {k: relative_delta(s, r) for k, s, r in zip(keys, syn, real)}
    )


def merge_feedback(notes: Iterable[FeedbackNote], cycle: int) -> FeedbackNote:
    """Average deltas that several requests report for the same feature."""
    sums: dict[FeatureKey, list[float]] = {}
    for note in notes:
        for k, v in note.per_feature_deltas.items():
            sums.setdefault(k, []).append(v)
    return FeedbackNote.from_deltas(cycle, {k: float(np.mean(v)) for k, v in sums.items()})


def default_requests() -> list[ValidationRequest]:
    """Five correlational requests in the spirit of time-of-day habit studies."""
    return [
        ValidationRequest(
            "r1", QueryKind.WINDOW_LABEL_MEANS, {}, "P1",
            "How does time-of-day study volume differ by achievement?",
        ),
        ValidationRequest(
            "r2", QueryKind.WEEKLY_MEAN_CURVE, {"label": "high", "window": "evening"}, "P2",
            "How do high achievers' evening habits evolve over the semester?",
        ),
        ValidationRequest(
            "r3", QueryKind.ZERO_PROFILE, {}, "P3",
            "How often do students skip a window entirely?",
        ),
        ValidationRequest(
            "r4", QueryKind.TOTAL_MINUTES_LABEL_CORRELATION, {}, "P1",
            "Is total study time associated with achievement?",
        ),
        ValidationRequest(
            "r5", QueryKind.OLS_OUTCOME_ON_WINDOW_TOTALS, {}, "P2",
            "Which time windows predict achievement?",
        ),
    ]
