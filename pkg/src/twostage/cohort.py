"""Cohort data model: weekly study minutes per time-of-day window.

Each student contributes a 4 x 17 grid of integer minutes (windows x weeks)
and a three-class achievement label.  Cohorts are stored array-backed so
that resampling and query evaluation stay cheap; ``Cohort.records`` gives
the per-student view.
"""

from __future__ import annotations

import csv
import enum
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_WEEKS = 17
N_WINDOWS = 4
STATISTICS = ("median", "mean", "std", "var", "max", "rms")
N_FEATURES = N_WINDOWS * len(STATISTICS)


class CohortError(ValueError):
    """Malformed cohort input: parse failure, missing or duplicate cells."""


class CapViolation(CohortError):
    """A cell is negative or above its window's weekly cap."""


class TimeWindow(str, enum.Enum):
    OVERNIGHT = "overnight"
    MORNING = "morning"
    AFTERNOON = "afternoon"
    EVENING = "evening"

    @property
    def index(self) -> int:
        return _WINDOW_ORDER.index(self)

    @property
    def span(self) -> tuple[int, int]:
        """First and last clock hour covered (inclusive)."""
        return _SPANS[self]

    @property
    def cap(self) -> int:
        return int(CAPS[self.index])


_WINDOW_ORDER = (
    TimeWindow.OVERNIGHT,
    TimeWindow.MORNING,
    TimeWindow.AFTERNOON,
    TimeWindow.EVENING,
)
WINDOWS = _WINDOW_ORDER
_SPANS = {
    TimeWindow.OVERNIGHT: (0, 4),
    TimeWindow.MORNING: (5, 11),
    TimeWindow.AFTERNOON: (12, 16),
    TimeWindow.EVENING: (17, 23),
}
CAPS = np.array([300, 420, 300, 420], dtype=np.int64)
CAPS.setflags(write=False)


class AchievementLabel(str, enum.Enum):
    LOW = "low"
    AVERAGE = "average"
    HIGH = "high"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @property
    def code(self) -> int:
        """Ordinal encoding 1/2/3 used by regression-style queries."""
        return self.index + 1


LABELS = (AchievementLabel.LOW, AchievementLabel.AVERAGE, AchievementLabel.HIGH)


def as_window(w: TimeWindow | str | int) -> TimeWindow:
    if isinstance(w, (int, np.integer)):
        return WINDOWS[int(w)]
    return TimeWindow(w)


def as_label(label: AchievementLabel | str | int) -> AchievementLabel:
    if isinstance(label, (int, np.integer)):
        return LABELS[int(label)]
    return AchievementLabel(label)


def check_minutes(minutes: np.ndarray) -> None:
    """Raise ``CapViolation`` if any cell of a (..., 4, 17) array is out of range."""
    if minutes.shape[-2:] != (N_WINDOWS, N_WEEKS):
        raise CohortError(f"expected trailing shape (4, 17), got {minutes.shape}")
    if np.any(minutes < 0):
        raise CapViolation("negative minutes")
    over = minutes > CAPS[:, None]
    if np.any(over):
        idx = tuple(int(i) for i in np.argwhere(over)[0])
        w = WINDOWS[idx[-2]]
        raise CapViolation(
            f"{int(minutes[idx])} minutes in {w.value} week {idx[-1] + 1} "
            f"exceeds cap {w.cap}"
        )


def _as_minutes_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise CohortError("minutes must be integers")
    elif arr.dtype.kind not in "iu":
        raise CohortError(f"minutes must be numeric, got dtype {arr.dtype}")
    return arr.astype(np.int64)


@dataclass(frozen=True, eq=False)
class StudentRecord:
    id: str
    minutes: np.ndarray
    label: AchievementLabel

    def __post_init__(self):
        arr = _as_minutes_array(self.minutes)
        if arr.shape != (N_WINDOWS, N_WEEKS):
            raise CohortError(f"record {self.id}: grid shape {arr.shape} != (4, 17)")
        check_minutes(arr)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "minutes", arr)
        object.__setattr__(self, "label", as_label(self.label))
        object.__setattr__(self, "id", str(self.id))

    def __eq__(self, other):
        if not isinstance(other, StudentRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.minutes, other.minutes)
        )

    def __hash__(self):
        return hash((self.id, self.label, self.minutes.tobytes()))


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable cohort of ``n`` students.

    ``minutes`` has shape (n, 4, 17); ``labels`` holds label indices 0..2.
    """

    ids: tuple[str, ...]
    minutes: np.ndarray
    labels: np.ndarray
    year: str = ""

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        minutes = _as_minutes_array(self.minutes)
        labels = np.asarray(self.labels, dtype=np.int64)
        if minutes.ndim != 3:
            raise CohortError(f"minutes must be (n, 4, 17), got {minutes.shape}")
        n = minutes.shape[0]
        if n < 1:
            raise CohortError("cohort must contain at least one record")
        if len(ids) != n or labels.shape != (n,):
            raise CohortError("ids, minutes and labels disagree on n")
        if len(set(ids)) != n:
            raise CohortError("duplicate student id")
        if np.any((labels < 0) | (labels >= len(LABELS))):
            raise CohortError("label index out of range")
        check_minutes(minutes)
        minutes = minutes.copy()
        labels = labels.copy()
        minutes.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "minutes", minutes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "year", str(self.year))

    @classmethod
    def from_records(cls, records: Iterable[StudentRecord], year: str = "") -> "Cohort":
        records = list(records)
        if not records:
            raise CohortError("cohort must contain at least one record")
        return cls(
            ids=tuple(r.id for r in records),
            minutes=np.stack([r.minutes for r in records]),
            labels=np.array([r.label.index for r in records]),
            year=year,
        )

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n

    @functools.cached_property
    def records(self) -> tuple[StudentRecord, ...]:
        return tuple(
            StudentRecord(i, m, LABELS[lab])
            for i, m, lab in zip(self.ids, self.minutes, self.labels)
        )

    def record(self, student_id: str) -> StudentRecord:
        return self.records[self.ids.index(student_id)]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(LABELS))

    def subset(self, indices: Sequence[int], year: str | None = None) -> "Cohort":
        idx = np.asarray(indices, dtype=np.int64)
        return Cohort(
            ids=tuple(self.ids[i] for i in idx),
            minutes=self.minutes[idx],
            labels=self.labels[idx],
            year=self.year if year is None else year,
        )

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.year == other.year
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.minutes, other.minutes)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# Labels and features


def bin_scores(scores: Sequence[float]) -> list[AchievementLabel]:
    """Split scores into low/average/high tertiles by rank.

    Ties keep their input order, so ``[5, 5, 5]`` maps to one student per
    class.  Class sizes differ by at most one.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("bin_scores needs a nonempty 1-d list of scores")
    n = s.size
    order = np.argsort(s, kind="stable")
    classes = np.empty(n, dtype=np.int64)
    classes[order] = (3 * np.arange(n)) // n
    return [LABELS[c] for c in classes]


def feature_matrix(minutes: np.ndarray) -> np.ndarray:
    """Per-window summary statistics for a stack of (4, 17) grids.

    Returns an (n, 24) array ordered window-major (overnight, morning,
    afternoon, evening), statistic-minor (median, mean, std, var, max, rms).
    Standard deviation uses the population denominator.
    """
    x = np.asarray(minutes, dtype=float)
    if x.ndim == 2:
        x = x[None]
    mean = x.mean(axis=2)
    var = x.var(axis=2)
    stats = np.stack(
        [
            np.median(x, axis=2),
            mean,
            np.sqrt(var),
            var,
            x.max(axis=2),
            np.sqrt(np.mean(x * x, axis=2)),
        ],
        axis=2,
    )
    return stats.reshape(x.shape[0], N_FEATURES)


def feature_vector(record: StudentRecord) -> np.ndarray:
    return feature_matrix(record.minutes)[0]


def feature_names() -> list[str]:
    return [f"{w.value}_{s}" for w in WINDOWS for s in STATISTICS]


# ---------------------------------------------------------------------------
# Zero-inflated gamma ground truth


def sample_minutes(
    rng: np.random.Generator,
    count: int,
    zero_prob: np.ndarray,
    shape: np.ndarray,
    scale: np.ndarray,
    student_shape: float | None = None,
) -> np.ndarray:
    """Draw ``count`` grids of zero-inflated gamma minutes.

    Each cell is zero with its window's probability; otherwise a gamma draw,
    rounded and clamped to [1, cap].  ``student_shape`` adds a per-student
    gamma activity multiplier with mean 1 (smaller means heavier tails).
    """
    zero_prob = np.asarray(zero_prob, dtype=float)[None, :, None]
    shape = np.asarray(shape, dtype=float)[None, :, None]
    scale = np.asarray(scale, dtype=float)[None, :, None]
    size = (count, N_WINDOWS, N_WEEKS)
    if student_shape:
        activity = rng.gamma(student_shape, 1.0 / student_shape, size=(count, 1, 1))
    else:
        activity = np.ones((count, 1, 1))
    is_zero = rng.random(size) < zero_prob
    positive = rng.gamma(np.broadcast_to(shape, size), np.broadcast_to(scale * activity, size))
    cells = np.clip(np.rint(positive), 1, CAPS[None, :, None])
    cells[is_zero] = 0
    return cells.astype(np.int64)


def _param_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape == (N_WINDOWS,):
        arr = np.tile(arr, (len(LABELS), 1))
    if arr.shape != (len(LABELS), N_WINDOWS):
        raise ValueError(f"{name} must have shape (3, 4), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GroundTruthConfig:
    """Per-label, per-window zero-inflated gamma parameters.

    Arrays are indexed ``[label, window]`` in ``LABELS`` x ``WINDOWS`` order.
    """

    zero_prob: np.ndarray
    shape: np.ndarray
    scale: np.ndarray
    student_shape: float | None = 3.0

    def __post_init__(self):
        for name in ("zero_prob", "shape", "scale"):
            object.__setattr__(self, name, _param_array(getattr(self, name), name))
        if np.any((self.zero_prob < 0) | (self.zero_prob > 1)) or not np.all(
            np.isfinite(self.zero_prob)
        ):
            raise ValueError("zero probabilities must lie in [0, 1]")
        if np.any(~(self.shape > 0)) or np.any(~(self.scale > 0)):
            raise ValueError("gamma shape and scale must be positive")
        if self.student_shape is not None and not self.student_shape > 0:
            raise ValueError("student_shape must be positive or None")

    @classmethod
    def default(cls) -> "GroundTruthConfig":
        # high achievers study more in the evening and morning
        return cls(
            zero_prob=[
                [0.93, 0.60, 0.65, 0.50],
                [0.91, 0.52, 0.58, 0.40],
                [0.88, 0.45, 0.52, 0.30],
            ],
            shape=[
                [1.0, 1.2, 1.2, 1.4],
                [1.0, 1.3, 1.2, 1.5],
                [1.0, 1.4, 1.3, 1.6],
            ],
            scale=[
                [12.0, 22.0, 18.0, 28.0],
                [14.0, 28.0, 22.0, 38.0],
                [16.0, 34.0, 26.0, 52.0],
            ],
        )

    def scaled(self, factor: float) -> "GroundTruthConfig":
        """Copy with every positive-part scale multiplied by ``factor``."""
        return GroundTruthConfig(
            self.zero_prob, self.shape, self.scale * factor, self.student_shape
        )

    def to_dict(self) -> dict:
        return {
            "zero_prob": self.zero_prob.tolist(),
            "shape": self.shape.tolist(),
            "scale": self.scale.tolist(),
            "student_shape": self.student_shape,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthConfig":
        base = cls.default()
        return cls(
            zero_prob=d.get("zero_prob", base.zero_prob),
            shape=d.get("shape", base.shape),
            scale=d.get("scale", base.scale),
            student_shape=d.get("student_shape", base.student_shape),
        )


def generate_ground_truth(
    config: GroundTruthConfig, n: int, seed: int, year: str = ""
) -> Cohort:
    """Deterministic stand-in cohort with evenly sized label classes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = (3 * np.arange(n)) // n
    minutes = np.empty((n, N_WINDOWS, N_WEEKS), dtype=np.int64)
    for c in range(len(LABELS)):
        rows = np.flatnonzero(labels == c)
        minutes[rows] = sample_minutes(
            rng,
            rows.size,
            config.zero_prob[c],
            config.shape[c],
            config.scale[c],
            config.student_shape,
        )
    ids = tuple(f"s{i:04d}" for i in range(n))
    return Cohort(ids=ids, minutes=minutes, labels=labels, year=year)


# ---------------------------------------------------------------------------
# File formats


def labels_path_for(path: Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_labels.csv")


def _data_lines(fh) -> Iterable[str]:
    return (line for line in fh if not line.startswith("#"))


def _write_comments(fh, comments: Sequence[str]) -> None:
    for line in comments:
        fh.write(f"# {line}\n")


def save_cohort(
    cohort: Cohort,
    path: str | Path,
    fmt: str = "tensor-json",
    *,
    labels_path: str | Path | None = None,
    meta: dict | None = None,
) -> None:
    """Write ``cohort`` as ``long-csv`` (plus label sidecar) or ``tensor-json``.

    ``meta`` is recorded as ``# key=value`` comment lines in CSV files and as
    a ``meta`` object in JSON.
    """
    path = Path(path)
    comments = [f"{k}={v}" for k, v in sorted((meta or {}).items())]
    if fmt == "long-csv":
        with open(path, "w", newline="") as fh:
            _write_comments(fh, comments)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "window", "week", "minutes"])
            for sid, grid in zip(cohort.ids, cohort.minutes):
                for wi, window in enumerate(WINDOWS):
                    for week in range(N_WEEKS):
                        w.writerow([sid, window.value, week + 1, int(grid[wi, week])])
        lp = Path(labels_path) if labels_path else labels_path_for(path)
        with open(lp, "w", newline="") as fh:
            _write_comments(fh, comments)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "label"])
            for sid, lab in zip(cohort.ids, cohort.labels):
                w.writerow([sid, LABELS[lab].value])
    elif fmt == "tensor-json":
        doc = {
            "shape": list(cohort.minutes.shape),
            "data": cohort.minutes.ravel().tolist(),
            "labels": [LABELS[i].value for i in cohort.labels],
            "ids": list(cohort.ids),
            "year": cohort.year,
        }
        if meta:
            doc["meta"] = meta
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown cohort format {fmt!r}")


def load_cohort(
    path: str | Path,
    fmt: str = "tensor-json",
    *,
    labels_path: str | Path | None = None,
    year: str | None = None,
    label: AchievementLabel | str | None = None,
    id_prefix: str = "r",
) -> Cohort:
    """Read and validate a cohort file.

    For ``tensor-json`` output of external generators, which carries no
    labels, pass ``label`` to assign one class to every record.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "long-csv":
        return _load_long_csv(path, Path(labels_path) if labels_path else None, year)
    if fmt == "tensor-json":
        return _load_tensor_json(path, year, label, id_prefix)
    raise ValueError(f"unknown cohort format {fmt!r}")


def _load_long_csv(path: Path, labels_path: Path | None, year: str | None) -> Cohort:
    cells: dict[str, dict[tuple[int, int], int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        needed = {"student_id", "window", "week", "minutes"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise CohortError(f"{path}: header must contain {sorted(needed)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                w = TimeWindow(row["window"].strip()).index
                week = int(row["week"])
                value = int(row["minutes"])
            except (ValueError, AttributeError) as exc:
                raise CohortError(f"{path}:{lineno}: {exc}") from None
            if not 1 <= week <= N_WEEKS:
                raise CohortError(f"{path}:{lineno}: week {week} outside 1..17")
            grid = cells.setdefault(row["student_id"], {})
            if (w, week) in grid:
                raise CohortError(
                    f"{path}:{lineno}: duplicate cell for {row['student_id']}"
                )
            grid[(w, week)] = value
    if not cells:
        raise CohortError(f"{path}: no records")
    ids = list(cells)
    minutes = np.zeros((len(ids), N_WINDOWS, N_WEEKS), dtype=np.int64)
    for i, sid in enumerate(ids):
        grid = cells[sid]
        if len(grid) != N_WINDOWS * N_WEEKS:
            raise CohortError(f"{path}: student {sid} has {len(grid)} of 68 cells")
        for (w, week), v in grid.items():
            minutes[i, w, week - 1] = v

    lp = labels_path or labels_path_for(path)
    if not lp.exists():
        raise CohortError(f"label sidecar {lp} not found")
    label_of: dict[str, int] = {}
    with open(lp, newline="") as fh:
        for row in csv.DictReader(_data_lines(fh)):
            sid = row.get("student_id")
            if sid in label_of:
                raise CohortError(f"{lp}: duplicate id {sid}")
            try:
                label_of[sid] = AchievementLabel(row["label"].strip()).index
            except (ValueError, KeyError, AttributeError) as exc:
                raise CohortError(f"{lp}: {exc}") from None
    missing = [sid for sid in ids if sid not in label_of]
    if missing or len(label_of) != len(ids):
        raise CohortError(f"{lp}: labels do not match students (missing {missing[:3]})")
    labels = np.array([label_of[sid] for sid in ids])
    return Cohort(ids=tuple(ids), minutes=minutes, labels=labels, year=year or "")


def _load_tensor_json(path: Path, year, label, id_prefix) -> Cohort:
    try:
        doc = json.loads(path.read_text())
        shape = [int(s) for s in doc["shape"]]
        data = doc["data"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CohortError(f"{path}: not a tensor-json document ({exc})") from None
    if len(shape) != 3 or shape[1:] != [N_WINDOWS, N_WEEKS]:
        raise CohortError(f"{path}: shape {shape} != [N, 4, 17]")
    arr = np.asarray(data)
    if arr.ndim > 1:
        if list(arr.shape) != shape:
            raise CohortError(f"{path}: data shape {list(arr.shape)} != {shape}")
    elif arr.size != int(np.prod(shape)):
        raise CohortError(f"{path}: {arr.size} values for shape {shape}")
    minutes = _as_minutes_array(arr).reshape(shape)
    return cohort_from_tensor(
        minutes,
        labels=doc.get("labels"),
        label=label,
        ids=doc.get("ids"),
        year=year if year is not None else doc.get("year", ""),
        id_prefix=id_prefix,
    )


def cohort_from_tensor(
    minutes: np.ndarray,
    *,
    labels: Sequence | None = None,
    label: AchievementLabel | str | None = None,
    ids: Sequence[str] | None = None,
    year: str = "",
    id_prefix: str = "r",
) -> Cohort:
    minutes = _as_minutes_array(minutes)
    if minutes.ndim != 3 or minutes.shape[1:] != (N_WINDOWS, N_WEEKS):
        raise CohortError(f"shape {list(minutes.shape)} != [N, 4, 17]")
    n = minutes.shape[0]
    if labels is None:
        if label is None:
            raise CohortError("no labels in document and no label given")
        lab_idx = np.full(n, as_label(label).index)
    else:
        if len(labels) != n:
            raise CohortError(f"{len(labels)} labels for {n} records")
        try:
            lab_idx = np.array([as_label(v).index for v in labels])
        except (ValueError, IndexError) as exc:
            raise CohortError(str(exc)) from None
    if ids is None:
        ids = [f"{id_prefix}{i:04d}" for i in range(n)]
    return Cohort(ids=tuple(ids), minutes=minutes, labels=lab_idx, year=year)
