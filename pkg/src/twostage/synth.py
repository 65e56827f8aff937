"""Stage 1: synthetic cohorts generated from the DP summary alone.

Generators never see the real cohort; they receive only a ``DpSummary``.
That keeps every synthetic output a post-processing of the DP release.
"""

from __future__ import annotations

import enum
import json
import os
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import (
    LABELS,
    N_WINDOWS,
    AchievementLabel,
    Cohort,
    CohortError,
    StudentRecord,
    as_label,
    as_window,
    cohort_from_tensor,
    load_cohort,
    sample_minutes,
)
from .dp import DpSummary, PrivacyBudget, release_summary
from .seeding import derive_seed, rng_for
from .validate import FeedbackNote

REFERENCE_SCRIPT = Path(__file__).with_name("generators") / "reference.py"
MAX_STEP = 0.2


class GeneratorError(RuntimeError):
    """External generator script failed to run."""


class InsufficientPool(ValueError):
    pass


class GeneratorKind(str, enum.Enum):
    STATISTICAL = "statistical"
    EXTERNAL = "external"


def _grid(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape == (N_WINDOWS,):
        arr = np.tile(arr, (len(LABELS), 1))
    if arr.shape != (len(LABELS), N_WINDOWS):
        raise ValueError(f"{name} must have shape (3, 4)")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """One member of the generator panel.

    Statistical generators draw zero-inflated gamma minutes.  A cell is zero
    with probability ``zero_scale[label, window]`` times the DP zero
    proportion of its window; positive parts are gamma(shape, scale) times a
    per-student activity factor.  External generators run ``script``.
    """

    kind: GeneratorKind = GeneratorKind.STATISTICAL
    zero_scale: np.ndarray | None = None
    shape: np.ndarray | None = None
    scale: np.ndarray | None = None
    student_shape: float | None = 2.5
    script: Path | None = None
    feedback_text: str = ""
    timeout: float = 120.0

    def __post_init__(self):
        kind = GeneratorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is GeneratorKind.EXTERNAL:
            if self.script is None:
                raise ValueError("external generator needs a script path")
            object.__setattr__(self, "script", Path(self.script))
            return
        defaults = _STATISTICAL_DEFAULTS
        for name in ("zero_scale", "shape", "scale"):
            value = getattr(self, name)
            object.__setattr__(self, name, _grid(defaults[name] if value is None else value, name))
        if np.any(self.zero_scale < 0) or not np.all(np.isfinite(self.zero_scale)):
            raise ValueError("zero_scale must be finite and nonnegative")
        if np.any(~(self.shape > 0)) or np.any(~(self.scale > 0)):
            raise ValueError("shape and scale must be positive")
        if self.student_shape is not None and not self.student_shape > 0:
            raise ValueError("student_shape must be positive or None")

    @classmethod
    def external(cls, script: str | Path, timeout: float = 120.0) -> "GeneratorSpec":
        return cls(kind=GeneratorKind.EXTERNAL, script=Path(script), timeout=timeout)

    def zero_prob(self, label: AchievementLabel, summary: DpSummary) -> np.ndarray:
        scaled = np.asarray(summary.zero_props) * self.zero_scale[as_label(label).index]
        return np.clip(scaled, 0.0, 1.0)

    def to_dict(self) -> dict:
        if self.kind is GeneratorKind.EXTERNAL:
            return {
                "kind": self.kind.value,
                "script": "reference" if self.script == REFERENCE_SCRIPT else str(self.script),
                "feedback_text": self.feedback_text,
                "timeout": self.timeout,
            }
        return {
            "kind": self.kind.value,
            "zero_scale": self.zero_scale.tolist(),
            "shape": self.shape.tolist(),
            "scale": self.scale.tolist(),
            "student_shape": self.student_shape,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if d.get("kind") == GeneratorKind.EXTERNAL.value:
            script = d["script"]
            if script == "reference":
                script = REFERENCE_SCRIPT
            return cls(
                kind=GeneratorKind.EXTERNAL,
                script=Path(script),
                feedback_text=d.get("feedback_text", ""),
                timeout=float(d.get("timeout", 120.0)),
            )
        return cls(
            kind=GeneratorKind.STATISTICAL,
            zero_scale=d.get("zero_scale"),
            shape=d.get("shape"),
            scale=d.get("scale"),
            student_shape=d.get("student_shape", 2.5),
        )

    def __eq__(self, other):
        if not isinstance(other, GeneratorSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


# Heuristic panel defaults: more evening and morning study for higher achievers.
_STATISTICAL_DEFAULTS = {
    "zero_scale": np.ones((3, 4)),
    "shape": [0.9, 1.3, 1.2, 1.5],
    "scale": [
        [10.0, 20.0, 18.0, 26.0],
        [12.0, 26.0, 22.0, 36.0],
        [14.0, 32.0, 26.0, 48.0],
    ],
}


@dataclass(frozen=True)
class SynthConfig:
    per_label_pool: int = 1000
    final_sample: int = 120
    seed: int = 0
    labels: tuple[AchievementLabel, ...] = LABELS

    def __post_init__(self):
        if self.per_label_pool < 1 or self.final_sample < 1:
            raise ValueError("pool and sample sizes must be positive")
        if self.final_sample > len(self.labels) * self.per_label_pool:
            raise ValueError("final_sample exceeds the pooled size")
        object.__setattr__(self, "labels", tuple(as_label(c) for c in self.labels))


def _records(cohort: Cohort) -> list[StudentRecord]:
    return list(cohort.records)


def generate_label_pool(
    spec: GeneratorSpec,
    label: AchievementLabel | str,
    summary: DpSummary,
    count: int,
    seed: int,
    *,
    id_prefix: str = "syn-",
    workdir: str | Path | None = None,
) -> list[StudentRecord]:
    """``count`` synthetic records of one class, a function of the summary only."""
    if count < 1:
        raise ValueError("count must be >= 1")
    label = as_label(label)
    if spec.kind is GeneratorKind.EXTERNAL:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            return run_external_generator(
                spec.script,
                count,
                derive_seed(seed, "pool", label.index),
                Path(tmp) / f"{label.value}.json",
                label=label,
                zero_props=summary.zero_props,
                feedback=spec.feedback_text,
                timeout=spec.timeout,
                id_prefix=f"{id_prefix}{label.value}-",
            )
    c = label.index
    minutes = sample_minutes(
        rng_for(seed, "pool", c),
        count,
        spec.zero_prob(label, summary),
        spec.shape[c],
        spec.scale[c],
        spec.student_shape,
    )
    return [
        StudentRecord(f"{id_prefix}{label.value}-{i:05d}", grid, label)
        for i, grid in enumerate(minutes)
    ]


def pool_and_sample(
    pools: Sequence[Sequence[StudentRecord]], k: int, seed: int, year: str = ""
) -> Cohort:
    """Uniform sample of ``k`` records, without replacement, from all pools."""
    everything = [r for pool in pools for r in pool]
    if k > len(everything):
        raise InsufficientPool(f"need {k} records, pools hold {len(everything)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = np.sort(np.random.default_rng(seed).choice(len(everything), size=k, replace=False))
    return Cohort.from_records([everything[i] for i in idx], year=year)


def run_external_generator(
    script: str | Path,
    num_samples: int,
    seed: int,
    save_path: str | Path,
    *,
    label: AchievementLabel | str | None = None,
    zero_props: Sequence[float] | None = None,
    feedback: str = "",
    timeout: float = 120.0,
    id_prefix: str = "ext-",
) -> list[StudentRecord]:
    """Run a generator script with ``--save_path --num_samples --seed`` and read its output.

    The script must write a tensor-json document (or a ``.npy`` array when
    ``save_path`` ends in ``.npy``) of shape (num_samples, 4, 17).  The label,
    DP zero proportions and feedback text are passed as environment
    variables; all three are public by construction.

    Raises:
        GeneratorError: the process failed, timed out, or wrote nothing.
        CohortError: wrong shape or malformed document.
        CapViolation: a cell outside its window cap.
    """
    script, save_path = Path(script), Path(save_path)
    if not script.exists():
        raise GeneratorError(f"generator script {script} not found")
    env = dict(os.environ)
    env["TWOSTAGE_LABEL"] = as_label(label).value if label is not None else ""
    env["TWOSTAGE_ZERO_PROPS"] = json.dumps([float(p) for p in zero_props]) if zero_props else ""
    env["TWOSTAGE_FEEDBACK"] = feedback
    cmd = [
        sys.executable,
        str(script.resolve()),
        "--save_path", str(save_path.resolve()),
        "--num_samples", str(int(num_samples)),
        "--seed", str(int(seed)),
    ]
    save_path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as cwd:
        try:
            proc = subprocess.run(
                cmd, cwd=cwd, env=env, capture_output=True, text=True, timeout=timeout
            )
        except subprocess.TimeoutExpired:
            raise GeneratorError(f"{script.name} exceeded {timeout}s") from None
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-3:]
        raise GeneratorError(f"{script.name} exited with {proc.returncode}: {' | '.join(tail)}")
    if not save_path.exists():
        raise GeneratorError(f"{script.name} wrote no output to {save_path}")

    if save_path.suffix == ".npy":
        arr = np.load(save_path, allow_pickle=False)
        cohort = cohort_from_tensor(arr, label=label, id_prefix=id_prefix)
    else:
        cohort = load_cohort(save_path, "tensor-json", label=label, id_prefix=id_prefix)
    if cohort.n != num_samples:
        raise CohortError(f"{script.name} produced {cohort.n} records, expected {num_samples}")
    return _records(cohort)


def _step(delta: float) -> float:
    # multiplicative correction that would cancel the relative delta
    return 1.0 / max(1.0 + delta, 1e-9)


def apply_feedback(note: FeedbackNote, spec: GeneratorSpec) -> GeneratorSpec:
    """Move generator parameters a bounded step against the reported deltas.

    Mean and max deltas rescale the positive part; zero-proportion deltas
    rescale the zero probability.  Each (label, window) parameter moves by
    at most 20% per call.  External specs receive the rendered text instead.
    """
    if spec.kind is GeneratorKind.EXTERNAL:
        return replace(spec, feedback_text="\n".join(note.rendered_text))
    scale_f = np.ones((len(LABELS), N_WINDOWS))
    zero_f = np.ones((len(LABELS), N_WINDOWS))
    for (label, window, stat), delta in note.per_feature_deltas.items():
        if delta == 0:
            continue
        rows = range(len(LABELS)) if label == "all" else [as_label(label).index]
        w = as_window(window).index
        target = zero_f if stat == "zero_prop" else scale_f
        for c in rows:
            target[c, w] *= _step(delta)
    lo, hi = 1.0 - MAX_STEP, 1.0 + MAX_STEP
    return replace(
        spec,
        scale=spec.scale * np.clip(scale_f, lo, hi),
        zero_scale=spec.zero_scale * np.clip(zero_f, lo, hi),
    )


def run_cycle(
    real: Cohort,
    spec: GeneratorSpec | Sequence[GeneratorSpec],
    config: SynthConfig,
    budget: PrivacyBudget,
    prior_feedback: FeedbackNote | None = None,
    *,
    workdir: str | Path | None = None,
    max_workers: int = 1,
) -> tuple[Cohort, DpSummary]:
    """One Stage-1 cycle: DP summary, per-label pools from every spec, pooled sample."""
    specs = [spec] if isinstance(spec, GeneratorSpec) else list(spec)
    if not specs:
        raise ValueError("at least one generator spec is required")
    if prior_feedback is not None:
        specs = [apply_feedback(prior_feedback, s) for s in specs]
    summary = release_summary(real, budget, derive_seed(config.seed, "dp"))

    jobs = [(j, s, c) for j, s in enumerate(specs) for c in config.labels]

    def make(job):
        j, s, c = job
        return generate_label_pool(
            s, c, summary, config.per_label_pool, derive_seed(config.seed, "gen", j),
            id_prefix=f"g{j}-", workdir=workdir,
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as ex:
            pools = list(ex.map(make, jobs))
    else:
        pools = [make(job) for job in jobs]
    synthetic = pool_and_sample(
        pools, config.final_sample, derive_seed(config.seed, "sample"), year=real.year
    )
    return synthetic, summary
