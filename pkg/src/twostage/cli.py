"""Command-line front end: ``twostage {synth,validate,audit,metrics,cycle}``.

Every run is driven by one JSON config (see ``fixtures/reference_config.json``
and the README for the keys).  All randomness derives from the master seed,
and every artifact records the config hash and master seed, so equal configs
give byte-identical output trees.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .audit import (
    AuditReport,
    DataDistribution,
    ShadowConfig,
    audit_requests,
    select_candidates,
)
from .cohort import (
    Cohort,
    GroundTruthConfig,
    generate_ground_truth,
    load_cohort,
    save_cohort,
)
from .dp import DpSummary, PrivacyBudget, gdp_of_budget
from .metrics import EmptyClassError, ajs, eprec_aggregate, eprec_records_from_counts, write_ajs_csv
from .seeding import derive_seed
from .synth import GeneratorSpec, SynthConfig, apply_feedback, run_cycle
from .validate import (
    FeedbackNote,
    ProvenanceLog,
    SdcPolicy,
    ValidationRequest,
    default_requests,
    discrepancy_report,
    load_requests,
    merge_feedback,
    run_request,
)

log = logging.getLogger("twostage")

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "twostage-out",
    "n": 120,
    "ground_truth": None,  # None -> GroundTruthConfig.default()
    "real_cohorts": [],  # optional [{"path", "format", "labels_path"}] per cycle
    "cycle_years": ["2022", "2023", "2024"],
    "cycles": 3,
    "budget": {"epsilon": 1.0, "delta": 1e-3},
    "synth": {"per_label_pool": 1000, "final_sample": 120},
    "generators": [{"kind": "statistical"}],
    "requests": None,  # path to a requests file; None -> built-in five requests
    "sdc_policy": {"min_cell": 5, "rounding": 4, "forbid_extrema": True},
    "shadow": {"num_in": 64, "num_out": 64},
    "candidates": {"n_far": 8, "n_random": 8, "exhaustive": False},
    "max_workers": 1,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default=Path("."))

    @classmethod
    def load(
        cls, path: str | Path | None = None, *, seed: int | None = None, out: str | None = None
    ) -> "RunConfig":
        doc, base = {}, Path(".")
        if path is not None:
            path = Path(path)
            doc = json.loads(path.read_text())
            base = path.parent
        raw = _merge(DEFAULTS, doc)
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["out_dir"] = out
        cfg = cls(raw, base)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        r = self.raw
        try:
            self.budget
            self.synth_config(1)
            self.policy
            self.shadow_config(1)
            self.generator_specs()
            self.ground_truth
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if int(r["cycles"]) < 1:
            raise ConfigError("cycles must be >= 1")
        if int(r["n"]) < 3:
            raise ConfigError("n must be >= 3")

    # -- derived objects ---------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(**self.raw["budget"])

    @property
    def policy(self) -> SdcPolicy:
        return SdcPolicy(**self.raw["sdc_policy"])

    @property
    def ground_truth(self) -> GroundTruthConfig:
        gt = self.raw["ground_truth"]
        return GroundTruthConfig.default() if gt is None else GroundTruthConfig.from_dict(gt)

    def synth_config(self, cycle: int) -> SynthConfig:
        return SynthConfig(**self.raw["synth"], seed=derive_seed(self.seed, "cycle", cycle, "synth"))

    def shadow_config(self, cycle: int) -> ShadowConfig:
        return ShadowConfig(**self.raw["shadow"], seed=derive_seed(self.seed, "cycle", cycle, "audit"))

    def generator_specs(self) -> list[GeneratorSpec]:
        specs = []
        for d in self.raw["generators"]:
            d = dict(d)
            if d.get("kind") == "external" and d.get("script") not in (None, "reference"):
                d["script"] = str((self.base_dir / d["script"]).resolve())
            specs.append(GeneratorSpec.from_dict(d))
        if not specs:
            raise ConfigError("at least one generator is required")
        return specs

    def year(self, cycle: int) -> str:
        years = self.raw["cycle_years"]
        return str(years[cycle - 1]) if cycle <= len(years) else f"cycle{cycle}"

    def real_cohort(self, cycle: int) -> Cohort:
        """The cohort for a cycle: a configured file, else a ground-truth draw."""
        files = self.raw["real_cohorts"]
        if cycle <= len(files):
            spec = files[cycle - 1]
            return load_cohort(
                self.base_dir / spec["path"],
                spec.get("format", "tensor-json"),
                labels_path=(self.base_dir / spec["labels_path"]) if spec.get("labels_path") else None,
                year=self.year(cycle),
            )
        return generate_ground_truth(
            self.ground_truth, int(self.raw["n"]), derive_seed(self.seed, "cycle", cycle, "truth"),
            year=self.year(cycle),
        )

    def requests(self) -> tuple[list[ValidationRequest], SdcPolicy]:
        path = self.raw["requests"]
        if path is None:
            return default_requests(), self.policy
        return _requests_from(self.base_dir / path, self.policy)

    @property
    def hash(self) -> str:
        # the output location never changes the artifacts, so it is left out
        hashed = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "master_seed": self.seed}

    def comments(self) -> list[str]:
        return [f"config_hash={self.hash} master_seed={self.seed}"]


def _requests_from(path: Path, default: SdcPolicy) -> tuple[list[ValidationRequest], SdcPolicy]:
    requests, policy = load_requests(path)
    if policy is not None and policy != default:
        log.warning("requests file %s overrides the SDC policy: %s", path.name, asdict(policy))
        return requests, policy
    return requests, default


# ---------------------------------------------------------------------------
# Writers


class _StampedLog(ProvenanceLog):
    """Provenance log whose every line carries the config hash and seed."""

    def __init__(self, path: Path, stamp: dict):
        super().__init__(path)
        self._stamp = stamp

    def append(self, record: dict) -> None:
        super().append({**record, **self._stamp})


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _fresh_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, cfg: RunConfig, command: str, seeds: dict, warnings: list[str]) -> None:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    _write_json(
        out / "manifest.json",
        {
            **cfg.stamp(),
            "command": command,
            "config": {k: v for k, v in cfg.raw.items() if k != "out_dir"},
            "seeds": seeds,
            "warnings": warnings,
            "files": files,
        },
    )


def _budget_warnings(cfg: RunConfig, n: int) -> list[str]:
    b = cfg.budget
    if b.delta >= 1.0 / n:
        msg = f"delta={b.delta:g} >= 1/n={1.0 / n:g}: the guarantee is weak at this cohort size"
        log.warning(msg)
        return [msg]
    return []


# ---------------------------------------------------------------------------
# Stages


def _synth_stage(
    cfg: RunConfig, real: Cohort, cycle: int, specs: list[GeneratorSpec], out: Path
) -> tuple[Cohort, DpSummary]:
    synthetic, summary = run_cycle(
        real, specs, cfg.synth_config(cycle), cfg.budget, max_workers=int(cfg.raw["max_workers"])
    )
    meta = cfg.stamp()
    save_cohort(synthetic, out / "synthetic.json", "tensor-json", meta=meta)
    save_cohort(synthetic, out / "synthetic.csv", "long-csv", meta=meta)
    _write_json(out / "dp_summary.json", {**summary.to_dict(), **meta})
    _write_json(out / "generator_specs.json", {"generators": [s.to_dict() for s in specs], **meta})
    return synthetic, summary


def _validate_stage(
    cfg: RunConfig,
    real: Cohort,
    synthetic: Cohort | None,
    requests: list[ValidationRequest],
    policy: SdcPolicy,
    cycle: int,
    out: Path,
) -> FeedbackNote | None:
    prov_path = out / "provenance.jsonl"
    prov_path.unlink(missing_ok=True)
    prov = _StampedLog(prov_path, cfg.stamp())
    rows, notes = [], []
    for req in requests:
        real_out = run_request(req, real, policy, dataset="real", log=prov)
        entry = {"request": req.to_dict(), "real": real_out.to_dict()}
        if synthetic is not None:
            syn_out = run_request(req, synthetic, policy, dataset="synthetic", log=prov)
            entry["synthetic"] = syn_out.to_dict()
            notes.append(discrepancy_report(syn_out, real_out, cycle=cycle))
        rows.append(entry)
        if not real_out.released:
            log.info("request %s rejected: %s", req.id, "; ".join(real_out.sdc.reasons))
    _write_json(out / "outputs.json", {"outputs": rows, "sdc_policy": asdict(policy), **cfg.stamp()})
    if synthetic is None:
        return None
    note = merge_feedback(notes, cycle)
    _write_json(out / "feedback.json", {**note.to_dict(), **cfg.stamp()})
    return note


def _audit_stage(
    cfg: RunConfig,
    real: Cohort,
    requests: list[ValidationRequest],
    policy: SdcPolicy,
    cycle: int,
    out: Path,
) -> AuditReport:
    c = cfg.raw["candidates"]
    targets = select_candidates(
        real, int(c["n_far"]), int(c["n_random"]),
        seed=derive_seed(cfg.seed, "cycle", cycle, "candidates"), exhaustive=bool(c["exhaustive"]),
    )
    report = audit_requests(
        requests,
        DataDistribution.bootstrap(real),
        real.n,
        targets,
        gdp_of_budget(cfg.budget).mu,
        cfg.shadow_config(cycle),
        policy,
        max_workers=int(cfg.raw["max_workers"]),
    )
    _write_json(out / "audit_report.json", {**report.to_dict(), **cfg.stamp()})
    report.write_csv(out / "audit_series.csv", comments=cfg.comments())
    return report


def _ajs_rows(real: Cohort, synthetic: Cohort, n_generators: int) -> list[tuple[str, str, float]]:
    rows = [(real.year, "panel", ajs(real, synthetic))]
    if n_generators > 1:
        for j in range(n_generators):
            idx = [i for i, sid in enumerate(synthetic.ids) if sid.startswith(f"g{j}-")]
            if not idx:
                continue
            try:
                rows.append((real.year, f"g{j}", ajs(real, synthetic.subset(idx))))
            except EmptyClassError:
                log.info("generator g%d has an empty class in the sample; AJS skipped", j)
    return rows


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: RunConfig) -> Path:
    out = _fresh_dir(cfg.out_dir)
    real = cfg.real_cohort(1)
    warnings = _budget_warnings(cfg, real.n)
    _synth_stage(cfg, real, 1, cfg.generator_specs(), out)
    _write_manifest(out, cfg, "synth", {"synth": cfg.synth_config(1).seed}, warnings)
    return out


def cmd_validate(cfg: RunConfig, requests_path: str | None = None, synthetic_path: str | None = None) -> Path:
    out = _fresh_dir(cfg.out_dir)
    real = cfg.real_cohort(1)
    if requests_path:
        requests, policy = _requests_from(Path(requests_path), cfg.policy)
    else:
        requests, policy = cfg.requests()
    synthetic = load_cohort(synthetic_path, "tensor-json") if synthetic_path else None
    _validate_stage(cfg, real, synthetic, requests, policy, 1, out)
    _write_manifest(out, cfg, "validate", {}, [])
    return out


def cmd_audit(cfg: RunConfig, requests_path: str | None = None) -> AuditReport:
    out = _fresh_dir(cfg.out_dir)
    real = cfg.real_cohort(1)
    if requests_path:
        requests, policy = _requests_from(Path(requests_path), cfg.policy)
    else:
        requests, policy = cfg.requests()
    report = _audit_stage(cfg, real, requests, policy, 1, out)
    _write_manifest(out, cfg, "audit", {"audit": cfg.shadow_config(1).seed}, [])
    return report


def cmd_metrics(cfg: RunConfig, synthetic_path: str | None = None, eprec_path: str | None = None) -> Path:
    out = _fresh_dir(cfg.out_dir)
    if synthetic_path:
        real = cfg.real_cohort(1)
        synthetic = load_cohort(synthetic_path, "tensor-json")
        write_ajs_csv(_ajs_rows(real, synthetic, len(cfg.generator_specs())), out / "ajs.csv", cfg.comments())
    if eprec_path:
        counts = json.loads(Path(eprec_path).read_text())
        records, groups = eprec_records_from_counts({g: tuple(v) for g, v in counts.items()})
        summary = eprec_aggregate(records, groups)
        _write_json(
            out / "eprec.json",
            {
                "per_group": {g: str(v) for g, v in summary.per_group.items()},
                "overall": str(summary.overall),
                "as_float": summary.as_floats(),
                "counts": summary.counts,
                **cfg.stamp(),
            },
        )
    _write_manifest(out, cfg, "metrics", {}, [])
    return out


def cmd_cycle(cfg: RunConfig) -> Path:
    """Run T cycles of synth -> validate -> feedback -> audit."""
    out = _fresh_dir(cfg.out_dir)
    requests, policy = cfg.requests()
    specs = cfg.generator_specs()
    note: FeedbackNote | None = None
    ajs_rows, audit_rows, warnings, seeds = [], [], [], {}
    for t in range(1, int(cfg.raw["cycles"]) + 1):
        cdir = _fresh_dir(out / f"cycle_{t}")
        real = cfg.real_cohort(t)
        warnings += _budget_warnings(cfg, real.n)
        if note is not None:
            _write_json(cdir / "prior_feedback.json", {**note.to_dict(), **cfg.stamp()})
            specs = [apply_feedback(note, s) for s in specs]
        synthetic, _ = _synth_stage(cfg, real, t, specs, cdir)
        note = _validate_stage(cfg, real, synthetic, requests, policy, t, cdir)
        rows = _ajs_rows(real, synthetic, len(specs))
        write_ajs_csv(rows, cdir / "ajs.csv", cfg.comments())
        ajs_rows += rows
        report = _audit_stage(cfg, real, requests, policy, t, cdir)
        audit_rows += [(t, real.year, r) for r in report.rows]
        seeds[f"cycle_{t}"] = {
            "truth": derive_seed(cfg.seed, "cycle", t, "truth"),
            "synth": cfg.synth_config(t).seed,
            "audit": cfg.shadow_config(t).seed,
        }
    write_ajs_csv(ajs_rows, out / "ajs_series.csv", cfg.comments())
    with open(out / "audit_series.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.comments()[0]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "dataset", "request_index", "nu_hat", "regret", "advantage", "total_mu"])
        for t, year, r in audit_rows:
            w.writerow(
                [t, year, r.request_index]
                + [repr(float(v)) for v in (r.nu_hat, r.regret, r.advantage, r.total_mu)]
            )
    _write_manifest(out, cfg, "cycle", seeds, warnings)
    return out


# ---------------------------------------------------------------------------


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("twostage") / "fixtures" / name))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("synth", "release the DP summary and generate a synthetic cohort")
    sp = add("validate", "run validation requests with disclosure control")
    sp.add_argument("--requests", help="requests JSON file")
    sp.add_argument("--synthetic", help="synthetic cohort (tensor-json) to compare against")
    sp = add("audit", "empirical membership-inference audit of the requests")
    sp.add_argument("--requests", help="requests JSON file")
    sp = add("metrics", "AJS of a synthetic cohort and/or EPrec aggregation")
    sp.add_argument("--synthetic", help="synthetic cohort (tensor-json)")
    sp.add_argument("--eprec", help='JSON {"dataset": [n_0, n_half, n_1], ...}')
    add("cycle", "run the full multi-cycle pipeline")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        if args.command == "synth":
            out = cmd_synth(cfg)
        elif args.command == "validate":
            out = cmd_validate(cfg, args.requests, args.synthetic)
        elif args.command == "audit":
            cmd_audit(cfg, args.requests)
            out = cfg.out_dir
        elif args.command == "metrics":
            out = cmd_metrics(cfg, args.synthetic, args.eprec)
        else:
            out = cmd_cycle(cfg)
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
