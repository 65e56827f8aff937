import csv
import filecmp
import json

import pytest

from twostage.cli import ConfigError, RunConfig, fixture_path, main

SMALL = {
    "n": 60,
    "cycles": 2,
    "synth": {"per_label_pool": 80, "final_sample": 60},
    "shadow": {"num_in": 12, "num_out": 12},
    "candidates": {"n_far": 2, "n_random": 1},
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors
    for sub in cmp.common_dirs:
        _same_tree(a / sub, b / sub)


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    p.write_text(json.dumps({"budget": {"epsilon": -1, "delta": 0.1}}))
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_hash_ignores_out_dir_but_not_seed(small_config):
    a = RunConfig.load(small_config, out="x")
    assert a.hash == RunConfig.load(small_config, out="y").hash
    assert a.hash != RunConfig.load(small_config, seed=5).hash


def test_synth_writes_and_is_deterministic(small_config, tmp_path):
    run("synth", "--config", small_config, "--out", tmp_path / "a")
    run("synth", "--config", small_config, "--out", tmp_path / "b")
    out = tmp_path / "a"
    for name in ("synthetic.json", "synthetic.csv", "synthetic_labels.csv", "dp_summary.json", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["synth"] and "synthetic.json" in manifest["files"]
    _same_tree(tmp_path / "a", tmp_path / "b")


def test_every_artifact_is_stamped(small_config, tmp_path):
    run("cycle", "--config", small_config, "--out", tmp_path / "o")
    h = RunConfig.load(small_config).hash
    for p in (tmp_path / "o").rglob("*"):
        if p.is_file():
            assert h in p.read_text(), p.name


def test_weak_delta_warns(tmp_path, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "budget": {"epsilon": 1.0, "delta": 0.05}}))
    run("synth", "--config", p, "--out", tmp_path / "o")
    assert "delta=0.05 >= 1/n" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["warnings"]


def test_validate_real_only(small_config, tmp_path):
    run("validate", "--config", small_config, "--out", tmp_path / "v")
    lines = (tmp_path / "v" / "provenance.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert not (tmp_path / "v" / "feedback.json").exists()


def test_validate_rejection_recorded(small_config, tmp_path):
    reqs = tmp_path / "r.json"
    reqs.write_text(json.dumps([{"id": "m", "kind": "window_label_max"}]))
    run("validate", "--config", small_config, "--requests", reqs, "--out", tmp_path / "v")
    out = json.loads((tmp_path / "v" / "outputs.json").read_text())["outputs"][0]["real"]
    assert out["values"] is None and out["sdc"]["accepted"] is False


def test_validate_with_synthetic_writes_feedback(small_config, tmp_path):
    run("synth", "--config", small_config, "--out", tmp_path / "s")
    run("validate", "--config", small_config, "--synthetic", tmp_path / "s" / "synthetic.json", "--out", tmp_path / "v")
    note = json.loads((tmp_path / "v" / "feedback.json").read_text())
    assert note["deltas"]


def test_audit_empty_and_leaky(small_config, tmp_path):
    empty = tmp_path / "e.json"
    empty.write_text("[]")
    run("audit", "--config", small_config, "--requests", empty, "--out", tmp_path / "e")
    report = json.loads((tmp_path / "e" / "audit_report.json").read_text())
    cfg = RunConfig.load(small_config)
    from twostage.dp import gdp_of_budget

    assert report["total_mu"] == gdp_of_budget(cfg.budget).mu
    run("audit", "--config", small_config, "--requests", fixture_path("requests_leaky.json"), "--out", tmp_path / "l")
    rows = [r for r in csv.reader((tmp_path / "l" / "audit_series.csv").open()) if not r[0].startswith("#")]
    assert len(rows) == 2
    assert float(rows[-1][3]) >= 0.9


def test_audit_csv_row_count(small_config, tmp_path):
    run("audit", "--config", small_config, "--out", tmp_path / "a")
    rows = (tmp_path / "a" / "audit_series.csv").read_text().splitlines()
    assert len(rows) == 2 + 5


def test_metrics_command(small_config, tmp_path):
    run("synth", "--config", small_config, "--out", tmp_path / "s")
    counts = tmp_path / "counts.json"
    counts.write_text(json.dumps({"2022": [3, 5, 1], "2023": [5, 6, 0], "2024": [0, 5, 0]}))
    run("metrics", "--config", small_config, "--synthetic", tmp_path / "s" / "synthetic.json",
        "--eprec", counts, "--out", tmp_path / "m")
    eprec = json.loads((tmp_path / "m" / "eprec.json").read_text())
    assert eprec["overall"] == "9/25"
    assert "panel" in (tmp_path / "m" / "ajs.csv").read_text()


def test_single_cycle_matches_synth_plus_validate(small_config, tmp_path):
    p = tmp_path / "one.json"
    p.write_text(json.dumps({**SMALL, "cycles": 1}))
    run("cycle", "--config", p, "--out", tmp_path / "c")
    run("synth", "--config", p, "--out", tmp_path / "s")
    run("validate", "--config", p, "--synthetic", tmp_path / "s" / "synthetic.json", "--out", tmp_path / "v")
    c1 = tmp_path / "c" / "cycle_1"
    assert (c1 / "synthetic.json").read_bytes() == (tmp_path / "s" / "synthetic.json").read_bytes()
    assert (c1 / "feedback.json").read_bytes() == (tmp_path / "v" / "feedback.json").read_bytes()
    assert (c1 / "outputs.json").read_bytes() == (tmp_path / "v" / "outputs.json").read_bytes()


def test_cycle_structure(small_config, tmp_path):
    p = tmp_path / "three.json"
    p.write_text(json.dumps({**SMALL, "cycles": 3}))
    run("cycle", "--config", p, "--out", tmp_path / "c")
    root = tmp_path / "c"
    assert sorted(d.name for d in root.iterdir() if d.is_dir()) == ["cycle_1", "cycle_2", "cycle_3"]
    assert not (root / "cycle_1" / "prior_feedback.json").exists()
    assert (root / "cycle_2" / "prior_feedback.json").exists()
    assert (root / "cycle_3" / "prior_feedback.json").exists()
    series = (root / "audit_series.csv").read_text().splitlines()
    assert len(series) == 2 + 3 * 5


def test_seed_override_changes_output(small_config, tmp_path):
    run("synth", "--config", small_config, "--out", tmp_path / "a")
    run("synth", "--config", small_config, "--seed", 123, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "synthetic.json").read_bytes() != (tmp_path / "b" / "synthetic.json").read_bytes()


def test_bundled_fixtures_parse():
    cfg = RunConfig.load(fixture_path("reference_config.json"))
    requests, _ = cfg.requests()
    assert [r.id for r in requests] == ["r1", "r2", "r3", "r4", "r5"]
    assert len(cfg.generator_specs()) == 2
