import sys
import textwrap

import numpy as np
import pytest

from twostage.cohort import CapViolation, CohortError, GroundTruthConfig, generate_ground_truth
from twostage.dp import PrivacyBudget, release_summary
from twostage.synth import (
    REFERENCE_SCRIPT,
    GeneratorError,
    GeneratorSpec,
    InsufficientPool,
    SynthConfig,
    apply_feedback,
    generate_label_pool,
    pool_and_sample,
    run_cycle,
    run_external_generator,
)
from twostage.validate import FeedbackNote

BUDGET = PrivacyBudget(1.0, 1e-3)


@pytest.fixture(scope="module")
def real():
    return generate_ground_truth(GroundTruthConfig.default(), 120, seed=5, year="2022")


@pytest.fixture(scope="module")
def summary(real):
    return release_summary(real, BUDGET, seed=1)


def test_spec_roundtrip():
    spec = GeneratorSpec()
    assert GeneratorSpec.from_dict(spec.to_dict()) == spec
    ext = GeneratorSpec.from_dict({"kind": "external", "script": "reference"})
    assert ext.script == REFERENCE_SCRIPT
    assert ext.to_dict()["script"] == "reference"
    with pytest.raises(ValueError):
        GeneratorSpec(shape=-np.ones((3, 4)))


def test_pool_depends_only_on_summary(real, summary):
    other_real = generate_ground_truth(GroundTruthConfig.default(), 120, seed=99)
    # same public summary, different private cohort -> same pool
    a = generate_label_pool(GeneratorSpec(), "low", summary, 50, seed=3)
    b = generate_label_pool(GeneratorSpec(), "low", summary, 50, seed=3)
    assert [r.id for r in a] == [r.id for r in b]
    assert all(x == y for x, y in zip(a, b))
    assert other_real != real


def test_pool_zero_rate_follows_summary(summary):
    pool = generate_label_pool(GeneratorSpec(), "average", summary, 4000, seed=0)
    grids = np.stack([r.minutes for r in pool])
    np.testing.assert_allclose((grids == 0).mean(axis=(0, 2)), summary.zero_props, atol=0.02)


def test_pool_and_sample(summary):
    pools = [generate_label_pool(GeneratorSpec(), c, summary, 10, seed=0) for c in ("low", "average", "high")]
    s = pool_and_sample(pools, 12, seed=4)
    assert s.n == 12
    assert len(set(s.ids)) == 12
    assert s == pool_and_sample(pools, 12, seed=4)
    with pytest.raises(InsufficientPool):
        pool_and_sample(pools, 31, seed=4)


def test_run_cycle_deterministic(real):
    cfg = SynthConfig(per_label_pool=200, final_sample=120, seed=8)
    a, sa = run_cycle(real, GeneratorSpec(), cfg, BUDGET)
    b, sb = run_cycle(real, [GeneratorSpec()], cfg, BUDGET, max_workers=3)
    assert a == b and sa == sb
    assert a.n == 120 and a.year == "2022"


def test_reference_script(real, summary, tmp_path):
    recs = run_external_generator(
        REFERENCE_SCRIPT, 40, 7, tmp_path / "out.json", label="high", zero_props=summary.zero_props
    )
    assert len(recs) == 40
    assert all(r.label.value == "high" for r in recs)
    again = run_external_generator(
        REFERENCE_SCRIPT, 40, 7, tmp_path / "again.npy", label="high", zero_props=summary.zero_props
    )
    assert all(x.minutes.tolist() == y.minutes.tolist() for x, y in zip(recs, again))


def _script(tmp_path, body):
    p = tmp_path / "gen.py"
    p.write_text(textwrap.dedent(body))
    return p


def test_external_failures(tmp_path):
    crash = _script(tmp_path, "import sys; sys.exit(3)\n")
    with pytest.raises(GeneratorError):
        run_external_generator(crash, 5, 0, tmp_path / "o.json", label="low")
    with pytest.raises(GeneratorError):
        run_external_generator(tmp_path / "missing.py", 5, 0, tmp_path / "o.json", label="low")


def test_external_bad_output(tmp_path):
    header = textwrap.dedent("""
        import argparse, json
        p = argparse.ArgumentParser()
        p.add_argument('--save_path'); p.add_argument('--num_samples', type=int); p.add_argument('--seed', type=int)
        a = p.parse_args()
    """)
    shape = _script(tmp_path, header + "json.dump({'shape': [a.num_samples, 4, 16], 'data': [0] * (a.num_samples * 64)}, open(a.save_path, 'w'))\n")
    with pytest.raises(CohortError):
        run_external_generator(shape, 2, 0, tmp_path / "o.json", label="low")
    cap = _script(tmp_path, header + "json.dump({'shape': [a.num_samples, 4, 17], 'data': [999] * (a.num_samples * 68)}, open(a.save_path, 'w'))\n")
    with pytest.raises(CapViolation):
        run_external_generator(cap, 2, 0, tmp_path / "o.json", label="low")


def test_external_timeout(tmp_path):
    slow = _script(tmp_path, "import time; time.sleep(5)\n")
    with pytest.raises(GeneratorError):
        run_external_generator(slow, 1, 0, tmp_path / "o.json", label="low", timeout=0.5)


def test_feedback_moves_against_delta():
    spec = GeneratorSpec()
    note = FeedbackNote.from_deltas(
        1, {("low", "evening", "mean"): 0.5, ("all", "morning", "zero_prop"): -0.1}
    )
    new = apply_feedback(note, spec)
    assert new.scale[0, 3] < spec.scale[0, 3]
    assert new.scale[0, 3] >= 0.8 * spec.scale[0, 3] - 1e-12
    assert np.all(new.zero_scale[:, 1] > spec.zero_scale[:, 1])
    assert new.scale[1, 3] == spec.scale[1, 3]


def test_feedback_step_is_bounded():
    spec = GeneratorSpec()
    huge = FeedbackNote.from_deltas(1, {("high", "overnight", "mean"): 10.0})
    new = apply_feedback(huge, spec)
    assert new.scale[2, 0] == pytest.approx(0.8 * spec.scale[2, 0])


def test_feedback_reaches_external_spec():
    ext = GeneratorSpec.external(REFERENCE_SCRIPT)
    note = FeedbackNote.from_deltas(2, {("low", "evening", "mean"): -0.3})
    new = apply_feedback(note, ext)
    assert "evening" in new.feedback_text


def test_feedback_reduces_discrepancy(real):
    # an overshooting generator corrected by its own discrepancy moves closer
    from twostage.metrics import ajs
    from twostage.validate import default_requests, discrepancy_report, merge_feedback, run_request

    spec = GeneratorSpec(scale=GeneratorSpec().scale * 2.5)
    cfg = SynthConfig(per_label_pool=400, final_sample=120, seed=3)
    syn, _ = run_cycle(real, spec, cfg, BUDGET)
    notes = [discrepancy_report(run_request(r, syn), run_request(r, real)) for r in default_requests()]
    spec2 = apply_feedback(merge_feedback(notes, 1), spec)
    syn2, _ = run_cycle(real, spec2, cfg, BUDGET)
    assert ajs(real, syn2) < ajs(real, syn)


@pytest.mark.skipif(sys.platform == "win32", reason="posix paths")
def test_external_in_cycle(real):
    cfg = SynthConfig(per_label_pool=60, final_sample=90, seed=1)
    syn, _ = run_cycle(real, [GeneratorSpec(), GeneratorSpec.external(REFERENCE_SCRIPT)], cfg, BUDGET)
    assert syn.n == 90
    assert any(i.startswith("g1-") for i in syn.ids)
