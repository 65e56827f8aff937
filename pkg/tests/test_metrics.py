from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.distance import jensenshannon

from twostage.cohort import Cohort, GroundTruthConfig, generate_ground_truth
from twostage.metrics import (
    BinningSpec,
    EmptyClassError,
    EprecRecord,
    ajs,
    eprec_aggregate,
    eprec_records_from_counts,
    js_divergence,
    js_from_histograms,
    write_ajs_csv,
)

floats = st.floats(-1e3, 1e3, allow_nan=False)


def test_two_bin_closed_form():
    # 3/2 - (3/4) log2 3
    expected = 0.31127812445913283
    assert js_from_histograms([0.5, 0.5], [1.0, 0.0]) == pytest.approx(expected, abs=1e-12)
    # the same value through the sample-based path
    assert js_divergence([0, 1], [0, 0], BinningSpec(bins=2)) == pytest.approx(expected, abs=1e-8)


def test_matches_scipy_on_histograms():
    rng = np.random.default_rng(0)
    p, q = rng.random(20), rng.random(20)
    ours = js_from_histograms(p, q)
    theirs = jensenshannon(p, q, base=2) ** 2
    assert ours == pytest.approx(theirs, abs=1e-12)


def test_identical_and_disjoint():
    assert js_divergence([1, 2, 3], [1, 2, 3]) == 0.0
    assert js_divergence([0] * 10, [100] * 10) >= 0.999
    assert js_divergence([5, 5], [5, 5]) == 0.0


@given(st.lists(floats, min_size=1, max_size=40), st.lists(floats, min_size=1, max_size=40))
def test_js_symmetric_and_bounded(p, q):
    a = js_divergence(p, q)
    assert a == js_divergence(q, p)
    assert 0.0 <= a <= 1.0


def test_binning_spec_validation():
    with pytest.raises(ValueError):
        BinningSpec(bins=1)
    with pytest.raises(ValueError):
        BinningSpec(smoothing=0.0)
    with pytest.raises(ValueError):
        js_divergence([], [1.0])


@pytest.fixture(scope="module")
def real():
    return generate_ground_truth(GroundTruthConfig.default(), 120, seed=7)


def test_ajs_identical_is_zero(real):
    assert ajs(real, real) == 0.0


def test_ajs_order_invariant(real):
    perm = np.random.default_rng(1).permutation(real.n)
    shuffled = real.subset(perm)
    other = generate_ground_truth(GroundTruthConfig.default(), 120, seed=8)
    assert ajs(shuffled, other) == pytest.approx(ajs(real, other), abs=1e-15)


def test_ajs_empty_class(real):
    low_only = real.subset(np.flatnonzero(real.labels == 0))
    with pytest.raises(EmptyClassError):
        ajs(real, low_only)


def test_ajs_disjoint(real):
    zeros = Cohort(real.ids, np.zeros_like(real.minutes), real.labels)
    # every summary feature, spread included, is bounded away from zero
    weeks = 60 + 40 * (np.arange(17) % 2)
    offsets = np.arange(real.n) % 25
    busy = np.broadcast_to(weeks[None, None, :] + offsets[:, None, None], real.minutes.shape)
    assert ajs(zeros, Cohort(real.ids, busy.copy(), real.labels)) >= 0.999


def test_eprec_table_counts():
    records, groups = eprec_records_from_counts({"2022": (3, 5, 1), "2023": (5, 6, 0), "2024": (0, 5, 0)})
    s = eprec_aggregate(records, groups)
    assert s.per_group == {"2022": Fraction(7, 18), "2023": Fraction(3, 11), "2024": Fraction(1, 2)}
    assert s.overall == Fraction(9, 25)
    assert s.counts == {"2022": 9, "2023": 11, "2024": 5}


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.5, 1.0]), st.sampled_from("abc")), min_size=1))
def test_eprec_overall_is_exact_mean(items):
    records = [EprecRecord(f"r{i}", s) for i, (s, _) in enumerate(items)]
    s = eprec_aggregate(records, [g for _, g in items])
    assert s.overall == sum(Fraction(x) for x, _ in items) / len(items)


def test_eprec_validation():
    with pytest.raises(ValueError):
        EprecRecord("r", 0.3)
    with pytest.raises(ValueError):
        eprec_aggregate([], [])


def test_ajs_csv(tmp_path):
    write_ajs_csv([("2022", "panel", 0.25)], tmp_path / "a.csv", comments=["config_hash=x"])
    assert (tmp_path / "a.csv").read_text() == "# config_hash=x\ndataset,method,ajs\n2022,panel,0.25\n"
