import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage.audit import (
    DataDistribution,
    DistributionTooSmall,
    DpSummaryMechanism,
    GaussianFit,
    RequestMechanism,
    ShadowConfig,
    advantage,
    audit_requests,
    constant_request,
    curve_of_scores,
    fit_output_gaussians,
    identity_leak_request,
    log_likelihood_ratio,
    make_shadow_datasets,
    origin_id,
    request_scores,
    select_candidates,
)
from twostage.cohort import GroundTruthConfig, generate_ground_truth
from twostage.dp import PrivacyBudget
from twostage.tradeoff import TradeoffCurve, g_mu_eval
from twostage.validate import SdcPolicy, default_requests

LEAKY = SdcPolicy(min_cell=1, forbid_extrema=False)


@pytest.fixture(scope="module")
def real():
    return generate_ground_truth(GroundTruthConfig.default(), 120, seed=11, year="2022")


@pytest.fixture(scope="module")
def dist(real):
    return DataDistribution.bootstrap(real)


def test_shadow_membership(real, dist):
    target = real.records[4]
    ins, outs = make_shadow_datasets(dist, target, 30, ShadowConfig(num_in=5, num_out=5, seed=1))
    for d in ins:
        assert d.n == 30
        origins = [origin_id(i) for i in d.ids]
        assert origins.count(target.id) == 1
        assert origins[-1] == target.id
        assert np.array_equal(d.minutes[-1], target.minutes)
    for d in outs:
        assert target.id not in {origin_id(i) for i in d.ids}


def test_shadow_from_generator(real):
    dist = DataDistribution.generator(GroundTruthConfig.default())
    ins, outs = make_shadow_datasets(dist, real.records[0], 20, ShadowConfig(2, 2, seed=0))
    assert ins[0].n == outs[0].n == 20


def test_shadow_reproducible(real, dist):
    cfg = ShadowConfig(3, 3, seed=9)
    a = make_shadow_datasets(dist, real.records[1], 25, cfg)
    b = make_shadow_datasets(dist, real.records[1], 25, cfg)
    assert all(x == y for x, y in zip(a[0] + a[1], b[0] + b[1]))


def test_distribution_too_small(real):
    one = real.subset([0])
    with pytest.raises(DistributionTooSmall):
        make_shadow_datasets(DataDistribution.bootstrap(one), one.records[0], 5, ShadowConfig(2, 2))


def test_shadow_config_validation():
    with pytest.raises(ValueError):
        ShadowConfig(num_in=1)


def test_gaussian_fit_floor():
    fit = fit_output_gaussians([[5.0], [5.0]], [[5.0], [5.0]])
    assert fit.sigma_in[0] == pytest.approx(5e-6)
    tiny = fit_output_gaussians([[0.0], [0.0]], [[0.0], [0.0]])
    assert tiny.sigma_in[0] == 1e-8


def test_llr_by_hand():
    fit = GaussianFit(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([2.0]))
    # log N(0.5;1,1) - log N(0.5;0,2)
    expected = (-0.5 * 0.25) - (-np.log(2.0) - 0.5 * 0.0625)
    assert log_likelihood_ratio([np.array([0.5])], [fit]) == pytest.approx(expected)
    assert log_likelihood_ratio([None], [fit]) == 0.0
    with pytest.raises(ValueError):
        log_likelihood_ratio([np.array([1.0, 2.0])], [fit])


def test_loo_scores_match_naive_refits():
    rng = np.random.default_rng(0)
    y_in = [rng.normal(1.0, 1.0, 3) for _ in range(9)]
    y_out = [rng.normal(0.0, 1.5, 3) for _ in range(8)]
    y_in[2] = None  # suppressed output
    s_in, s_out = request_scores(y_in, y_out)
    acc_in = [y for y in y_in if y is not None]
    for j, y in enumerate(y_in):
        if y is None:
            assert s_in[j] == 0.0
            continue
        rest = [v for k, v in enumerate(y_in) if k != j and v is not None]
        fit = fit_output_gaussians(rest, y_out)
        assert s_in[j] == pytest.approx(log_likelihood_ratio([y], [fit]), rel=1e-9)
    for j, y in enumerate(y_out):
        rest = [v for k, v in enumerate(y_out) if k != j]
        fit = fit_output_gaussians(acc_in, rest)
        assert s_out[j] == pytest.approx(log_likelihood_ratio([y], [fit]), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-2, 1e3), st.integers(0, 10_000))
def test_scores_invariant_to_output_scale(c, seed):
    rng = np.random.default_rng(seed)
    y_in = [rng.normal(1.0, 1.0, 2) for _ in range(6)]
    y_out = [rng.normal(0.0, 1.0, 2) for _ in range(6)]
    a = request_scores(y_in, y_out)
    b = request_scores([c * y for y in y_in], [c * y for y in y_out])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-6, atol=1e-8)


def test_advantage_of_gaussian_curve():
    grid = np.linspace(0, 1, 2001)
    curve = TradeoffCurve.from_points(list(zip(grid, g_mu_eval(1.0, grid))))
    # max_alpha (1 - alpha - G_1(alpha)) = 2 Phi(1/2) - 1
    assert advantage(curve) == pytest.approx(0.38292492254802624, abs=1e-6)


def test_tied_scores_give_diagonal():
    curve = curve_of_scores(np.zeros(64), np.zeros(64))
    np.testing.assert_allclose(curve.fnr, 1 - curve.fpr, atol=1e-12)
    assert advantage(curve) == 0.0


def test_mechanisms(real):
    leak = RequestMechanism(identity_leak_request(), LEAKY)
    assert leak.dim == 1
    assert leak(real, 0)[0] == real.minutes[-1, 3].sum()
    assert RequestMechanism(identity_leak_request())(real, 0) is None
    dp = DpSummaryMechanism(PrivacyBudget(1.0, 1e-3))
    assert not np.array_equal(dp(real, 1), dp(real, 2))


def test_empty_request_list(real, dist):
    rep = audit_requests([], dist, 120, real.records[:1], stage1_mu=0.5)
    assert rep.total_mu == 0.5
    assert rep.rows == ()


def test_constant_request_is_null(real, dist):
    rep = audit_requests([constant_request(3.0)], dist, 120, real.records[:2], 0.4, ShadowConfig(seed=1))
    row = rep.rows[0]
    assert row.nu_hat == 0.0 and row.advantage == 0.0
    assert row.total_mu == pytest.approx(0.4)


def test_identity_leak_detected(real, dist):
    target = select_candidates(real, seed=0)[0]
    rep = audit_requests([identity_leak_request()], dist, 120, [target], 0.0, ShadowConfig(seed=2), LEAKY)
    assert rep.rows[0].advantage >= 0.9
    assert rep.rows[0].nu_hat >= 2.0


def test_report_structure_and_composition(real, dist, tmp_path):
    targets = select_candidates(real, n_far=2, n_random=1, seed=0)
    rep = audit_requests(default_requests(), dist, 120, targets, 0.3884, ShadowConfig(16, 16, seed=3))
    assert len(rep.rows) == 5
    assert set(rep.per_target) == {t.id for t in targets}
    for row in rep.rows:
        assert row.total_mu == pytest.approx(np.hypot(0.3884, row.nu_hat))
        worst = rep.per_target[row.worst_target][row.request_index - 1]
        assert worst.nu == row.nu_hat
        assert all(r[row.request_index - 1].nu <= row.nu_hat for r in rep.per_target.values())
    rep.write_csv(tmp_path / "a.csv", comments=["config_hash=x"])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[1] == "request_index,nu_hat,regret,advantage,total_mu"
    assert len(lines) == 2 + 5
    json.dumps(rep.to_dict())


def test_parallel_matches_sequential(real, dist):
    targets = select_candidates(real, n_far=2, n_random=2, seed=1)
    cfg = ShadowConfig(12, 12, seed=4)
    a = audit_requests(default_requests()[:2], dist, 120, targets, 0.3, cfg)
    b = audit_requests(default_requests()[:2], dist, 120, targets, 0.3, cfg, max_workers=4)
    assert a.to_dict() == b.to_dict()


def test_select_candidates(real):
    c = select_candidates(real, n_far=3, n_random=4, seed=0)
    assert len(c) == 7
    assert len({r.id for r in c}) == 7
    assert len(select_candidates(real, exhaustive=True)) == real.n
