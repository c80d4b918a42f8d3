import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetlearn.data import Dataset
from targetlearn.learners import LearnerSpec
from targetlearn.simulation import FIG1, sample_dgp
from targetlearn.tmle import (ATE, MEAN_OUTCOME, PAR, NuisanceFits, RuleContrast, RuleMean,
                              SingleArmData, TmleConfig, TooFewObservations, Z_95,
                              baseline_glm_ate, baseline_sl_plugin, clever_covariate, eic,
                              estimate, fit_nuisance, fluctuate, infer, point_estimate)

MEAN = (LearnerSpec("mean"),)
REPORT_KEYS = {"estimand", "method", "psi", "se", "ci_lower", "ci_upper", "level", "n",
               "variance_mode", "eic_mean", "eic_var", "g_min", "g_max", "g_truncated_count",
               "seed"}


def small_config(**kw):
    base = dict(q_roster=(LearnerSpec("ols_interact"), LearnerSpec("mean")),
                g_roster=(LearnerSpec("logistic"), LearnerSpec("mean")), V=5)
    base.update(kw)
    return TmleConfig(**base)


def random_dataset(seed, n, binary=False):
    r = np.random.default_rng(seed)
    W = r.normal(size=(n, 2))
    g = 1 / (1 + np.exp(-(0.4 * W[:, 0] - 0.3 * W[:, 1])))
    A = (r.uniform(size=n) < g).astype(float)
    A[:2] = [0, 1]
    mean = 0.5 * W[:, 0] + A * (1 + W[:, 1])
    if binary:
        Y = (r.uniform(size=n) < 1 / (1 + np.exp(-mean))).astype(float)
        return Dataset(W, A, Y, "binary")
    return Dataset(W, A, mean + r.normal(size=n))


def nuisance(q1, q0, A, g1, delta=0.01):
    q1, q0, A = map(np.asarray, (q1, q0, A))
    return NuisanceFits(q1, q0, np.where(A == 1, q1, q0), np.asarray(g1), (delta, 1 - delta),
                        0, None, None)


def test_clever_covariate_examples():
    assert clever_covariate(ATE, np.array([1.0]), np.array([0.5]))[0] == 2.0
    assert clever_covariate(ATE, np.array([0.0]), np.array([0.25]))[0] == pytest.approx(-1 / 0.75)
    assert clever_covariate(PAR, np.array([1.0, 0.0]), np.array([0.25, 0.25])).tolist() == [4, 0]
    assert not np.any(clever_covariate(MEAN_OUTCOME, np.ones(3), np.full(3, 0.3)))
    rule = np.array([1.0, 0.0, 1.0])
    H = clever_covariate(RuleMean(rule), np.array([1.0, 0.0, 0.0]), np.full(3, 0.5))
    assert H.tolist() == [2.0, 2.0, 0.0]


def test_fluctuate_orthogonal_residuals_give_zero_epsilon():
    A = np.array([1.0, 1.0, 0.0, 0.0])
    g = np.full(4, 0.5)
    nf = nuisance([1.0] * 4, [0.0] * 4, A, g)
    H = clever_covariate(ATE, A, g)
    Y = np.array([2.0, 0.0, 1.0, -1.0])  # residuals (1, -1, 1, -1) sum to zero within arm
    tr = fluctuate(nf, H, clever_covariate(ATE, np.ones(4), g), clever_covariate(ATE, np.zeros(4), g), Y)
    assert tr.epsilon == 0.0
    np.testing.assert_array_equal(tr.qbar1_star, nf.qbar1)


def test_fluctuate_zero_covariate():
    nf = nuisance(np.ones(3), np.zeros(3), np.array([1.0, 0, 1]), np.full(3, 0.5))
    tr = fluctuate(nf, np.zeros(3), np.zeros(3), np.zeros(3), np.ones(3), "logistic")
    assert tr.epsilon == 0.0 and tr.iterations == 0 and tr.converged


def test_point_estimate_examples():
    q0 = np.array([0.1, 0.5, 2.0])
    assert point_estimate(ATE, q0 + 0.3, q0, np.zeros(3)) == pytest.approx(0.3)
    Y = np.array([1.0, 2.0, 6.0])
    assert point_estimate(PAR, np.full(3, Y.mean()), q0, Y) == 0.0
    assert point_estimate(MEAN_OUTCOME, q0, q0, Y) == 3.0
    rule = np.array([1.0, 0.0, 1.0])
    q1 = np.array([5.0, 7.0, 9.0])
    assert point_estimate(RuleMean(rule), q1, q0, Y) == pytest.approx((5 + 0.5 + 9) / 3)
    assert point_estimate(RuleContrast(rule), q1, q0, Y) == pytest.approx((5 + 0.5 + 9) / 3 - 3)


def test_eic_mean_outcome_example():
    D = eic(MEAN_OUTCOME, None, None, None, None, np.array([0.0, 2.0]), 1.0)
    assert D.tolist() == [-1.0, 1.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_rule_contrast_curve_is_difference(seed):
    r = np.random.default_rng(seed)
    n = 20
    A = r.integers(0, 2, n).astype(float)
    rule = r.integers(0, 2, n).astype(float)
    g = r.uniform(0.1, 0.9, n)
    q1, q0, Y = r.normal(size=n), r.normal(size=n), r.normal(size=n)
    q_obs = np.where(A == 1, q1, q0)
    H = clever_covariate(RuleMean(rule), A, g)
    psi_rc = point_estimate(RuleContrast(rule), q1, q0, Y)
    d_rc = eic(RuleContrast(rule), q1, q0, q_obs, H, Y, psi_rc)
    d_rm = eic(RuleMean(rule), q1, q0, q_obs, H, Y, psi_rc + Y.mean())
    d_mo = eic(MEAN_OUTCOME, q1, q0, q_obs, H, Y, Y.mean())
    assert np.array_equal(d_rc, d_rm - d_mo)


def test_infer_examples():
    out = infer(0.5, np.array([-1.0, 1.0]))
    assert out["sigma2"] == 2.0 and out["se"] == 1.0
    assert out["ci"] == (0.5 - Z_95, 0.5 + Z_95)
    out = infer(0.5, np.zeros(5))
    assert out["se"] == 0.0 and out["degenerate"] and out["ci"] == (0.5, 0.5)
    assert infer(0.0, np.array([-1.0, 1.0]), level=0.9)["z"] == pytest.approx(1.6448536269514722)
    with pytest.raises(TooFewObservations):
        infer(0.0, np.array([1.0]))


def test_known_g_skips_propensity_fit():
    ds = random_dataset(1, 40)
    nf = fit_nuisance(ds, small_config(known_g=0.5))
    assert nf.g_fit is None
    assert np.all(nf.g1 == 0.5)


def test_propensity_truncation_counts():
    r = np.random.default_rng(2)
    w = np.sort(r.uniform(-1, 1, 200))
    A = (r.uniform(size=200) < 1 / (1 + np.exp(-12 * w))).astype(float)
    ds = Dataset(w, A, r.normal(size=200))
    nf = fit_nuisance(ds, TmleConfig(q_roster=MEAN, g_roster=(LearnerSpec("logistic"),), V=5,
                                     delta=0.01))
    assert nf.g1.min() >= 0.01 and nf.g1.max() <= 0.99
    raw = nf.g1_raw
    assert nf.g_truncated_count == int(np.sum((raw < 0.01) | (raw > 0.99))) > 0
    np.testing.assert_array_equal(nf.g1[raw < 0.01], 0.01)


def test_independent_treatment_and_mean_roster():
    ds = random_dataset(3, 50)
    nf = fit_nuisance(ds, TmleConfig(q_roster=MEAN, g_roster=MEAN, V=5))
    np.testing.assert_allclose(nf.qbar1, ds.outcome.mean(), atol=1e-12)
    np.testing.assert_allclose(nf.qbar0, ds.outcome.mean(), atol=1e-12)


def test_single_arm_rejected_unless_g_known():
    ds = Dataset(np.arange(10.0), np.ones(10), np.arange(10.0))
    with pytest.raises(SingleArmData):
        estimate(ds, ATE, small_config())
    rep = estimate(ds, ATE, small_config(known_g=0.5, q_roster=MEAN))
    assert np.isfinite(rep.psi)


def _fig1(n, seed):
    return sample_dgp(FIG1, n, seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([30, 80]), st.sampled_from(["ATE", "PAR", "RuleMean"]))
def test_score_equation_solved(seed, n, kind):
    ds = random_dataset(seed, n)
    est = {"ATE": ATE, "PAR": PAR}.get(kind) or RuleMean((ds.covariates[:, 1] > 0).astype(float))
    rep = estimate(ds, est, small_config(seed=seed))
    assert abs(rep.eic_values.mean()) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_binary_outcome_bounds_and_score(seed):
    ds = random_dataset(seed, 60, binary=True)
    cfg = small_config(q_roster=(LearnerSpec("logistic", basis="interact"), LearnerSpec("mean")))
    rep = estimate(ds, ATE, cfg)
    assert -1 <= rep.psi <= 1
    assert rep.diagnostics["targeting"]["fluctuation"] == "logistic"
    if rep.diagnostics["targeting"]["converged"]:
        assert abs(rep.eic_values.mean()) <= 1e-8
    rule = (ds.covariates[:, 0] > 0).astype(float)
    rep = estimate(ds, RuleMean(rule), cfg)
    assert 0 <= rep.psi <= 1
    rep = estimate(ds, MEAN_OUTCOME, cfg)
    assert 0 <= rep.psi <= 1


def test_logistic_fluctuation_on_rescaled_continuous_outcome():
    ds = random_dataset(4, 80)
    rep = estimate(ds, ATE, small_config(fluctuation="logistic"))
    assert rep.diagnostics["outcome_scale"] == [ds.outcome.min(), ds.outcome.max()]
    assert abs(rep.eic_values.mean()) <= 1e-8


def test_mean_outcome_reduces_to_sample_mean():
    ds = random_dataset(5, 30)
    rep = estimate(ds, MEAN_OUTCOME, small_config())
    assert rep.psi == pytest.approx(ds.outcome.mean(), abs=1e-14)
    assert rep.se == pytest.approx(np.std(ds.outcome, ddof=1) / math.sqrt(30), abs=1e-14)


def test_rct_mode_matches_straight_line_pipeline():
    ds = random_dataset(6, 70)
    cfg = TmleConfig(q_roster=(LearnerSpec("ols_interact"),), g_roster=MEAN, V=5, known_g=0.5)
    rep = estimate(ds, ATE, cfg)
    W, A, Y = ds.covariates, ds.treatment, ds.outcome
    X = np.column_stack([np.ones(70), A, W, A[:, None] * W])
    beta = np.linalg.lstsq(X, Y, rcond=None)[0]
    q1 = np.column_stack([np.ones(70), np.ones(70), W, W]) @ beta
    q0 = np.column_stack([np.ones(70), np.zeros(70), W, 0 * W]) @ beta
    qa = np.where(A == 1, q1, q0)
    H = np.where(A == 1, 2.0, -2.0)
    eps = np.sum(H * (Y - qa)) / np.sum(H * H)
    psi = np.mean((q1 + 2 * eps) - (q0 - 2 * eps))
    assert rep.psi == pytest.approx(psi, abs=1e-8)


def test_report_invariants_on_fig1_sample():
    ds = _fig1(100, 1)
    rep = estimate(ds, ATE, TmleConfig(seed=1))
    lo, hi = rep.ci
    assert lo == pytest.approx(rep.psi - Z_95 * rep.se, abs=1e-15)
    assert hi == pytest.approx(rep.psi + Z_95 * rep.se, abs=1e-15)
    assert abs(rep.eic_values.mean()) <= 1e-8
    d = rep.to_dict()
    assert REPORT_KEYS <= set(d)
    json.dumps(d, allow_nan=False)
    assert 0.01 <= d["g_min"] <= d["g_max"] <= 0.99
    again = estimate(ds, ATE, TmleConfig(seed=1))
    assert again.psi == rep.psi and again.se == rep.se


def test_affine_equivariance():
    # exact when the outcome fit is itself affine equivariant (one linear candidate)
    ds = random_dataset(7, 60)
    cfg = small_config(q_roster=(LearnerSpec("ols_interact"),))
    a, b = 3.5, -2.0
    r1 = estimate(ds, ATE, cfg)
    r2 = estimate(ds.with_outcome(a * ds.outcome + b), ATE, cfg)
    assert r2.psi == pytest.approx(a * r1.psi, rel=1e-12, abs=1e-12)
    assert r2.se == pytest.approx(a * r1.se, rel=1e-12)
    truth = 0.7
    assert (r1.ci[0] <= truth <= r1.ci[1]) == (r2.ci[0] <= a * truth <= r2.ci[1])


def test_affine_equivariance_with_ensemble_up_to_meta_tolerance():
    # the meta-learner stops on an absolute risk tolerance, which is not scale free
    ds = random_dataset(7, 60)
    cfg = small_config()
    r1 = estimate(ds, ATE, cfg)
    r2 = estimate(ds.with_outcome(3.5 * ds.outcome - 2.0), ATE, cfg)
    assert r2.psi == pytest.approx(3.5 * r1.psi, rel=1e-5)


def test_crossval_variance_runs_and_reports_mode():
    ds = random_dataset(8, 60)
    rep = estimate(ds, ATE, small_config(variance_mode="crossval"))
    assert rep.variance_mode == "crossval" and rep.se > 0


def test_no_covariates_flagged_and_glm_identity():
    r = np.random.default_rng(9)
    A = np.tile([0.0, 1.0], 15)
    Y = r.normal(size=30) + A
    ds = Dataset(np.zeros((30, 0)), A, Y)
    rep = estimate(ds, ATE, small_config(q_roster=(LearnerSpec("ols"),)))
    assert "no_covariates" in rep.diagnostics["flags"]
    diff = Y[A == 1].mean() - Y[A == 0].mean()
    assert rep.psi == pytest.approx(diff, abs=1e-10)
    assert baseline_glm_ate(ds).psi == pytest.approx(diff, abs=1e-12)


def test_glm_unbiased_under_linear_model():
    psis, ses = [], []
    for rep in range(500):
        r = np.random.default_rng(10_000 + rep)
        W = r.normal(size=(100, 1))
        A = r.integers(0, 2, 100).astype(float)
        Y = 1 + 0.5 * A + W[:, 0] + r.normal(size=100)
        out = baseline_glm_ate(Dataset(W, A, Y))
        psis.append(out.psi)
        ses.append(out.se)
    psis = np.array(psis)
    mc_se = psis.std() / math.sqrt(psis.size)
    assert abs(psis.mean() - 0.5) <= 2 * mc_se


def test_glm_biased_on_fig1_at_large_n():
    ds = sample_dgp(FIG1, 100_000, seed=11)
    out = baseline_glm_ate(ds)
    assert abs(out.psi - 0.0) > 5 * out.se


def test_sl_plugin_examples():
    ds = random_dataset(12, 50)
    rep = baseline_sl_plugin(ds, small_config(q_roster=MEAN))
    assert rep.psi == 0.0 and rep.se is None and rep.ci is None
    d = rep.to_dict()
    assert d["ci_lower"] is None and d["method"] == "sl_plugin"
    # with a saturated-free constant fit and a randomized design, targeting moves nothing
    A = np.tile([0.0, 1.0], 10)
    Y = np.tile([1.0, 3.0, 5.0, 7.0], 5)
    W = np.tile([0.0, 1.0, 0.0, 1.0], 5)
    cfg = TmleConfig(q_roster=(LearnerSpec("ols_interact"),), g_roster=MEAN, V=4, known_g=0.5)
    ds2 = Dataset(W, A, Y)
    tm = estimate(ds2, ATE, cfg)
    assert tm.diagnostics["targeting"]["epsilon"] == pytest.approx(0.0, abs=1e-12)
    assert baseline_sl_plugin(ds2, cfg).psi == pytest.approx(tm.psi, abs=1e-12)


def test_too_few_observations():
    ds = Dataset(np.zeros((1, 1)), [1.0], [1.0])
    with pytest.raises(TooFewObservations):
        estimate(ds, ATE, small_config(known_g=0.5))


@pytest.mark.slow
def test_crossval_se_is_conservative_on_fig1():
    wider = 0
    for rep in range(200):
        ds = sample_dgp(FIG1, 100, seed=21, rep=rep)
        cfg = TmleConfig(seed=rep + 1)
        nf = fit_nuisance(ds, cfg)
        plug = estimate(ds, ATE, cfg, nf)
        cv = estimate(ds, ATE, TmleConfig(seed=rep + 1, variance_mode="crossval"), nf)
        wider += cv.se >= plug.se
    assert wider >= 180
