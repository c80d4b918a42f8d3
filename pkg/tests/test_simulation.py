import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetlearn.learners import LearnerSpec
from targetlearn.simulation import (FIG1, REGISTRY, DgpSpec, McResult, UnsupportedEstimand,
                                    compute_metrics, oracle_truth, run_study, sample_dgp)
from targetlearn.tmle import TmleConfig

LIGHT = TmleConfig(q_roster=(LearnerSpec("mean"), LearnerSpec("ols_interact")),
                   g_roster=(LearnerSpec("mean"), LearnerSpec("logistic")), V=3)


def test_noiseless_null_sample_is_m0():
    spec = replace(FIG1, tau0=(0.0,), noise_sd=0.0)
    ds = sample_dgp(spec, 50, seed=3)
    np.testing.assert_array_equal(ds.outcome, spec.m0_at(ds.covariates[:, 0]))


def test_strong_propensity_treats_everyone():
    spec = replace(FIG1, g_intercept=10.0, g_slope=0.0)
    assert spec.g0(0.0) >= 1 - 1e-4
    ds = sample_dgp(spec, 2000, seed=1)
    assert ds.treatment.mean() >= 0.999


def test_sampling_is_deterministic():
    a, b = sample_dgp(FIG1, 100, 9, rep=4), sample_dgp(FIG1, 100, 9, rep=4)
    for x, y in ((a.covariates, b.covariates), (a.treatment, b.treatment),
                 (a.outcome, b.outcome)):
        assert x.tobytes() == y.tobytes()
    c = sample_dgp(FIG1, 100, 9, rep=5)
    assert not np.array_equal(a.outcome, c.outcome)


def test_sample_moments_follow_the_dgp():
    ds = sample_dgp(FIG1, 100_000, seed=2)
    w = ds.covariates[:, 0]
    assert 0 <= w.min() and w.max() <= 10
    # E[g0(W)] is the mean outcome of a DGP with m0 = 0 and tau0 = 1
    treated = oracle_truth(replace(FIG1, m0=(0.0,), tau0=(1.0,)), "MeanOutcome").psi0
    assert abs(ds.treatment.mean() - treated) < 0.005
    resid = ds.outcome - FIG1.qbar(ds.treatment, w)
    assert abs(resid.mean()) < 0.02 and abs(resid.std() - 1) < 0.02


def test_truth_examples():
    assert oracle_truth(FIG1, "ATE", "analytic").psi0 == pytest.approx(0.0, abs=1e-14)
    assert oracle_truth(FIG1, "ATE").psi0 == pytest.approx(0.0, abs=1e-12)
    rc = oracle_truth(FIG1, "RuleContrast")
    assert rc.psi0 == pytest.approx(0.18135309636946, abs=1e-10)
    sym = oracle_truth(REGISTRY["fig1-symmetric"].dgp, "RuleContrast")
    assert sym.psi0 == pytest.approx(0.164, abs=5e-4)
    const = replace(FIG1, tau0=(0.7,))
    for method in ("analytic", "quadrature"):
        assert oracle_truth(const, "ATE", method).psi0 == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(UnsupportedEstimand):
        oracle_truth(FIG1, "PAR", "analytic")
    with pytest.raises(UnsupportedEstimand):
        oracle_truth(FIG1, "Median")


def test_rule_contrast_equals_its_two_pieces():
    # E[tau0 (d_opt - g0)] = E[tau0 d_opt] - E[tau0 g0]; both pieces by brute Riemann sums
    w = (np.arange(2_000_000) + 0.5) / 2_000_000 * 10
    tau = FIG1.tau0_at(w)
    brute = np.mean(tau * (tau >= 0)) - np.mean(tau * FIG1.g0(w))
    assert oracle_truth(FIG1, "RuleContrast").psi0 == pytest.approx(brute, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1, 1), st.floats(-0.5, 0.5), st.floats(-3, 1), st.floats(-0.6, 0.6),
       st.sampled_from(["ATE", "PAR", "MeanOutcome", "RuleContrast"]))
def test_truth_methods_agree(t0, t1, gi, gs, estimand):
    spec = replace(FIG1, tau0=(t0, t1), g_intercept=gi, g_slope=gs)
    quad = oracle_truth(spec, estimand)
    mc = oracle_truth(spec, estimand, "mc_oracle", draws=400_000, seed=3)
    assert abs(quad.psi0 - mc.psi0) <= 3 * math.hypot(quad.se, mc.se) + 1e-12


def test_dgp_validation():
    with pytest.raises(ValueError):
        replace(FIG1, w_hi=-1.0)
    with pytest.raises(ValueError):
        replace(FIG1, noise_sd=-1.0)
    with pytest.raises(ValueError):
        replace(FIG1, outcome_kind="binary")
    with pytest.raises(ValueError):
        DgpSpec("x", 0, 1, (0.0,), (0.0,), g_intercept=1000.0, g_slope=0.0)


def test_single_rep_has_one_row_per_estimator():
    mc = run_study("fig1", n=60, reps=1, seed=2, config=LIGHT)
    assert [r["estimator"] for r in mc.rows] == ["glm", "sl", "tmle"]
    assert mc.psi0 == 0.0
    assert mc.to_csv().splitlines()[0] == "rep,estimator,psi,ci_lo,ci_hi,covered,failed"


def test_parallel_study_is_bit_identical():
    one = run_study("fig1", n=60, reps=8, seed=4, threads=1, config=LIGHT)
    many = run_study("fig1", n=60, reps=8, seed=4, threads=8, config=LIGHT)
    assert one.to_csv() == many.to_csv()


def test_study_argument_checks():
    with pytest.raises(ValueError):
        run_study("fig1", ("glm", "magic"), reps=1)
    with pytest.raises(ValueError):
        run_study("fig1", ("glm",), reps=1, estimand="PAR")
    with pytest.raises(UnsupportedEstimand):
        run_study("fig1", ("tmle",), reps=1, estimand="MeanOutcome")
    with pytest.raises(ValueError):
        run_study("no-such-dgp", reps=1)


def _result(psis, cis=None, psi0=0.0):
    mc = McResult("t", "ATE", 10, len(psis), 1, psi0)
    for i, p in enumerate(psis):
        lo, hi = cis[i] if cis else (p, p)
        mc.rows.append({"rep": i, "estimator": "tmle", "psi": p, "ci_lo": lo, "ci_hi": hi,
                        "covered": lo <= psi0 <= hi, "failed": False})
    return mc


def test_metrics_examples():
    m = compute_metrics(_result([0.3] * 5, psi0=0.3))["tmle"]
    assert (m["bias"], m["variance"], m["mse"], m["coverage"], m["mean_ci_width"]) == (
        0.0, 0.0, 0.0, 1.0, 0.0)
    m = compute_metrics(_result([0.0, 2.0]))["tmle"]
    assert (m["bias"], m["variance"], m["mse"]) == (1.0, 1.0, 2.0)
    mc = _result([1.0, 2.0])
    mc.rows.append({"rep": 2, "estimator": "tmle", "psi": None, "ci_lo": None, "ci_hi": None,
                    "covered": None, "failed": True})
    m = compute_metrics(mc)["tmle"]
    assert (m["reps"], m["failures"]) == (2, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(-1e3, 1e3))
def test_mse_decomposition(psis, psi0):
    m = compute_metrics(_result(psis, psi0=psi0))["tmle"]
    assert m["mse"] == pytest.approx(m["bias"] ** 2 + m["variance"], rel=1e-10, abs=1e-10)
