"""Targeted maximum likelihood estimation with influence-curve inference.

The pipeline is ``fit_nuisance -> clever_covariate -> fluctuate ->
point_estimate -> eic -> infer``, wrapped by :func:`estimate`. Two reference
estimators sit alongside it: the main-terms linear regression coefficient
(:func:`baseline_glm_ate`) and the untargeted Super Learner substitution
estimator (:func:`baseline_sl_plugin`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import Dataset
from .learners import LearnerSpec, expand_basis, solve_logistic
from .positivity import positivity_report
from .super_learner import SuperLearnerFit, fit_super_learner, sl_predict

Z_95 = 1.959964
KINDS = ("ATE", "PAR", "MeanOutcome", "RuleMean", "RuleContrast")

DEFAULT_Q_ROSTER = (
    LearnerSpec("mean"),
    LearnerSpec("ols"),
    LearnerSpec("ols_interact"),
    LearnerSpec("poly2"),
    LearnerSpec("lasso", lam=0.01),
    LearnerSpec("lasso", lam=0.1),
    LearnerSpec("lasso", lam=1.0),
    LearnerSpec("knn", k=5),
    LearnerSpec("knn", k=20),
    LearnerSpec("cart", max_depth=3),
)
DEFAULT_G_ROSTER = (
    LearnerSpec("mean"),
    LearnerSpec("logistic"),
    LearnerSpec("logistic", basis="poly2"),
    LearnerSpec("cart", max_depth=3),
)


class SingleArmData(ValueError):
    pass


class TooFewObservations(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Estimand:
    """Target parameter; rule-based kinds carry the per-unit assignment d(W_i)."""

    kind: str
    rule: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimand {self.kind!r}")
        if self.kind in ("RuleMean", "RuleContrast"):
            if self.rule is None:
                raise ValueError(f"{self.kind} needs a rule")
            rule = np.asarray(self.rule, dtype=float).reshape(-1)
            if np.any((rule != 0) & (rule != 1)):
                raise ValueError("rule assignments must be 0 or 1")
            object.__setattr__(self, "rule", rule)

    @property
    def label(self) -> str:
        return self.kind

    def subset(self, idx) -> "Estimand":
        return self if self.rule is None else Estimand(self.kind, self.rule[idx])


ATE = Estimand("ATE")
PAR = Estimand("PAR")
MEAN_OUTCOME = Estimand("MeanOutcome")


def RuleMean(rule) -> Estimand:
    return Estimand("RuleMean", rule)


def RuleContrast(rule) -> Estimand:
    return Estimand("RuleContrast", rule)


@dataclass(frozen=True)
class TmleConfig:
    q_roster: tuple = DEFAULT_Q_ROSTER
    g_roster: tuple = DEFAULT_G_ROSTER
    V: int = 10
    seed: int = 1
    delta: float = 0.01
    fluctuation: str | None = None
    variance_mode: str = "plugin"
    level: float = 0.95
    known_g: float | None = None
    sl_mode: str = "ensemble"
    q_bound: float = 1e-6

    def fluctuation_for(self, outcome_kind) -> str:
        if self.fluctuation is not None:
            return self.fluctuation
        return "logistic" if outcome_kind == "binary" else "linear"


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    qbar1: np.ndarray
    qbar0: np.ndarray
    qbar_obs: np.ndarray
    g1: np.ndarray
    g_bounds: tuple
    g_truncated_count: int
    q_fit: SuperLearnerFit | None
    g_fit: SuperLearnerFit | None
    outcome_scale: tuple | None = None
    g1_raw: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class TargetingResult:
    epsilon: float
    fluctuation: str
    converged: bool
    iterations: int
    qbar1_star: np.ndarray
    qbar0_star: np.ndarray
    qbar_obs_star: np.ndarray


@dataclass(eq=False)
class EstimateReport:
    estimand: str
    method: str
    psi: float
    se: float | None
    ci: tuple | None
    level: float
    n: int
    eic_values: np.ndarray | None
    variance_mode: str | None
    seed: int | None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        eic = self.eic_values
        diag = self.diagnostics
        return {
            "estimand": self.estimand,
            "method": self.method,
            "psi": self.psi,
            "se": self.se,
            "ci_lower": None if self.ci is None else self.ci[0],
            "ci_upper": None if self.ci is None else self.ci[1],
            "level": self.level,
            "n": self.n,
            "variance_mode": self.variance_mode,
            "eic_mean": None if eic is None else float(np.mean(eic)),
            "eic_var": None if eic is None or eic.size < 2 else float(np.var(eic, ddof=1)),
            "g_min": diag.get("g_min"),
            "g_max": diag.get("g_max"),
            "g_truncated_count": diag.get("g_truncated_count"),
            "seed": self.seed,
            "diagnostics": diag,
        }


def z_quantile(level) -> float:
    if level == 0.95:
        return Z_95
    return float(norm.ppf(0.5 + level / 2.0))


def _predict_nuisance(q_fit, g_fit, W, config, sl_mode):
    n = W.shape[0]
    q1 = sl_predict(q_fit, W, np.ones(n), sl_mode)
    q0 = sl_predict(q_fit, W, np.zeros(n), sl_mode)
    if g_fit is None:
        # no propensity model: known design probability, or a placeholder when
        # only the outcome regression is wanted (plug-in baseline)
        g_raw = np.full(n, 0.5 if config.known_g is None else float(config.known_g))
    else:
        g_raw = sl_predict(g_fit, W, None, sl_mode)
    return q1, q0, g_raw


def _assemble(q1, q0, g_raw, A, config, q_fit, g_fit, outcome_scale):
    lo, hi = config.delta, 1.0 - config.delta
    g1 = np.clip(g_raw, lo, hi)
    truncated = int(np.sum((g_raw < lo) | (g_raw > hi)))
    q_obs = np.where(A == 1, q1, q0)
    return NuisanceFits(q1, q0, q_obs, g1, (lo, hi), truncated, q_fit, g_fit,
                        outcome_scale, g_raw)


def fit_nuisance(ds: Dataset, config: TmleConfig = TmleConfig(), need_g=True) -> NuisanceFits:
    """Super Learner fits of E(Y | A, W) and P(A = 1 | W).

    The propensity is truncated into ``[delta, 1 - delta]``. With
    ``config.known_g`` set (randomized design) no propensity model is fit.
    """
    A = ds.treatment
    both_arms = 0 < A.sum() < ds.n
    if not both_arms and config.known_g is None:
        raise SingleArmData("both treatment levels are needed to fit the nuisances")
    binary = ds.outcome_kind == "binary"
    q_fit = fit_super_learner(
        config.q_roster, ds.covariates, ds.outcome, a=A, V=config.V, seed=config.seed,
        loss="binomial_loglik" if binary else "squared_error",
        strata=ds.outcome if binary else A,
    )
    g_fit = None
    if config.known_g is None and need_g:
        g_fit = fit_super_learner(config.g_roster, ds.covariates, A, V=config.V,
                                  seed=config.seed, loss="binomial_loglik", strata=A)
    q1, q0, g_raw = _predict_nuisance(q_fit, g_fit, ds.covariates, config, config.sl_mode)
    scale = None
    if config.fluctuation_for(ds.outcome_kind) == "logistic" and not binary:
        scale = (float(ds.outcome.min()), float(ds.outcome.max()))
    return _assemble(q1, q0, g_raw, A, config, q_fit, g_fit, scale)


def clever_covariate(estimand: Estimand, A, g1) -> np.ndarray:
    """Covariate whose fluctuation score is the estimand's efficient influence curve.

    Pass ``A`` forced to all ones or all zeros to get the counterfactual
    covariate used when updating ``Qbar(1, W)`` or ``Qbar(0, W)``.
    """
    A = np.asarray(A, dtype=float)
    g1 = np.asarray(g1, dtype=float)
    kind = estimand.kind
    if kind == "ATE":
        return A / g1 - (1.0 - A) / (1.0 - g1)
    if kind == "PAR":
        return A / g1
    if kind == "MeanOutcome":
        return np.zeros_like(g1)
    d = estimand.rule
    g_assigned = np.where(d == 1, g1, 1.0 - g1)
    return (A == d) / g_assigned


def _to_unit(x, scale, bound):
    lo, hi = scale
    return np.clip((x - lo) / (hi - lo), bound, 1.0 - bound)


def fluctuate(nf: NuisanceFits, H, H1, H0, Y, kind="linear", q_bound=1e-6) -> TargetingResult:
    """One-step update of the initial fit along the clever covariate.

    ``H`` is evaluated at the observed treatment, ``H1``/``H0`` at A forced to
    1 and 0. Linear: closed-form least squares ``eps = sum H r / sum H^2``.
    Logistic: offset logistic regression of Y (rescaled by
    ``nf.outcome_scale`` for continuous outcomes) on H with ``logit(Qbar)``
    as offset, updated on the logit scale and mapped back.
    """
    H = np.asarray(H, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not np.any(H):
        return TargetingResult(0.0, kind, True, 0, nf.qbar1, nf.qbar0, nf.qbar_obs)
    if kind == "linear":
        eps = float(H @ (Y - nf.qbar_obs) / (H @ H))
        return TargetingResult(eps, kind, True, 1,
                               nf.qbar1 + eps * H1, nf.qbar0 + eps * H0, nf.qbar_obs + eps * H)
    if kind != "logistic":
        raise ValueError(f"unknown fluctuation {kind!r}")
    scale = nf.outcome_scale or (0.0, 1.0)
    lo, hi = scale
    ys = (Y - lo) / (hi - lo)
    if np.any(ys < -1e-12) or np.any(ys > 1 + 1e-12):
        raise ValueError("logistic fluctuation needs outcomes inside the outcome scale")
    ys = np.clip(ys, 0.0, 1.0)
    off_obs = logit(_to_unit(nf.qbar_obs, scale, q_bound))
    beta, converged, iterations = solve_logistic(H[:, None], ys, offset=off_obs)
    eps = float(beta[0])

    def update(q, h):
        return lo + (hi - lo) * expit(logit(_to_unit(q, scale, q_bound)) + eps * h)

    return TargetingResult(eps, kind, converged, iterations,
                           update(nf.qbar1, H1), update(nf.qbar0, H0), update(nf.qbar_obs, H))


def _rule_prediction(estimand, q1, q0):
    return np.where(estimand.rule == 1, q1, q0)


def point_estimate(estimand: Estimand, q1, q0, Y) -> float:
    """Substitution estimate, averaging over the empirical distribution of W."""
    kind = estimand.kind
    if kind == "ATE":
        return float(np.mean(q1 - q0))
    if kind == "PAR":
        return float(np.mean(q1 - Y))
    if kind == "MeanOutcome":
        return float(np.mean(Y))
    rule_mean = float(np.mean(_rule_prediction(estimand, q1, q0)))
    return rule_mean if kind == "RuleMean" else rule_mean - float(np.mean(Y))


def eic(estimand: Estimand, q1, q0, q_obs, H, Y, psi) -> np.ndarray:
    """Estimated efficient influence curve values, one per unit.

    ``H`` must be the clever covariate at the observed treatment. For
    ``RuleContrast`` the result is the RuleMean curve minus the
    MeanOutcome curve, computed literally as that difference.
    """
    Y = np.asarray(Y, dtype=float)
    kind = estimand.kind
    if kind == "MeanOutcome":
        return Y - psi
    resid = H * (Y - q_obs)
    if kind == "ATE":
        return resid + q1 - q0 - psi
    if kind == "PAR":
        return resid + q1 - Y - psi
    q_d = _rule_prediction(estimand, q1, q0)
    if kind == "RuleMean":
        return resid + q_d - psi
    ybar = float(np.mean(Y))
    rule_mean = Estimand("RuleMean", estimand.rule)
    return eic(rule_mean, q1, q0, q_obs, H, Y, psi + ybar) - eic(MEAN_OUTCOME, q1, q0, q_obs, H, Y, ybar)


def infer(psi, eic_values, level=0.95, variance_mode="plugin", fold_eics=None) -> dict:
    """Standard error and Wald interval from influence-curve values.

    ``plugin`` uses the sample variance (divisor n - 1) of ``eic_values``;
    ``crossval`` averages the sample variances of the per-fold validation
    curves in ``fold_eics``.
    """
    eic_values = np.asarray(eic_values, dtype=float)
    n = eic_values.size
    if n < 2:
        raise TooFewObservations("inference needs at least two observations")
    if variance_mode == "plugin":
        sigma2 = float(np.var(eic_values, ddof=1))
    elif variance_mode == "crossval":
        if not fold_eics:
            raise ValueError("crossval variance needs per-fold validation curves")
        usable = [np.var(d, ddof=1) for d in fold_eics if len(d) >= 2]
        if not usable:
            raise TooFewObservations("every validation fold has fewer than two units")
        sigma2 = float(np.mean(usable))
    else:
        raise ValueError(f"unknown variance mode {variance_mode!r}")
    se = math.sqrt(sigma2 / n)
    z = z_quantile(level)
    return {"sigma2": sigma2, "se": se, "ci": (psi - z * se, psi + z * se),
            "degenerate": se == 0.0, "z": z}


def _target(estimand, nf, ds, config):
    A = ds.treatment
    H = clever_covariate(estimand, A, nf.g1)
    H1 = clever_covariate(estimand, np.ones_like(A), nf.g1)
    H0 = clever_covariate(estimand, np.zeros_like(A), nf.g1)
    kind = config.fluctuation_for(ds.outcome_kind)
    tr = fluctuate(nf, H, H1, H0, ds.outcome, kind, config.q_bound)
    psi = point_estimate(estimand, tr.qbar1_star, tr.qbar0_star, ds.outcome)
    D = eic(estimand, tr.qbar1_star, tr.qbar0_star, tr.qbar_obs_star, H, ds.outcome, psi)
    return tr, psi, D


def _crossval_eics(ds, estimand, config, folds):
    """Validation-fold influence curves with nuisances refit and retargeted
    on each training split."""
    out = []
    for v in range(folds.V):
        train, valid = folds.training(v), folds.validation(v)
        dtr, dva = ds.subset(train), ds.subset(valid)
        est_tr = estimand.subset(train)
        nf_tr = fit_nuisance(dtr, config)
        tr, psi_tr, _ = _target(est_tr, nf_tr, dtr, config)
        q1, q0, g_raw = _predict_nuisance(nf_tr.q_fit, nf_tr.g_fit, dva.covariates,
                                          config, config.sl_mode)
        nf_va = _assemble(q1, q0, g_raw, dva.treatment, config, None, None,
                          nf_tr.outcome_scale)
        est_va = estimand.subset(valid)
        A = dva.treatment
        H = clever_covariate(est_va, A, nf_va.g1)
        H1 = clever_covariate(est_va, np.ones_like(A), nf_va.g1)
        H0 = clever_covariate(est_va, np.zeros_like(A), nf_va.g1)
        q1s, q0s, qos = _apply_epsilon(nf_va, tr, H, H1, H0, config.q_bound)
        out.append(eic(est_va, q1s, q0s, qos, H, dva.outcome, psi_tr))
    return out


def _apply_epsilon(nf, tr, H, H1, H0, q_bound):
    eps = tr.epsilon
    if tr.fluctuation == "linear" or eps == 0.0:
        return nf.qbar1 + eps * H1, nf.qbar0 + eps * H0, nf.qbar_obs + eps * H
    scale = nf.outcome_scale or (0.0, 1.0)
    lo, hi = scale

    def update(q, h):
        return lo + (hi - lo) * expit(logit(_to_unit(q, scale, q_bound)) + eps * h)

    return update(nf.qbar1, H1), update(nf.qbar0, H0), update(nf.qbar_obs, H)


def _nuisance_diagnostics(nf: NuisanceFits, config) -> dict:
    pos = positivity_report(nf.g1_raw if nf.g1_raw is not None else nf.g1, config.delta)
    diag = {
        "g_min": float(nf.g1.min()),
        "g_max": float(nf.g1.max()),
        "g_truncated_count": nf.g_truncated_count,
        "g_bounds": list(nf.g_bounds),
        "positivity": {k: v for k, v in pos.to_dict().items() if k != "flagged_units"},
        "q_super_learner": None if nf.q_fit is None else nf.q_fit.summary(),
        "g_super_learner": None if nf.g_fit is None else nf.g_fit.summary(),
        "known_g": config.known_g,
    }
    if nf.outcome_scale is not None:
        diag["outcome_scale"] = list(nf.outcome_scale)
    return diag


def estimate(ds: Dataset, estimand: Estimand = ATE, config: TmleConfig = TmleConfig(),
             nuisance: NuisanceFits | None = None) -> EstimateReport:
    """TMLE point estimate, influence-curve standard error and Wald interval.

    A precomputed ``nuisance`` can be passed to share Super Learner fits with
    :func:`baseline_sl_plugin`.
    """
    if ds.n < 2:
        raise TooFewObservations("estimation needs at least two observations")
    flags = []
    if ds.p == 0:
        flags.append("no_covariates")
    if estimand.kind == "MeanOutcome":
        psi = float(np.mean(ds.outcome))
        D = ds.outcome - psi
        inf = infer(psi, D, config.level, "plugin")
        if inf["degenerate"]:
            flags.append("degenerate_se")
        return EstimateReport("MeanOutcome", "tmle", psi, inf["se"], inf["ci"], config.level,
                              ds.n, D, "plugin", config.seed,
                              {"flags": flags, "targeting": {"epsilon": 0.0, "iterations": 0,
                                                             "converged": True}})
    nf = nuisance if nuisance is not None else fit_nuisance(ds, config)
    tr, psi, D = _target(estimand, nf, ds, config)
    fold_eics = None
    if config.variance_mode == "crossval":
        fold_eics = _crossval_eics(ds, estimand, config, nf.q_fit.folds)
    inf = infer(psi, D, config.level, config.variance_mode, fold_eics)
    if inf["degenerate"]:
        flags.append("degenerate_se")
    if not tr.converged:
        flags.append("targeting_not_converged")
    diag = _nuisance_diagnostics(nf, config)
    diag["targeting"] = {"epsilon": tr.epsilon, "fluctuation": tr.fluctuation,
                         "converged": tr.converged, "iterations": tr.iterations}
    diag["initial_psi"] = point_estimate(estimand, nf.qbar1, nf.qbar0, ds.outcome)
    diag["flags"] = flags
    return EstimateReport(estimand.label, "tmle", psi, inf["se"], inf["ci"], config.level,
                          ds.n, D, config.variance_mode, config.seed, diag)


def baseline_glm_ate(ds: Dataset, level=0.95) -> EstimateReport:
    """Coefficient on A from least squares of Y on [1, A, W], with the
    classical homoskedastic standard error."""
    X = expand_basis(ds.covariates, ds.treatment, "linear")
    y = ds.outcome
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = ds.n - rank
    if dof < 1:
        raise TooFewObservations("no residual degrees of freedom for the GLM")
    s2 = float(resid @ resid / dof)
    cov = s2 * np.linalg.pinv(X.T @ X)
    psi = float(coef[1])
    se = math.sqrt(max(cov[1, 1], 0.0))
    z = z_quantile(level)
    return EstimateReport("ATE", "glm", psi, se, (psi - z * se, psi + z * se), level, ds.n,
                          None, None, None, {"residual_variance": s2, "rank": int(rank)})


def baseline_sl_plugin(ds: Dataset, config: TmleConfig = TmleConfig(), estimand: Estimand = ATE,
                       nuisance: NuisanceFits | None = None) -> EstimateReport:
    """Untargeted Super Learner substitution estimate; carries no interval."""
    nf = nuisance if nuisance is not None else fit_nuisance(ds, config, need_g=False)
    psi = point_estimate(estimand, nf.qbar1, nf.qbar0, ds.outcome)
    diag = {"q_super_learner": None if nf.q_fit is None else nf.q_fit.summary()}
    return EstimateReport(estimand.label, "sl_plugin", psi, None, None, config.level, ds.n,
                          None, None, config.seed, diag)
