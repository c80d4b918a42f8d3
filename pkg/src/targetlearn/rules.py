"""Treatment rules: CATE estimation, optimal and realistic rules, and the
cross-fit estimate of the mean outcome under the estimated rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .positivity import PositivityReport, positivity_report
from .super_learner import SuperLearnerFit, fit_super_learner, make_folds, sl_predict
from .tmle import (EstimateReport, RuleContrast, SingleArmData, TmleConfig,
                   TooFewObservations, estimate, z_quantile)

__all__ = [
    "CateFit", "DecisionRule", "PositivityReport", "fit_cate", "derive_optimal_rule",
    "apply_realistic_constraint", "positivity_report", "estimate_rule_effect",
]


@dataclass(frozen=True, eq=False)
class CateFit:
    cate: np.ndarray
    covariates: np.ndarray
    q_fit: SuperLearnerFit
    sl_mode: str = "ensemble"

    def predict(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(-1, 1)
        n = W.shape[0]
        return (sl_predict(self.q_fit, W, np.ones(n), self.sl_mode)
                - sl_predict(self.q_fit, W, np.zeros(n), self.sl_mode))


@dataclass(frozen=True, eq=False)
class DecisionRule:
    assignments: np.ndarray
    objective: str = "maximize"
    description: str = ""
    realistic: bool = False
    delta: float | None = None

    def summary(self) -> dict:
        return {"objective": self.objective, "description": self.description,
                "treated_share": float(np.mean(self.assignments)),
                "realistic": self.realistic, "delta": self.delta}


def fit_cate(ds: Dataset, config: TmleConfig = TmleConfig()) -> CateFit:
    """Conditional average treatment effect from a Super Learner outcome fit."""
    A = ds.treatment
    if not 0 < A.sum() < ds.n:
        raise SingleArmData("CATE needs both treatment levels")
    binary = ds.outcome_kind == "binary"
    q_fit = fit_super_learner(config.q_roster, ds.covariates, ds.outcome, a=A, V=config.V,
                              seed=config.seed,
                              loss="binomial_loglik" if binary else "squared_error",
                              strata=ds.outcome if binary else A)
    cf = CateFit(np.zeros(0), ds.covariates, q_fit, config.sl_mode)
    return CateFit(cf.predict(ds.covariates), ds.covariates, q_fit, config.sl_mode)


def _describe(assign, W):
    if W is None or W.ndim != 2 or W.shape[1] != 1 or assign.size == 0:
        return f"treat {int(assign.sum())} of {assign.size} units"
    order = np.argsort(W[:, 0], kind="stable")
    w, d = W[order, 0], assign[order]
    switches = np.flatnonzero(np.diff(d) != 0)
    if switches.size == 0:
        return "treat everyone" if d[0] == 1 else "treat no one"
    if switches.size == 1:
        i = switches[0]
        cut = 0.5 * (w[i] + w[i + 1])
        return f"treat if W1 >= {cut:.4g}" if d[-1] == 1 else f"treat if W1 < {cut:.4g}"
    return f"non-monotone in W1 ({switches.size} switches)"


def derive_optimal_rule(cf, objective="maximize", covariates=None) -> DecisionRule:
    """Sign-of-CATE rule. ``cf`` is a :class:`CateFit` or a CATE array.

    A CATE of exactly zero assigns treatment under either objective.
    """
    if isinstance(cf, CateFit):
        cate, W = cf.cate, cf.covariates
    else:
        cate, W = np.asarray(cf, dtype=float).reshape(-1), covariates
    if objective == "maximize":
        d = (cate >= 0).astype(float)
    elif objective == "minimize":
        d = (cate <= 0).astype(float)
    else:
        raise ValueError(f"objective must be maximize or minimize, got {objective!r}")
    W = None if W is None else np.asarray(W, dtype=float).reshape(cate.size, -1)
    return DecisionRule(d, objective, _describe(d, W))


def apply_realistic_constraint(rule: DecisionRule, g1, delta) -> DecisionRule:
    """Move units whose assigned arm has probability below ``delta`` to the
    more probable arm."""
    g1 = np.asarray(g1, dtype=float)
    d = rule.assignments
    p_assigned = np.where(d == 1, g1, 1.0 - g1)
    likelier = (g1 >= 0.5).astype(float)
    new = np.where(p_assigned < delta, likelier, d)
    desc = rule.description
    moved = int(np.sum(new != d))
    if moved:
        desc = f"{desc}; {moved} units reassigned for support"
    return DecisionRule(new, rule.objective, desc, True, float(delta))


def estimate_rule_effect(ds: Dataset, config: TmleConfig = TmleConfig(), objective="maximize",
                         realistic_delta=None, split=None) -> EstimateReport:
    """Two-fold cross-fit TMLE of E[Y_dhat] - E[Y] for the estimated optimal rule.

    Each half is scored under the rule learned on the other half; the
    estimate is the size-weighted mean of the two half estimates and the
    standard error comes from the sample variance of the pooled
    influence-curve values, so the per-half fits always use plug-in variance.
    When the treatment effect is identically zero every rule has the same
    value and the two half estimates are positively correlated (each half's
    noise also chooses the rule scored on the other half); the pooled
    variance ignores that covariance and the interval is then too narrow.
    ``split`` overrides the seeded 0/1 half labels.
    """
    n = ds.n
    config = replace(config, variance_mode="plugin")
    if n < 20:
        raise TooFewObservations("the cross-fit rule estimate needs n >= 20")
    if split is None:
        split = make_folds(n, 2, config.seed, strata=ds.treatment).assignments
    split = np.asarray(split).reshape(-1)
    halves = [np.flatnonzero(split == 0), np.flatnonzero(split == 1)]
    parts = []
    for h in (0, 1):
        ev, tr = halves[h], halves[1 - h]
        train, held = ds.subset(tr), ds.subset(ev)
        cf = fit_cate(train, config)
        rule = derive_optimal_rule(cf.predict(held.covariates), objective, held.covariates)
        if realistic_delta is not None:
            g_fit = fit_super_learner(config.g_roster, train.covariates, train.treatment,
                                      V=config.V, seed=config.seed, loss="binomial_loglik",
                                      strata=train.treatment)
            rule = apply_realistic_constraint(rule, sl_predict(g_fit, held.covariates,
                                                               None, config.sl_mode),
                                              realistic_delta)
        rep = estimate(held, RuleContrast(rule.assignments), config)
        parts.append((ev, rule, rep))
    psi = sum(ev.size * rep.psi for ev, _, rep in parts) / n
    D = np.empty(n)
    for ev, _, rep in parts:
        D[ev] = rep.eic_values
    se = math.sqrt(float(np.var(D, ddof=1)) / n)
    z = z_quantile(config.level)
    diag = {
        "fold_rules": [rule.summary() for _, rule, _ in parts],
        "fold_psi": [rep.psi for _, _, rep in parts],
        "fold_sizes": [int(ev.size) for ev, _, _ in parts],
        "fold_diagnostics": [rep.diagnostics for _, _, rep in parts],
        "flags": ["degenerate_se"] if se == 0 else [],
    }
    return EstimateReport("RuleContrast(estimated optimal rule)", "tmle", psi, se,
                          (psi - z * se, psi + z * se), config.level, n, D, "plugin",
                          config.seed, diag)
