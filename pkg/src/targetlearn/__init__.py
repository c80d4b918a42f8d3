"""Targeted learning for point-treatment studies.

Super Learner ensembling, targeted maximum likelihood estimation of the
average treatment effect, the population attributable risk and means under
treatment rules, optimal-rule learning with cross-fitting, positivity
diagnostics, and a seeded Monte Carlo harness.
"""

__version__ = "0.1.0"

from .data import ColumnSchema, Dataset, parse_csv, serialize_csv, summarize, validate_dataset
from .learners import LearnerSpec, fit_learner, parse_learner, predict_learner
from .positivity import PositivityReport, positivity_report
from .rules import (CateFit, DecisionRule, apply_realistic_constraint, derive_optimal_rule,
                    estimate_rule_effect, fit_cate)
from .super_learner import fit_super_learner, make_folds, sl_predict
from .tmle import (ATE, MEAN_OUTCOME, PAR, EstimateReport, Estimand, RuleContrast, RuleMean,
                   TmleConfig, baseline_glm_ate, baseline_sl_plugin, estimate, fit_nuisance)
from .simulation import (DgpSpec, McResult, Scenario, TruthReport, compute_metrics,
                         get_scenario, oracle_truth, run_study, sample_dgp)

__all__ = [
    "ATE", "MEAN_OUTCOME", "PAR", "CateFit", "ColumnSchema", "Dataset", "DecisionRule",
    "DgpSpec", "EstimateReport", "Estimand", "LearnerSpec", "McResult", "PositivityReport",
    "RuleContrast", "RuleMean", "Scenario", "TmleConfig", "TruthReport",
    "apply_realistic_constraint", "baseline_glm_ate", "baseline_sl_plugin", "compute_metrics",
    "derive_optimal_rule", "estimate", "estimate_rule_effect", "fit_cate", "fit_learner",
    "fit_nuisance", "fit_super_learner", "get_scenario", "make_folds", "oracle_truth",
    "parse_csv", "parse_learner", "positivity_report", "predict_learner", "run_study",
    "sample_dgp", "serialize_csv", "sl_predict", "summarize", "validate_dataset",
    "__version__",
]
