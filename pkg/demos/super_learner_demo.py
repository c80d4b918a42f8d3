"""Cross-validated candidate risks and ensemble weights for an outcome regression."""
from targetlearn import sample_dgp, sl_predict
from targetlearn.simulation import FIG1
from targetlearn.super_learner import fit_super_learner
from targetlearn.tmle import DEFAULT_Q_ROSTER

ds = sample_dgp(FIG1, 300, seed=1)
fit = fit_super_learner(DEFAULT_Q_ROSTER, ds.covariates, ds.outcome, ds.treatment, seed=1,
                        strata=ds.treatment)
summary = fit.summary()
print(f"{'candidate':28s} {'cv risk':>10s} {'weight':>8s}")
for name, risk, w in zip(summary["candidates"], summary["cv_risks"], summary["weights"]):
    print(f"{name:28s} {risk:10.4f} {w:8.3f}")
print(f"discrete winner: {summary['discrete_winner']}")
print(f"ensemble cv risk: {summary['ensemble_risk']:.4f}")
pred = sl_predict(fit, ds.covariates[:5], ds.treatment[:5])
print("first five ensemble predictions:", [round(float(p), 3) for p in pred])
