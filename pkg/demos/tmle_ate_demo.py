"""Average treatment effect on one confounded sample: main-terms regression,
Super Learner plug-in and TMLE side by side."""
from targetlearn import ATE, PAR, TmleConfig, estimate, sample_dgp
from targetlearn.simulation import FIG1, oracle_truth
from targetlearn.tmle import baseline_glm_ate, baseline_sl_plugin, fit_nuisance

ds = sample_dgp(FIG1, 500, seed=4)
config = TmleConfig(seed=4)
nuisance = fit_nuisance(ds, config)
print(f"true ATE {oracle_truth(FIG1, 'ATE').psi0:.4f}, true PAR {oracle_truth(FIG1, 'PAR').psi0:.4f}")
glm = baseline_glm_ate(ds)
print(f"main-terms regression  ATE {glm.psi:.4f}  95% CI ({glm.ci[0]:.3f}, {glm.ci[1]:.3f})")
sl = baseline_sl_plugin(ds, config, ATE, nuisance)
print(f"Super Learner plug-in  ATE {sl.psi:.4f}")
for target in (ATE, PAR):
    rep = estimate(ds, target, config, nuisance)
    eps = rep.diagnostics["targeting"]["epsilon"]
    print(f"TMLE {target.kind:4s} {rep.psi:.4f}  se {rep.se:.4f}  95% CI ({rep.ci[0]:.3f}, "
          f"{rep.ci[1]:.3f})  epsilon {eps:.4f}")
