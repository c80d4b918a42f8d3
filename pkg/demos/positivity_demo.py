"""Positivity diagnostics: a randomized design against a nearly deterministic one."""
import numpy as np

from targetlearn import Dataset, positivity_report
from targetlearn.super_learner import fit_super_learner, sl_predict
from targetlearn.tmle import DEFAULT_G_ROSTER

rng = np.random.default_rng(0)
w = rng.uniform(0, 10, 500)
designs = {
    "coin flip": (rng.uniform(size=500) < 0.5).astype(float),
    "treat when w > 5 (rarely otherwise)": (rng.uniform(size=500) < np.where(w > 5, 0.99, 0.01)).astype(float),
}
for label, a in designs.items():
    ds = Dataset(w[:, None], a, w + a)
    g = fit_super_learner(DEFAULT_G_ROSTER, ds.covariates, a, seed=1, loss="binomial_loglik",
                          strata=a)
    rep = positivity_report(sl_predict(g, ds.covariates))
    shares = ", ".join(f"{d:g}: {s:.2f}" for d, s in rep.share_below.items())
    print(f"{label}: g in [{rep.g_min:.3f}, {rep.g_max:.3f}]; share below threshold {{{shares}}}")
