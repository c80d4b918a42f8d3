"""A small Monte Carlo comparison of the three estimators on the confounded
benchmark. The full study uses n = 100 and 1000 replicates; this one is cut
down so it finishes in about a minute."""
import os

from targetlearn.simulation import compute_metrics, run_study

mc = run_study("fig1", ("glm", "sl", "tmle"), n=100, reps=60, seed=1, threads=os.cpu_count())
print(f"true ATE {mc.psi0:.4f}")
print(f"{'estimator':10s} {'bias':>8s} {'variance':>9s} {'mse':>8s} {'coverage':>9s}")
for name, m in compute_metrics(mc).items():
    cov = "" if m["coverage"] is None else f"{m['coverage']:.3f}"
    print(f"{name:10s} {m['bias']:8.4f} {m['variance']:9.4f} {m['mse']:8.4f} {cov:>9s}")
