"""Known-truth data-generating processes and the Monte Carlo harness.

A DGP draws ``W ~ Uniform(lo, hi)``, ``A ~ Bernoulli(expit(a + b W))`` and
``Y = m0(W) + A tau0(W) + noise`` (or a Bernoulli outcome with that mean).
Replicate ``r`` of a study with seed ``s`` reads its random numbers from
``seeding.stream(s, SAMPLE_KEY, r)`` only, so the output of a study does not
depend on the number of workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import expit, ndtri

from .data import Dataset
from .learners import LearnerSpec
from .rules import estimate_rule_effect
from .seeding import derive_seed, stream
from .tmle import (ATE, PAR, TmleConfig, baseline_glm_ate, baseline_sl_plugin,
                   estimate, fit_nuisance)

SAMPLE_KEY = 0x5A3B1E
ORACLE_KEY = 0x0AC1E
SL_SEED_KEY = 0x51
TRUTH_ESTIMANDS = ("ATE", "PAR", "MeanOutcome", "RuleContrast")
ESTIMATORS = ("glm", "sl", "tmle")
STUDY_ESTIMANDS = ("ATE", "PAR", "RuleContrast")


class UnsupportedEstimand(ValueError):
    pass


@dataclass(frozen=True)
class DgpSpec:
    """Polynomial coefficients are in ascending powers of w."""

    name: str
    w_lo: float
    w_hi: float
    m0: tuple
    tau0: tuple
    g_intercept: float
    g_slope: float
    noise_sd: float = 1.0
    outcome_kind: str = "continuous"

    def __post_init__(self):
        object.__setattr__(self, "m0", tuple(float(c) for c in self.m0))
        object.__setattr__(self, "tau0", tuple(float(c) for c in self.tau0))
        if not self.w_hi > self.w_lo:
            raise ValueError("need w_hi > w_lo")
        if len(self.m0) > 5 or len(self.tau0) > 5:
            raise ValueError("polynomial degree must be at most 4")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        for w in (self.w_lo, self.w_hi):
            g = self.g0(w)
            if not 0.0 < g < 1.0:
                raise ValueError(f"propensity {g} at w={w} is not inside (0, 1)")
        if self.outcome_kind == "binary":
            grid = np.linspace(self.w_lo, self.w_hi, 2001)
            for a in (0.0, 1.0):
                mu = self.qbar(a, grid)
                if mu.min() < 0 or mu.max() > 1:
                    raise ValueError("binary outcome mean leaves [0, 1]")
        elif self.outcome_kind != "continuous":
            raise ValueError("outcome_kind must be continuous or binary")

    def m0_at(self, w):
        return P.polyval(np.asarray(w, dtype=float), self.m0)

    def tau0_at(self, w):
        return P.polyval(np.asarray(w, dtype=float), self.tau0)

    def g0(self, w):
        return expit(self.g_intercept + self.g_slope * np.asarray(w, dtype=float))

    def qbar(self, a, w):
        return self.m0_at(w) + a * self.tau0_at(w)

    def d_opt(self, w):
        """Optimal rule for a larger-is-better outcome; ties treat."""
        return (self.tau0_at(w) >= 0).astype(float)

    def to_dict(self) -> dict:
        return {"name": self.name, "w_dist": ["uniform", self.w_lo, self.w_hi],
                "m0": list(self.m0), "tau0": list(self.tau0),
                "g0": {"intercept": self.g_intercept, "slope": self.g_slope},
                "noise_sd": self.noise_sd, "outcome_kind": self.outcome_kind}


@dataclass(frozen=True)
class Scenario:
    """A DGP plus optional roster overrides for the Super Learner fits."""

    dgp: DgpSpec
    q_roster: tuple | None = None
    g_roster: tuple | None = None
    description: str = ""
    variance_mode: str | None = None

    def config(self, base: TmleConfig = TmleConfig()) -> TmleConfig:
        out = base
        if self.variance_mode is not None:
            out = replace(out, variance_mode=self.variance_mode)
        if self.q_roster is not None:
            out = replace(out, q_roster=self.q_roster)
        if self.g_roster is not None:
            out = replace(out, g_roster=self.g_roster)
        return out


# Treatment probability rises with w and is not symmetric about the sign
# change of the effect at w = 5, so the main-terms regression coefficient on A
# is pulled away from the average effect.
FIG1 = DgpSpec("fig1", 0.0, 10.0, m0=(2.0, 0.8, -0.07), tau0=(-1.5, 0.3),
               g_intercept=-2.75, g_slope=0.4, noise_sd=1.0)

REGISTRY = {
    "fig1": Scenario(FIG1, description="confounded treatment whose effect changes sign at w = 5",
                     variance_mode="crossval"),
    "fig1-symmetric": Scenario(
        replace(FIG1, name="fig1-symmetric", g_intercept=-2.0),
        description="fig1 with g0 = expit(-2 + 0.4w); the main-terms regression is nearly unbiased here"),
    "null": Scenario(replace(FIG1, name="null", tau0=(0.0,)),
                     description="fig1 without any treatment effect"),
    "dr-q-wrong": Scenario(
        replace(FIG1, name="dr-q-wrong"),
        q_roster=(LearnerSpec("ols", basis="none"),),
        g_roster=(LearnerSpec("logistic"),),
        description="outcome regression ignores W; propensity model correctly specified"),
    "dr-g-wrong": Scenario(
        replace(FIG1, name="dr-g-wrong"),
        q_roster=(LearnerSpec("ols", basis="poly2_interact"),),
        g_roster=(LearnerSpec("mean"),),
        description="propensity ignores W; outcome regression correctly specified"),
}


def get_scenario(name) -> Scenario:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown DGP {name!r}; choose from {sorted(REGISTRY)}") from None


def _uniforms(rng, n):
    # open interval so the normal inverse CDF stays finite
    return (np.floor(rng.random(n) * 2.0**53) + 0.5) / 2.0**53


def sample_dgp(spec: DgpSpec, n: int, seed: int, rep: int | None = None) -> Dataset:
    """Draw ``n`` units. Normal noise is ``ndtri`` of the seeded uniforms."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(seed, SAMPLE_KEY) if rep is None else stream(seed, SAMPLE_KEY, rep)
    u_w, u_a, u_y = _uniforms(rng, n), _uniforms(rng, n), _uniforms(rng, n)
    w = spec.w_lo + (spec.w_hi - spec.w_lo) * u_w
    a = (u_a < spec.g0(w)).astype(float)
    mean = spec.qbar(a, w)
    if spec.outcome_kind == "binary":
        y = (u_y < mean).astype(float)
    else:
        y = mean + spec.noise_sd * ndtri(u_y) if spec.noise_sd > 0 else mean
    return Dataset(w.reshape(-1, 1), a, y, spec.outcome_kind, ("W1",))


# ---------------------------------------------------------------- truth


@dataclass(frozen=True)
class TruthReport:
    estimand: str
    psi0: float
    method: str
    se: float
    nodes: int | None = None
    draws: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"estimand": self.estimand, "psi0": self.psi0, "method": self.method,
                "se": self.se, "nodes": self.nodes, "draws": self.draws, "seed": self.seed}


def _integrand(spec: DgpSpec, estimand):
    if estimand == "ATE":
        return spec.tau0_at
    if estimand == "PAR":
        return lambda w: spec.tau0_at(w) * (1.0 - spec.g0(w))
    if estimand == "MeanOutcome":
        return lambda w: spec.m0_at(w) + spec.g0(w) * spec.tau0_at(w)
    if estimand == "RuleContrast":
        return lambda w: spec.tau0_at(w) * (spec.d_opt(w) - spec.g0(w))
    raise UnsupportedEstimand(f"no truth for estimand {estimand!r}; "
                              f"choose from {TRUTH_ESTIMANDS}")


def _breakpoints(spec):
    pts = [spec.w_lo, spec.w_hi]
    coef = np.trim_zeros(np.array(spec.tau0), "b")
    if coef.size > 1:
        for r in P.polyroots(coef):
            if abs(r.imag) < 1e-12 and spec.w_lo < r.real < spec.w_hi:
                pts.append(float(r.real))
    return sorted(set(pts))


def _simpson(f, lo, hi, panels):
    x = np.linspace(lo, hi, panels + 1)
    y = f(x)
    h = (hi - lo) / panels
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def oracle_truth(spec: DgpSpec, estimand: str, method="quadrature", nodes=10_000,
                 draws=10_000_000, seed=1) -> TruthReport:
    """True estimand value by closed form, quadrature or Monte Carlo.

    Every truth is ``E[h(W)]`` for a known function ``h``. Quadrature is
    composite Simpson on each piece between the roots of ``tau0`` (where the
    optimal rule jumps), with ``nodes`` panels per piece; its ``se`` is the
    Richardson estimate ``|S_2N - S_N| / 15``. The Monte Carlo oracle averages
    ``h`` over ``draws`` uniform draws and reports the usual standard error.
    """
    h = _integrand(spec, estimand)
    width = spec.w_hi - spec.w_lo
    if method == "analytic":
        if estimand == "ATE" or not any(spec.tau0) and estimand in ("PAR", "RuleContrast"):
            antideriv = P.polyint(spec.tau0)
            val = (P.polyval(spec.w_hi, antideriv) - P.polyval(spec.w_lo, antideriv)) / width
            return TruthReport(estimand, float(val), "analytic", 0.0)
        raise UnsupportedEstimand(f"no closed form for {estimand} under a logistic propensity")
    if method == "quadrature":
        if nodes < 10_000 or nodes % 2:
            raise ValueError("quadrature needs an even panel count of at least 10^4")
        pts = _breakpoints(spec)
        coarse = fine = 0.0
        for lo, hi in zip(pts[:-1], pts[1:]):
            coarse += _simpson(h, lo, hi, nodes)
            fine += _simpson(h, lo, hi, 2 * nodes)
        err = abs(fine - coarse) / 15.0
        return TruthReport(estimand, float(fine / width), "quadrature", float(err / width),
                           nodes=2 * nodes * (len(pts) - 1))
    if method == "mc_oracle":
        rng = stream(seed, ORACLE_KEY)
        total = total_sq = 0.0
        done = 0
        chunk = 1_000_000
        while done < draws:
            m = min(chunk, draws - done)
            vals = h(spec.w_lo + width * rng.random(m))
            total += float(vals.sum())
            total_sq += float((vals**2).sum())
            done += m
        mean = total / draws
        var = max(total_sq / draws - mean**2, 0.0) * draws / (draws - 1)
        return TruthReport(estimand, mean, "mc_oracle", math.sqrt(var / draws),
                           draws=draws, seed=seed)
    raise ValueError(f"unknown truth method {method!r}")


# ---------------------------------------------------------------- study


@dataclass
class McResult:
    scenario: str
    estimand: str
    n: int
    reps: int
    seed: int
    psi0: float
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rep", "estimator", "psi", "ci_lo", "ci_hi", "covered", "failed"])
        for r in self.rows:
            writer.writerow([r["rep"], r["estimator"], _num(r["psi"]), _num(r["ci_lo"]),
                             _num(r["ci_hi"]), "" if r["covered"] is None else int(r["covered"]),
                             int(r["failed"])])
        return buf.getvalue()

    def by_estimator(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault(r["estimator"], []).append(r)
        return out


def _num(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, ".17g")


def _study_row(rep, name, report, psi0):
    if report.ci is None:
        return {"rep": rep, "estimator": name, "psi": report.psi, "ci_lo": None,
                "ci_hi": None, "covered": None, "failed": False}
    lo, hi = report.ci
    return {"rep": rep, "estimator": name, "psi": report.psi, "ci_lo": lo, "ci_hi": hi,
            "covered": bool(lo <= psi0 <= hi), "failed": False}


def _run_rep(job):
    scenario, estimators, estimand, n, seed, rep, base, psi0 = job
    ds = sample_dgp(scenario.dgp, n, seed, rep)
    config = replace(scenario.config(base), seed=derive_seed(seed, SL_SEED_KEY, rep))
    rows = []
    nuisance = None
    target = {"ATE": ATE, "PAR": PAR}.get(estimand)
    for name in estimators:
        try:
            if estimand == "RuleContrast":
                report = estimate_rule_effect(ds, config)
            elif name == "glm":
                report = baseline_glm_ate(ds, config.level)
            else:
                if nuisance is None:
                    nuisance = fit_nuisance(ds, config)
                if name == "sl":
                    report = baseline_sl_plugin(ds, config, target, nuisance)
                else:
                    report = estimate(ds, target, config, nuisance)
            rows.append(_study_row(rep, name, report, psi0))
        except Exception as exc:  # tallied, never fatal
            rows.append({"rep": rep, "estimator": name, "psi": None, "ci_lo": None,
                         "ci_hi": None, "covered": None, "failed": True,
                         "error": f"{type(exc).__name__}: {exc}"})
    return rows


def _check_estimators(estimators, estimand):
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    if estimand not in STUDY_ESTIMANDS:
        raise UnsupportedEstimand(f"studies support {STUDY_ESTIMANDS}, got {estimand!r}")
    if estimand != "ATE" and "glm" in estimators:
        raise ValueError("the glm baseline only targets the ATE")
    if estimand == "RuleContrast" and set(estimators) != {"tmle"}:
        raise ValueError("the rule estimand is only estimated by cross-fit tmle")


def run_study(scenario, estimators=ESTIMATORS, n=100, reps=1000, seed=1, threads=1,
              estimand="ATE", config: TmleConfig = TmleConfig()) -> McResult:
    """Run every estimator on the same ``reps`` simulated datasets.

    Per-replicate failures are recorded as rows with ``failed=True``.
    """
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    elif isinstance(scenario, DgpSpec):
        scenario = Scenario(scenario)
    estimators = tuple(estimators)
    _check_estimators(estimators, estimand)
    if reps < 1:
        raise ValueError("reps must be >= 1")
    psi0 = oracle_truth(scenario.dgp, estimand).psi0
    jobs = [(scenario, estimators, estimand, n, seed, r, config, psi0) for r in range(reps)]
    if threads is None or threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_rep, jobs, chunksize=max(1, reps // (4 * (threads or 4)))))
    else:
        chunks = [_run_rep(job) for job in jobs]
    result = McResult(scenario.dgp.name, estimand, n, reps, seed, psi0)
    for rows in chunks:
        result.rows.extend(rows)
    return result


def compute_metrics(mc: McResult, psi0: float | None = None) -> dict:
    """Bias, variance (divisor = reps), MSE, coverage and mean CI width per estimator."""
    psi0 = mc.psi0 if psi0 is None else psi0
    table = {}
    for name, rows in mc.by_estimator().items():
        ok = [r for r in rows if not r["failed"]]
        entry = {"n": mc.n, "reps": len(ok), "failures": len(rows) - len(ok)}
        if ok:
            psi = np.array([r["psi"] for r in ok], dtype=float)
            center = psi.mean()
            dev = psi - center
            variance = float(np.mean(dev**2))
            entry.update({
                "mean": float(center),
                "bias": float(center - psi0),
                "variance": variance,
                "mse": float(np.mean((psi - psi0) ** 2)),
                "mc_se": math.sqrt(variance / len(ok)),
                "skewness": float(np.mean(dev**3) / variance**1.5) if variance > 0 else 0.0,
            })
            with_ci = [r for r in ok if r["ci_lo"] is not None]
            if with_ci:
                entry["coverage"] = float(np.mean([r["covered"] for r in with_ci]))
                entry["mean_ci_width"] = float(np.mean([r["ci_hi"] - r["ci_lo"] for r in with_ci]))
            else:
                entry["coverage"] = None
                entry["mean_ci_width"] = None
        table[name] = entry
    return table


def dumps(obj) -> str:
    """Canonical JSON used for every report file."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
