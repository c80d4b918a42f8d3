"""Command-line front end.

Exit codes are shared by every subcommand: 0 on success, 1 when the
computation fails, 2 for usage, configuration or data-parsing problems.
Reports never contain wall-clock data; timings go to standard error.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import ColumnSchema, DataError, parse_csv
from .learners import LearnerSpec, parse_learner
from .positivity import positivity_report
from .rules import estimate_rule_effect
from .simulation import (REGISTRY, STUDY_ESTIMANDS, compute_metrics, dumps,
                         get_scenario, oracle_truth, run_study)
from .super_learner import fit_super_learner, sl_predict
from .tmle import (ATE, DEFAULT_G_ROSTER, DEFAULT_Q_ROSTER, MEAN_OUTCOME, PAR, TmleConfig,
                   estimate)

TOOL = "targetlearn"
ESTIMAND_CHOICES = ("ate", "par", "mean", "optimal-rule")
_ESTIMANDS = {"ate": ATE, "par": PAR, "mean": MEAN_OUTCOME}
# Execution-only settings: they never change results, so they are left out of
# the configuration echoed into reports (outputs stay identical across them).
_EXECUTION_ONLY = ("threads", "out")

CONFIG_HELP = """\
configuration file: one `key = value` per line, `#` starts a comment.
  seed           integer (default 1)
  threads        worker processes for simulate (default: all cores)
  folds          Super Learner folds V (default 10)
  delta          propensity truncation bound (default 0.01)
  fluctuation    auto | linear | logistic (default auto)
  variance_mode  plugin | crossval (default plugin)
  q_roster       comma-separated learners, e.g. mean, ols, lasso(lam=0.1), knn(k=5)
  g_roster       comma-separated learners, e.g. mean, logistic, cart(max_depth=3)
  estimand       ate | par | mean | optimal-rule (default ate)
  level          confidence level (default 0.95)
  sl_mode        ensemble | discrete (default ensemble)
  out            output path
"""


class UsageError(Exception):
    """Bad flags, configuration or input data (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    threads: int | None = None
    folds: int = 10
    delta: float = 0.01
    fluctuation: str = "auto"
    variance_mode: str = "plugin"
    q_roster: tuple = DEFAULT_Q_ROSTER
    g_roster: tuple = DEFAULT_G_ROSTER
    estimand: str = "ate"
    level: float = 0.95
    sl_mode: str = "ensemble"
    out: str | None = None

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        if self.threads is not None and self.threads < 1:
            raise UsageError("threads must be >= 1")
        if self.folds < 2:
            raise UsageError("folds must be >= 2")
        if not 0 <= self.delta < 0.5:
            raise UsageError("delta must lie in [0, 0.5)")
        if self.fluctuation not in ("auto", "linear", "logistic"):
            raise UsageError(f"unknown fluctuation {self.fluctuation!r}")
        if self.variance_mode not in ("plugin", "crossval"):
            raise UsageError(f"unknown variance_mode {self.variance_mode!r}")
        if self.estimand not in ESTIMAND_CHOICES:
            raise UsageError(f"unknown estimand {self.estimand!r}")
        if not 0 < self.level < 1:
            raise UsageError("level must lie in (0, 1)")
        if self.sl_mode not in ("ensemble", "discrete"):
            raise UsageError(f"unknown sl_mode {self.sl_mode!r}")
        if not self.q_roster or not self.g_roster:
            raise UsageError("learner rosters cannot be empty")

    def tmle_config(self) -> TmleConfig:
        return TmleConfig(q_roster=self.q_roster, g_roster=self.g_roster, V=self.folds,
                          seed=self.seed, delta=self.delta,
                          fluctuation=None if self.fluctuation == "auto" else self.fluctuation,
                          variance_mode=self.variance_mode, level=self.level,
                          sl_mode=self.sl_mode)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["q_roster"] = [s.name for s in self.q_roster]
        out["g_roster"] = [s.name for s in self.g_roster]
        return out

    def provenance_dict(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in _EXECUTION_ONLY}


def split_roster(text: str) -> list[str]:
    """Split on commas that are not inside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _roster(text) -> tuple[LearnerSpec, ...]:
    try:
        return tuple(parse_learner(s) for s in split_roster(text))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


_CASTS = {
    "seed": int, "threads": int, "folds": int, "delta": float, "fluctuation": str,
    "variance_mode": str, "q_roster": _roster, "g_roster": _roster, "estimand": str,
    "level": float, "sl_mode": str, "out": str,
}


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into RunConfig keyword arguments."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CASTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CASTS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def explicit_settings(args, **overrides) -> dict:
    """Settings requested by the config file or by flags (flags win)."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = _CASTS[f.name](flag) if f.name.endswith("roster") else flag
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def build_config(args, **overrides) -> RunConfig:
    return RunConfig(**explicit_settings(args, **overrides))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def provenance(cfg: RunConfig, input_sha256: str) -> dict:
    return {"tool": TOOL, "version": __version__, "config": cfg.provenance_dict(),
            "seed": cfg.seed, "input_sha256": input_sha256}


def _write(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(text)


def _load_data(args):
    names = [c.strip() for c in args.schema.split(",") if c.strip()] if args.schema else []
    try:
        raw = Path(args.data).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read data {args.data}: {exc}") from exc
    try:
        schema = ColumnSchema(tuple(names), args.treatment, args.outcome,
                              "continuous" if args.outcome_kind == "auto" else args.outcome_kind)
        ds = parse_csv(raw.decode("utf-8"), schema)
    except (DataError, UnicodeDecodeError) as exc:
        raise UsageError(f"{args.data}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.outcome_kind == "auto" and ds.n and np.all(np.isin(ds.outcome, (0.0, 1.0))):
        ds = ds.with_outcome(ds.outcome, "binary")
    return ds, sha256_bytes(raw)


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_estimate(args) -> int:
    cfg = build_config(args)
    ds, digest = _load_data(args)
    t0 = time.perf_counter()
    tc = cfg.tmle_config()
    if cfg.estimand == "optimal-rule":
        report = estimate_rule_effect(ds, tc, args.objective, args.realistic_delta)
    else:
        report = estimate(ds, _ESTIMANDS[cfg.estimand], tc)
    body = report.to_dict()
    body["provenance"] = provenance(cfg, digest)
    out = cfg.out or "estimate_report.json"
    _write(out, dumps(body))
    if report.ci is None:
        print(f"{report.estimand}: psi = {report.psi:.6g}")
    else:
        lo, hi = report.ci
        print(f"{report.estimand}: psi = {report.psi:.6g}  se = {report.se:.6g}  "
              f"{100 * report.level:g}% CI = [{lo:.6g}, {hi:.6g}]")
    _log(f"wrote {out} in {time.perf_counter() - t0:.2f}s")
    return 0


def cmd_simulate(args) -> int:
    if args.dgp not in REGISTRY:
        raise UsageError(f"unknown DGP {args.dgp!r}; choose from {', '.join(sorted(REGISTRY))}")
    estimators = tuple(s.strip() for s in args.estimators.split(",") if s.strip())
    for name in estimators:
        if name not in ("glm", "sl", "tmle"):
            raise UsageError(f"unknown estimator {name!r}; choose from glm, sl, tmle")
    if args.n < 1 or args.reps < 1:
        raise UsageError("--n and --reps must be >= 1")
    settings = explicit_settings(args, out=args.out)
    scenario = get_scenario(args.dgp)
    if "variance_mode" not in settings and scenario.variance_mode is not None:
        settings["variance_mode"] = scenario.variance_mode
    cfg = RunConfig(**settings)
    study_estimand = {"ate": "ATE", "par": "PAR", "optimal-rule": "RuleContrast"}.get(cfg.estimand)
    if study_estimand not in STUDY_ESTIMANDS:
        raise UsageError("simulate supports --estimand ate, par or optimal-rule")
    scenario = replace(scenario, variance_mode=None)
    base = scenario.config(cfg.tmle_config())
    t0 = time.perf_counter()
    try:
        mc = run_study(scenario, estimators, args.n, args.reps,
                       cfg.seed, cfg.threads or os.cpu_count() or 1, study_estimand, base)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    truth = oracle_truth(scenario.dgp, study_estimand)
    dgp_hash = sha256_bytes(dumps(scenario.dgp.to_dict()).encode())
    prov = provenance(cfg, dgp_hash)
    prov.update({"dgp": scenario.dgp.to_dict(), "n": args.n, "reps": args.reps,
                 "estimators": list(estimators), "estimand": study_estimand,
                 "q_roster": [s.name for s in base.q_roster],
                 "g_roster": [s.name for s in base.g_roster]})
    metrics = {"provenance": prov, "psi0": mc.psi0, "metrics": compute_metrics(mc),
               "failures": [{"rep": r["rep"], "estimator": r["estimator"],
                             "error": r.get("error", "")} for r in mc.rows if r["failed"]]}
    truth_body = {"provenance": prov, **asdict(truth)}
    out = Path(args.out)
    _write(out / "mc_result.csv", mc.to_csv())
    _write(out / "metrics.json", dumps(metrics))
    _write(out / "truth.json", dumps(truth_body))
    for name, row in metrics["metrics"].items():
        cov = row.get("coverage")
        print(f"{name}: bias = {row.get('bias', float('nan')):.4g}  mse = "
              f"{row.get('mse', float('nan')):.4g}  coverage = "
              f"{'n/a' if cov is None else format(cov, '.3f')}  failures = {row['failures']}")
    _log(f"simulated {args.reps} reps in {time.perf_counter() - t0:.1f}s; outputs in {out}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = build_config(args)
    ds, digest = _load_data(args)
    A = ds.treatment
    if A.min() == A.max():
        raise RuntimeError("only one treatment arm observed; the propensity score is degenerate")
    fit = fit_super_learner(cfg.g_roster, ds.covariates, A, V=cfg.folds, seed=cfg.seed,
                            loss="binomial_loglik", strata=A)
    g1 = sl_predict(fit, ds.covariates, None, cfg.sl_mode)
    rep = positivity_report(g1, cfg.delta)
    body = rep.to_dict()
    body["g_super_learner"] = fit.summary()
    body["provenance"] = provenance(cfg, digest)
    out = cfg.out or "positivity_report.json"
    _write(out, dumps(body))
    share = rep.share_below[cfg.delta]
    print(f"g range [{rep.g_min:.4g}, {rep.g_max:.4g}]; share below {cfg.delta:g}: {share:.4g}")
    if share > 0:
        print(f"warning: {share:.1%} of units have estimated propensity within "
              f"{cfg.delta:g} of 0 or 1 (possible positivity violation)")
    return 0


def cmd_cv_report(args) -> int:
    cfg = build_config(args)
    ds, digest = _load_data(args)
    if args.target == "outcome":
        roster, y, a = cfg.q_roster, ds.outcome, ds.treatment
        loss = "binomial_loglik" if ds.outcome_kind == "binary" else "squared_error"
        strata = ds.outcome if ds.outcome_kind == "binary" else ds.treatment
    else:
        roster, y, a = cfg.g_roster, ds.treatment, None
        loss, strata = "binomial_loglik", ds.treatment
    fit = fit_super_learner(roster, ds.covariates, y, a, V=cfg.folds, seed=cfg.seed,
                            loss=loss, strata=strata)
    body = {"target": args.target, **fit.summary(), "provenance": provenance(cfg, digest)}
    out = cfg.out or "cv_report.json"
    _write(out, dumps(body))
    for name, risk, w in zip(body["candidates"], body["cv_risks"], body["weights"]):
        print(f"{name:28s} risk = {risk:.6g}  weight = {w:.4f}")
    print(f"winner: {body['discrete_winner']}  ensemble risk = {body['ensemble_risk']:.6g}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--config", help="key = value configuration file (see --help)")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, help="Super Learner folds V")
    p.add_argument("--delta", type=float, help="propensity truncation bound")
    p.add_argument("--level", type=float, help="confidence level")
    p.add_argument("--sl-mode", dest="sl_mode", choices=("ensemble", "discrete"))
    p.add_argument("--q-roster", dest="q_roster", help="outcome learners, comma separated")
    p.add_argument("--g-roster", dest="g_roster", help="propensity learners, comma separated")


def _add_data(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--schema", default="", help="covariate columns, comma separated")
    p.add_argument("--treatment", default="A", help="treatment column (0/1)")
    p.add_argument("--outcome", default="Y", help="outcome column")
    p.add_argument("--outcome-kind", dest="outcome_kind", default="auto",
                   choices=("auto", "continuous", "binary"),
                   help="auto treats an all-0/1 outcome as binary")
    p.add_argument("--out", help="report path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description=__doc__.splitlines()[0],
                                     epilog=CONFIG_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="TMLE estimate with influence-curve inference",
                       epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_data(p)
    _add_common(p)
    p.add_argument("--estimand", choices=ESTIMAND_CHOICES)
    p.add_argument("--fluctuation", choices=("auto", "linear", "logistic"))
    p.add_argument("--variance-mode", dest="variance_mode", choices=("plugin", "crossval"))
    p.add_argument("--objective", default="maximize", choices=("maximize", "minimize"),
                   help="direction for the optimal rule")
    p.add_argument("--realistic-delta", dest="realistic_delta", type=float,
                   help="restrict the optimal rule to units with propensity support")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo study on a registered DGP",
                       epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--dgp", required=True, help=", ".join(sorted(REGISTRY)))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--estimators", default="glm,sl,tmle")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--estimand", choices=("ate", "par", "optimal-rule"))
    p.add_argument("--fluctuation", choices=("auto", "linear", "logistic"))
    p.add_argument("--variance-mode", dest="variance_mode", choices=("plugin", "crossval"))
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="propensity-score positivity diagnostics")
    _add_data(p)
    _add_common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("cv-report", help="cross-validated risks of a learner roster")
    _add_data(p)
    _add_common(p)
    p.add_argument("--target", required=True, choices=("outcome", "propensity"))
    p.set_defaults(func=cmd_cv_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"{TOOL} {args.command}: error: {exc}")
        return 2
    except Exception as exc:
        _log(f"{TOOL} {args.command}: estimation failed: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
