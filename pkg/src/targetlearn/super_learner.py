"""Cross-validated discrete and ensemble Super Learner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .learners import LearnerSpec, FittedLearner, fit_learner, predict_learner, PROB_CLIP
from .seeding import stream

LOSSES = ("squared_error", "binomial_loglik")
_FOLD_KEY = 0x5F01D


class BadFoldCount(ValueError):
    pass


class LossTargetMismatch(ValueError):
    pass


class CandidateFitError(RuntimeError):
    def __init__(self, candidate, fold, cause):
        super().__init__(f"candidate {candidate} failed on fold {fold}: {cause}")
        self.candidate = candidate
        self.fold = fold


@dataclass(frozen=True, eq=False)
class CvFolds:
    """Fold labels ``0..V-1`` for each unit."""

    V: int
    assignments: np.ndarray
    seed: int
    strata: np.ndarray | None = None

    def validation(self, v):
        return np.flatnonzero(self.assignments == v)

    def training(self, v):
        return np.flatnonzero(self.assignments != v)


@dataclass(frozen=True, eq=False)
class LevelOneMatrix:
    Z: np.ndarray
    candidate_ids: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class SuperLearnerFit:
    candidates: tuple[LearnerSpec, ...]
    full_data_fits: tuple[FittedLearner, ...]
    level_one: LevelOneMatrix
    cv_risks: np.ndarray
    discrete_winner: int
    weights: np.ndarray
    ensemble_risk: float
    loss: str
    folds: CvFolds

    def summary(self) -> dict:
        return {
            "loss": self.loss,
            "V": self.folds.V,
            "seed": self.folds.seed,
            "candidates": [c.name for c in self.candidates],
            "cv_risks": [float(r) for r in self.cv_risks],
            "discrete_winner": self.candidates[self.discrete_winner].name,
            "weights": [float(w) for w in self.weights],
            "ensemble_risk": float(self.ensemble_risk),
        }


def make_folds(n, V, seed, strata=None) -> CvFolds:
    """Seeded shuffle within each stratum, then one round-robin pass.

    The round-robin counter carries over from one stratum to the next, which
    keeps fold sizes within one of each other both overall and inside every
    stratum. Strata are visited in sorted label order.
    """
    if not 2 <= V <= n:
        raise BadFoldCount(f"need 2 <= V <= n, got V={V}, n={n}")
    rng = stream(seed, _FOLD_KEY, n, V)
    labels = np.zeros(n, dtype=int) if strata is None else np.asarray(strata).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError("strata length must equal n")
    assignments = np.empty(n, dtype=int)
    counter = 0
    for level in np.unique(labels):
        members = np.flatnonzero(labels == level)
        members = members[rng.permutation(members.size)]
        assignments[members] = (counter + np.arange(members.size)) % V
        counter = (counter + members.size) % V
    return CvFolds(V, assignments, seed, None if strata is None else labels.copy())


def _inputs(X, a, idx):
    return X[idx], None if a is None else a[idx]


def compute_level_one(candidates, X, y, folds: CvFolds, a=None, weights=None) -> LevelOneMatrix:
    """Out-of-fold predictions: column k, row i comes from candidate k
    trained on every fold except fold(i)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)
    Z = np.empty((y.shape[0], len(candidates)))
    for k, spec in enumerate(candidates):
        for v in range(folds.V):
            train, valid = folds.training(v), folds.validation(v)
            Xt, at = _inputs(X, a, train)
            Xv, av = _inputs(X, a, valid)
            try:
                fit = fit_learner(spec, Xt, y[train], at, None if w is None else w[train])
                Z[valid, k] = predict_learner(fit, Xv, av)
            except Exception as exc:
                raise CandidateFitError(spec.name, v, exc) from exc
    return LevelOneMatrix(Z, tuple(c.name for c in candidates))


def _check_loss(y, loss):
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if loss == "binomial_loglik" and (np.any(y < 0) or np.any(y > 1)):
        raise LossTargetMismatch("binomial log-likelihood needs targets in [0, 1]")


def _risk(pred, y, loss, w=None):
    if loss == "squared_error":
        r = (y - pred) ** 2
    else:
        z = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
        r = -(y * np.log(z) + (1.0 - y) * np.log1p(-z))
    return float(np.mean(r, axis=0)) if w is None else float(w @ r / w.sum())


def cv_risk(Z, y, loss) -> np.ndarray:
    Z = Z.Z if isinstance(Z, LevelOneMatrix) else np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_loss(y, loss)
    return np.array([_risk(Z[:, k], y, loss) for k in range(Z.shape[1])])


def discrete_select(risks) -> int:
    """Index of the smallest risk; the lowest index wins ties."""
    return int(np.argmin(np.asarray(risks)))


@njit(cache=True)
def _eg_loop(Z, y, binomial, max_iter, tol, clip):
    n, K = Z.shape
    w = np.full(K, 1.0 / K)
    if binomial:
        gram = np.zeros((1, 1))
        zty = np.zeros(1)
    else:
        gram = Z.T @ Z / n
        zty = Z.T @ y / n
    yy = (y @ y) / n

    def risk(weights):
        if binomial:
            total = 0.0
            for i in range(n):
                z = 0.0
                for k in range(K):
                    z += Z[i, k] * weights[k]
                z = min(max(z, clip), 1.0 - clip)
                total -= y[i] * np.log(z) + (1.0 - y[i]) * np.log1p(-z)
            return total / n
        return yy - 2.0 * (weights @ zty) + weights @ (gram @ weights)

    def grad(weights):
        if binomial:
            g = np.zeros(K)
            for i in range(n):
                z = 0.0
                for k in range(K):
                    z += Z[i, k] * weights[k]
                z = min(max(z, clip), 1.0 - clip)
                r = (y[i] - z) / (z * (1.0 - z))
                for k in range(K):
                    g[k] -= Z[i, k] * r
            return g / n
        return 2.0 * (gram @ weights - zty)

    current = risk(w)
    step = 0.5
    for _ in range(max_iter):
        g = grad(w)
        gmin = g.min()
        cand = np.empty(K)
        for k in range(K):
            cand[k] = np.log(w[k]) - step * (g[k] - gmin) if w[k] > 0 else -np.inf
        cand = np.exp(cand - cand.max())
        cand /= cand.sum()
        new = risk(cand)
        if new < current:
            improvement = current - new
            w = cand
            current = new
            if improvement < tol:
                break
        else:
            step *= 0.5
            if step < 1e-300:
                break
    return w


def fit_meta_weights(Z, y, loss, max_iter=10000, tol=1e-12):
    """Simplex weights minimizing the level-one risk of ``Z @ w``.

    Exponentiated gradient from uniform weights; a step that fails to lower
    the risk is rejected and the step size halved. Stops once an accepted
    step improves the risk by less than ``tol``. The best vertex is returned
    instead if it beats the iterate, so the ensemble never does worse than
    the discrete selector on the level-one data.
    """
    Z = Z.Z if isinstance(Z, LevelOneMatrix) else np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_loss(y, loss)
    K = Z.shape[1]
    if K == 1:
        return np.ones(1)
    w = _eg_loop(np.ascontiguousarray(Z), y, loss == "binomial_loglik", max_iter, tol, PROB_CLIP)
    current = _risk(Z @ w, y, loss)
    vertex_risks = np.array([_risk(Z[:, k], y, loss) for k in range(K)])
    best = int(np.argmin(vertex_risks))
    if vertex_risks[best] < current:
        w = np.zeros(K)
        w[best] = 1.0
    return w


def fit_super_learner(candidates, X, y, a=None, V=10, seed=1, loss="squared_error",
                      strata=None, weights=None) -> SuperLearnerFit:
    """Cross-validate every candidate, pick the winner, fit ensemble weights,
    and refit all candidates on the full data.

    ``V`` drops to ``n`` (leave-one-out) when ``n < V``.
    """
    candidates = tuple(candidates)
    if not candidates:
        raise ValueError("need at least one candidate learner")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    _check_loss(y, loss)
    folds = make_folds(n, min(V, n), seed, strata)
    level_one = compute_level_one(candidates, X, y, folds, a, weights)
    risks = cv_risk(level_one, y, loss)
    winner = discrete_select(risks)
    w = fit_meta_weights(level_one, y, loss)
    ens_risk = _risk(level_one.Z @ w, y, loss)
    fits = []
    for spec in candidates:
        try:
            fits.append(fit_learner(spec, X, y, a, weights))
        except Exception as exc:
            raise CandidateFitError(spec.name, "full", exc) from exc
    return SuperLearnerFit(candidates, tuple(fits), level_one, risks, winner, w,
                           ens_risk, loss, folds)


def sl_predict(fit: SuperLearnerFit, X, a=None, mode="ensemble") -> np.ndarray:
    if mode == "discrete":
        return predict_learner(fit.full_data_fits[fit.discrete_winner], X, a)
    if mode != "ensemble":
        raise ValueError(f"unknown mode {mode!r}")
    pred = np.zeros(np.asarray(X).shape[0])
    for wk, f in zip(fit.weights, fit.full_data_fits):
        if wk > 0:
            pred += wk * predict_learner(f, X, a)
    if fit.loss == "binomial_loglik":
        pred = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    return pred
