"""Candidate learners for the Super Learner library.

Every learner takes raw covariates ``X`` (n x p) plus an optional treatment
column ``a``. Linear families expand these into a design matrix with
:func:`expand_basis`; ``knn`` and ``cart`` work on the raw ``[A, W]`` columns.
Nothing in this module draws random numbers, so fits are reproducible bit for
bit.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

import numpy as np
from numba import njit
from scipy.special import expit

FAMILIES = ("mean", "ols", "ols_interact", "poly2", "lasso", "logistic", "knn", "cart")
BASES = ("none", "linear", "interact", "poly2", "poly2_interact")
DEFAULT_BASIS = {
    "ols": "linear",
    "ols_interact": "interact",
    "poly2": "poly2",
    "lasso": "poly2_interact",
    "logistic": "linear",
}
PROB_CLIP = 1e-12
LOGISTIC_CLAMP = 40.0


class LearnerError(ValueError):
    pass


class OffsetUnsupported(LearnerError):
    pass


class EmptyData(LearnerError):
    pass


class NonFiniteInput(LearnerError):
    pass


class ShapeMismatch(LearnerError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    """Family name plus hyperparameters.

    ``basis`` only applies to the design-matrix families (ols, ols_interact,
    poly2, lasso, logistic) and defaults per family.
    """

    family: str
    lam: float = 0.0
    k: int = 5
    max_depth: int = 3
    min_leaf: int = 1
    basis: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown learner family {self.family!r}")
        if not self.lam >= 0:
            raise ValueError("lasso penalty must be >= 0")
        if self.k < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("k, max_depth and min_leaf must be >= 1")
        if self.family in DEFAULT_BASIS:
            if self.basis is None:
                object.__setattr__(self, "basis", DEFAULT_BASIS[self.family])
            elif self.basis not in BASES:
                raise ValueError(f"unknown basis {self.basis!r}")
        elif self.basis is not None:
            raise ValueError(f"{self.family} does not take a basis")

    @property
    def name(self) -> str:
        shown = {
            "lasso": ("lam",),
            "knn": ("k",),
            "cart": ("max_depth", "min_leaf"),
        }.get(self.family, ())
        parts = [f"{key}={getattr(self, key):g}" for key in shown
                 if key != "min_leaf" or self.min_leaf != 1]
        if self.family in DEFAULT_BASIS and self.basis != DEFAULT_BASIS[self.family]:
            parts.append(f"basis={self.basis}")
        return f"{self.family}({', '.join(parts)})" if parts else self.family

    def __str__(self):
        return self.name


_SPEC_RE = re.compile(r"^\s*([a-z_0-9]+)\s*(?:\((.*)\))?\s*$")


def parse_learner(text: str) -> LearnerSpec:
    """Inverse of ``LearnerSpec.name``, e.g. ``"lasso(lam=0.1)"``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse learner {text!r}")
    family, args = m.group(1), m.group(2)
    types = {f.name: f.type for f in fields(LearnerSpec)}
    kwargs = {}
    for item in filter(None, (s.strip() for s in (args or "").split(","))):
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types or key == "family":
            raise ValueError(f"unknown learner parameter {key!r} in {text!r}")
        if key == "basis":
            kwargs[key] = value
        elif key == "lam":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    return LearnerSpec(family, **kwargs)


@dataclass(frozen=True, eq=False)
class FittedLearner:
    spec: LearnerSpec
    params: dict
    p: int
    with_treatment: bool
    converged: bool = True
    iterations: int = 0
    basis_description: str = field(default="")


def expand_basis(X, a=None, basis="linear") -> np.ndarray:
    """Design matrix ``[1, A, W, extra terms]`` with a fixed column order.

    ``basis`` is one of :data:`BASES` or a family name from
    :data:`DEFAULT_BASIS`. ``interact`` appends ``A*W_j``; ``poly2`` appends
    ``W_j**2`` then ``W_j*W_k`` for ``j < k``; ``poly2_interact`` does both
    (squares and products first). ``none`` keeps only intercept and ``A``.
    """
    basis = DEFAULT_BASIS.get(basis, basis)
    if basis not in BASES:
        raise ValueError(f"unknown basis {basis!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, p = X.shape
    cols = [np.ones(n)]
    if a is not None:
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.shape[0] != n:
            raise ShapeMismatch("treatment length differs from covariate rows")
        cols.append(a)
    if basis != "none":
        cols.extend(X.T)
    if basis in ("poly2", "poly2_interact"):
        cols.extend(X[:, j] ** 2 for j in range(p))
        cols.extend(X[:, j] * X[:, k] for j in range(p) for k in range(j + 1, p))
    if basis in ("interact", "poly2_interact") and a is not None:
        cols.extend(a * X[:, j] for j in range(p))
    return np.column_stack(cols)


def _check_finite(*arrays):
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteInput("inputs contain NaN or infinite values")


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def solve_logistic(D, y, weights=None, offset=None, tol=1e-10, max_iter=100,
                   clamp=LOGISTIC_CLAMP):
    """Weighted logistic MLE with an offset, by damped Newton-Raphson.

    Returns ``(beta, converged, iterations)``. Convergence requires the
    weighted-mean score ``sum w x (y - p) / sum w`` to have Euclidean norm at
    most ``tol`` and the last Newton step to be below 1e-6 in sup norm; the
    second condition keeps separable data from being reported as converged
    while the coefficients drift off to infinity. If the coefficients leave
    ``[-clamp, clamp]`` or ``max_iter`` is hit, the clamped coefficients are
    returned with ``converged=False``.
    """
    D = _as_2d(D)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, k = D.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    _check_finite(D, y, w, off)
    sw = w.sum()
    if n == 0 or sw <= 0:
        raise EmptyData("logistic fit needs positive total weight")

    def nll(b):
        eta = D @ b + off
        return np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / sw

    beta = np.zeros(k)
    last_step = 0.0
    f_cur = nll(beta)
    for it in range(max_iter + 1):
        p = expit(D @ beta + off)
        score = D.T @ (w * (y - p)) / sw
        if np.linalg.norm(score) <= tol and last_step <= 1e-6:
            return beta, True, it
        if it == max_iter:
            break
        info = (D * (w * p * (1.0 - p))[:, None]).T @ D / sw
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            f_new = nll(cand)
            if f_new <= f_cur + 1e-12 * (1.0 + abs(f_cur)) or t < 1e-10:
                break
            t *= 0.5
        last_step = float(np.max(np.abs(t * step))) if k else 0.0
        beta, f_cur = cand, f_new
        if k and np.max(np.abs(beta)) > clamp:
            break
    return np.clip(beta, -clamp, clamp), False, it


def _fit_ols(D, y, w):
    sw = np.sqrt(w)
    coef = np.linalg.lstsq(D * sw[:, None], y * sw, rcond=None)[0]
    return coef


def lasso_coordinate_descent(D, y, w, lam, tol=1e-7, max_sweeps=10000):
    """Weighted lasso by cyclic coordinate descent on standardized columns.

    ``D`` carries the intercept in column 0, which is left unpenalized. The
    objective is ``sum w (y - D b)^2 / (2 sum w) + lam * sum |b_std|`` where
    ``b_std`` are slopes on columns standardized to weighted mean 0 and
    weighted (population) variance 1. Returns ``(coef, sweeps, converged)``
    on the original column scale.
    """
    wn = w / w.sum()
    X = D[:, 1:]
    m = X.shape[1]
    mu = wn @ X
    sd = np.sqrt(wn @ (X - mu) ** 2)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    Xs = (X[:, keep] - mu[keep]) / sd[keep]
    ybar = wn @ y
    G = Xs.T @ (Xs * wn[:, None])
    c = Xs.T @ (wn * (y - ybar))
    beta, sweeps = _cd_loop(np.ascontiguousarray(G), np.ascontiguousarray(c), float(lam),
                            float(tol), int(max_sweeps))
    coef = np.zeros(m + 1)
    slopes = np.zeros(m)
    slopes[keep] = beta / sd[keep]
    coef[1:] = slopes
    coef[0] = ybar - slopes @ mu
    return coef, sweeps, sweeps < max_sweeps


@njit(cache=True)
def _cd_loop(G, c, lam, tol, max_sweeps):
    m = c.shape[0]
    b = np.zeros(m)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        biggest = 0.0
        for j in range(m):
            rho = c[j]
            for k in range(m):
                rho -= G[j, k] * b[k]
            old = b[j]
            rho += G[j, j] * old
            if rho > lam:
                new = (rho - lam) / G[j, j]
            elif rho < -lam:
                new = (rho + lam) / G[j, j]
            else:
                new = 0.0
            b[j] = new
            change = abs(new - old)
            if change > biggest:
                biggest = change
        if biggest < tol:
            break
    return b, sweeps


def _knn_predict(params, Xq, aq):
    Xt, yt, wt, at, k = params["X"], params["y"], params["w"], params["a"], params["k"]
    out = np.empty(Xq.shape[0])
    if at is None:
        groups = [(np.arange(Xq.shape[0]), np.arange(Xt.shape[0]))]
    else:
        groups = []
        for level in (0.0, 1.0):
            q = np.flatnonzero(aq == level)
            t = np.flatnonzero(at == level)
            groups.append((q, t if t.size else np.arange(Xt.shape[0])))
    for q, t in groups:
        if q.size == 0:
            continue
        kk = min(k, t.size)
        d2 = ((Xq[q, None, :] - Xt[None, t, :]) ** 2).sum(axis=2)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        idx = t[nn]
        ww = wt[idx]
        out[q] = (ww * yt[idx]).sum(axis=1) / ww.sum(axis=1)
    return out


def _cart_fit(F, y, w, max_depth, min_leaf):
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(value)
        wi, yi = w[idx], y[idx]
        mean = float(wi @ yi / wi.sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(mean)
        if depth >= max_depth or idx.size < 2 * min_leaf:
            return node
        split = _best_split(F[idx], yi - mean, wi, min_leaf)
        if split is None:
            return node
        f, thr = split
        go_left = F[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(y.size), 0)
    return {
        "feature": np.array(feature), "threshold": np.array(threshold),
        "left": np.array(left), "right": np.array(right), "value": np.array(value),
    }


def _best_split(F, yc, w, min_leaf):
    """Best (feature, midpoint) by weighted SSE reduction, or None.

    Ties go to the lower feature index, then the lower threshold.
    """
    n = yc.size
    total_w = w.sum()
    total_wy = w @ yc
    total_sse = w @ yc**2 - total_wy**2 / total_w
    tol = 1e-12 * max(1.0, abs(total_sse))
    best_gain, best = tol, None
    positions = np.arange(1, n)
    for f in range(F.shape[1]):
        order = np.argsort(F[:, f], kind="stable")
        xs = F[order, f]
        ws, ys = w[order], yc[order]
        cw = np.cumsum(ws)[:-1]
        cwy = np.cumsum(ws * ys)[:-1]
        ok = (xs[:-1] < xs[1:]) & (positions >= min_leaf) & (n - positions >= min_leaf)
        if not ok.any():
            continue
        rw = total_w - cw
        ry = total_wy - cwy
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cwy**2 / cw + ry**2 / rw - total_wy**2 / total_w
        gain = np.where(ok, gain, -np.inf)
        top = gain.max()
        if top > best_gain + tol:
            i = int(np.flatnonzero(gain >= top - tol)[0])
            best_gain = top
            best = (f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def _cart_predict(tree, F):
    node = np.zeros(F.shape[0], dtype=int)
    feature, threshold = tree["feature"], tree["threshold"]
    left, right = tree["left"], tree["right"]
    while True:
        f = feature[node]
        inner = f >= 0
        if not inner.any():
            break
        rows = np.flatnonzero(inner)
        go_left = F[rows, f[rows]] <= threshold[node[rows]]
        node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
    return tree["value"][node]


def _raw_features(X, a):
    return X if a is None else np.column_stack([a, X])


def fit_learner(spec: LearnerSpec, X, y, a=None, weights=None, offset=None) -> FittedLearner:
    """Fit one candidate on raw covariates ``X`` and optional treatment ``a``.

    ``offset`` is honored by the ols-type families and logistic only.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.shape[0]
    if n == 0:
        raise EmptyData("cannot fit on zero rows")
    if X.shape[0] != n:
        raise ShapeMismatch("covariate rows differ from target length")
    if a is not None:
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.shape[0] != n:
            raise ShapeMismatch("treatment length differs from target length")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if offset is not None:
        if spec.family not in ("ols", "ols_interact", "poly2", "logistic"):
            raise OffsetUnsupported(f"{spec.family} does not accept an offset")
        offset = np.asarray(offset, dtype=float).reshape(-1)
    _check_finite(X, y, a, w, offset)
    if np.any(w < 0) or w.sum() <= 0:
        raise LearnerError("weights must be nonnegative with a positive sum")
    p = X.shape[1]
    fam = spec.family
    converged, iterations = True, 0
    desc = ""

    if fam == "mean":
        params = {"mean": float(w @ y / w.sum())}
    elif fam in ("ols", "ols_interact", "poly2", "lasso", "logistic"):
        D = expand_basis(X, a, spec.basis)
        desc = f"{spec.basis} basis, {D.shape[1]} columns"
        if fam == "logistic":
            coef, converged, iterations = solve_logistic(D, y, w, offset)
        elif fam == "lasso":
            coef, iterations, converged = lasso_coordinate_descent(D, y, w, spec.lam)
        else:
            coef = _fit_ols(D, y if offset is None else y - offset, w)
        params = {"coef": coef}
    elif fam == "knn":
        params = {"X": X.copy(), "y": y.copy(), "w": w.copy(),
                  "a": None if a is None else a.copy(), "k": spec.k}
        desc = "euclidean on raw W, neighbours matched on A"
    else:
        params = _cart_fit(_raw_features(X, a), y, w, spec.max_depth, spec.min_leaf)
        desc = "axis-aligned splits on [A, W]" if a is not None else "axis-aligned splits on W"
    return FittedLearner(spec, params, p, a is not None, converged, iterations, desc)


def predict_learner(f: FittedLearner, X, a=None, offset=None) -> np.ndarray:
    X = _as_2d(X)
    if X.shape[1] != f.p:
        raise ShapeMismatch(f"expected {f.p} covariate columns, got {X.shape[1]}")
    if (a is not None) != f.with_treatment:
        raise ShapeMismatch("treatment column presence differs from training")
    if a is not None:
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.shape[0] != X.shape[0]:
            raise ShapeMismatch("treatment length differs from covariate rows")
    fam = f.spec.family
    if fam == "mean":
        return np.full(X.shape[0], f.params["mean"])
    if fam == "knn":
        return _knn_predict(f.params, X, a)
    if fam == "cart":
        return _cart_predict(f.params, _raw_features(X, a))
    eta = expand_basis(X, a, f.spec.basis) @ f.params["coef"]
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float).reshape(-1)
    if fam == "logistic":
        return np.clip(expit(eta), PROB_CLIP, 1.0 - PROB_CLIP)
    return eta
