"""Downstream protocols: place recognition, area regression, linear probe."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .formats import EmbeddingSet
from .geo import EARTH_RADIUS_M, GeoPoint, ImageRecord

logger = logging.getLogger(__name__)


class DegenerateTargetError(ValueError):
    """Raised when a regression target has no variance."""


# --------------------------------------------------------------------------
# Place recognition
# --------------------------------------------------------------------------


def haversine_matrix(a: Sequence[GeoPoint], b: Sequence[GeoPoint]) -> np.ndarray:
    la = np.radians([p.lat for p in a])[:, None]
    lb = np.radians([p.lat for p in b])[None, :]
    dl = np.radians(np.subtract.outer([p.lon for p in a], [p.lon for p in b]))
    h = np.sin((lb - la) / 2) ** 2 + np.cos(la) * np.cos(lb) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


@dataclass
class VprTask:
    queries: EmbeddingSet
    query_pos: List[GeoPoint]
    database: EmbeddingSet
    db_pos: List[GeoPoint]
    match_threshold_m: float = 25.0
    matches: Optional[Mapping[str, Sequence[str]]] = None

    def __post_init__(self):
        if self.queries.dim != self.database.dim:
            raise ValueError("query and database dimensions differ")
        if len(self.query_pos) != len(self.queries) or len(self.db_pos) != len(self.database):
            raise ValueError("positions must align with embedding rows")

    def valid_matrix(self) -> np.ndarray:
        if self.matches is not None:
            row = self.database.row_of()
            valid = np.zeros((len(self.queries), len(self.database)), dtype=bool)
            for qi, qid in enumerate(self.queries.ids):
                for did in self.matches.get(qid, ()):
                    if did in row:
                        valid[qi, row[did]] = True
            return valid
        return haversine_matrix(self.query_pos, self.db_pos) <= self.match_threshold_m


def first_match_ranks(task: VprTask) -> np.ndarray:
    """0-based rank of the first correct database row per query; -1 without any valid match."""
    sims = task.queries.matrix @ task.database.matrix.T
    valid = task.valid_matrix()
    id_rank = np.argsort(np.argsort(np.array(task.database.ids, dtype=object)))
    out = np.full(len(task.queries), -1, dtype=np.int64)
    for qi in range(len(task.queries)):
        if not valid[qi].any():
            continue
        order = np.lexsort((id_rank, -sims[qi]))
        out[qi] = int(np.flatnonzero(valid[qi, order])[0])
    return out


def recall_at_k(task: VprTask, k: int) -> float:
    return evaluate_vpr(task, [k])["recall"][str(k)]


def evaluate_vpr(task: VprTask, ks: Sequence[int] = (1, 5, 10, 15, 20, 25)) -> dict:
    if any(int(k) < 1 for k in ks):
        raise ValueError("K must be >= 1")
    ranks = first_match_ranks(task)
    scored = ranks[ranks >= 0]
    recall = {str(int(k)): (float(np.mean(scored < int(k))) if len(scored) else float("nan")) for k in ks}
    return {
        "recall": recall,
        "n_queries": int(len(ranks)),
        "n_scored": int(len(scored)),
        "n_without_match": int(np.sum(ranks < 0)),
        "mode": "match_list" if task.matches is not None else "threshold",
        "match_threshold_m": task.match_threshold_m,
    }


# --------------------------------------------------------------------------
# Area regression
# --------------------------------------------------------------------------


def aggregate_by_area(embeddings: EmbeddingSet, records: Sequence[ImageRecord]) -> Tuple[List[str], np.ndarray]:
    """Mean embedding per area; areas sorted by id."""
    area_of = {r.id: r.area_id for r in records}
    missing = [i for i in embeddings.ids if area_of.get(i) is None]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ValueError(f"{len(missing)} embeddings without an area: {shown}")
    labels = np.array([area_of[i] for i in embeddings.ids], dtype=object)
    areas = sorted(set(labels))
    feats = np.stack([embeddings.matrix[labels == a].mean(axis=0) for a in areas]) if areas else np.empty((0, embeddings.dim))
    return areas, feats


def soft_threshold(x: float, t: float) -> float:
    return np.sign(x) * max(abs(x) - t, 0.0)


@njit(cache=True)
def _cd_sweeps(X, col_sq, beta, resid, lam, max_sweeps, tol):
    m, d = X.shape
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(d):
            if col_sq[j] <= 1e-12:
                continue
            old = beta[j]
            rho = 0.0
            for i in range(m):
                rho += X[i, j] * resid[i]
            rho = rho / m + col_sq[j] * old
            if rho > lam:
                new = (rho - lam) / col_sq[j]
            elif rho < -lam:
                new = (rho + lam) / col_sq[j]
            else:
                new = 0.0
            if new != old:
                step = new - old
                for i in range(m):
                    resid[i] -= X[i, j] * step
                beta[j] = new
                if abs(step) > max_delta:
                    max_delta = abs(step)
        if max_delta < tol:
            return sweep + 1
    return max_sweeps


def lasso_fit(X, y, lam: float, max_sweeps: int = 10_000, tol: float = 1e-8, beta0=None) -> Tuple[np.ndarray, float]:
    """Cyclic coordinate descent for ``(1/2m)||y - X b||^2 + lam ||b||_1``.

    ``X`` is expected standardized and ``y`` centered; the returned
    intercept absorbs any residual offset. Stops once no coefficient moves
    more than ``tol`` in a sweep.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, d = X.shape
    col_sq = np.einsum("ij,ij->j", X, X) / m
    dead = col_sq <= 1e-12
    if dead.any():
        warnings.warn(f"constant columns {np.flatnonzero(dead).tolist()} fixed at zero", RuntimeWarning, stacklevel=2)
    beta = np.zeros(d) if beta0 is None else np.array(beta0, dtype=np.float64)
    beta[dead] = 0.0
    resid = y - X @ beta
    _cd_sweeps(X, col_sq, beta, resid, float(lam), int(max_sweeps), float(tol))
    intercept = float(np.mean(y - X @ beta))
    return beta, intercept


def lambda_max(X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(np.max(np.abs(X.T @ np.asarray(y, dtype=np.float64))) / len(X))


def lambda_grid(X, y, n: int = 50, ratio: float = 1e-4) -> np.ndarray:
    top = lambda_max(X, y)
    return np.geomspace(top, top * ratio, n) if top > 0 else np.zeros(1)


class Standardizer:
    """Zero-mean, unit-variance columns; constant columns pass through centered."""

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_


class LassoRegressor(RegressorMixin, BaseEstimator):
    """LASSO on standardized features with an unpenalized intercept."""

    def __init__(self, alpha=1.0, max_sweeps=10_000, tol=1e-8):
        self.alpha = alpha
        self.max_sweeps = max_sweeps
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.scaler_ = Standardizer().fit(X)
        self.y_mean_ = float(y.mean())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            beta, _ = lasso_fit(self.scaler_.transform(X), y - self.y_mean_, self.alpha, self.max_sweeps, self.tol)
        self.beta_std_ = beta
        self.coef_ = beta / self.scaler_.scale_
        self.intercept_ = self.y_mean_ - float(self.scaler_.mean_ @ self.coef_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size < 2:
        raise ValueError("need at least 2 aligned samples")
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0:
        raise DegenerateTargetError("r2 undefined for a constant target")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


@dataclass
class RegressionTask:
    features: np.ndarray
    targets: np.ndarray
    test_fraction: float = 0.3
    folds: int = 5

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.features) != len(self.targets):
            raise ValueError("features and targets must align")
        if len(self.targets) < self.folds:
            raise ValueError(f"need at least {self.folds} samples")


@dataclass
class CVResult:
    lam: float
    test_r2: float
    lambdas: np.ndarray
    cv_r2: np.ndarray
    n_train: int
    n_test: int
    skipped_folds: int = 0

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "test_r2": self.test_r2,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "skipped_folds": self.skipped_folds,
            "best_cv_r2": float(np.nanmax(self.cv_r2)),
        }


def train_test_indices(n: int, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def cross_validate(task: RegressionTask, lambdas=None, seed: int = 0) -> CVResult:
    """Seeded train/test split, k-fold choice of lambda on train, test R^2 of the refit."""
    X, y = task.features, task.targets
    if np.ptp(y) == 0:
        raise DegenerateTargetError("regression target is constant")
    tr, te = train_test_indices(len(y), task.test_fraction, seed)
    Xtr, ytr = X[tr], y[tr]
    if lambdas is None:
        lambdas = lambda_grid(Standardizer().fit(Xtr).transform(Xtr), ytr - ytr.mean())
    lambdas = np.asarray(lambdas, dtype=np.float64)

    fold_of = np.random.default_rng([seed, 1]).permutation(len(tr)) % task.folds
    scores = np.full((task.folds, len(lambdas)), np.nan)
    skipped = 0
    for f in range(task.folds):
        fit_idx, val_idx = fold_of != f, fold_of == f
        if np.ptp(ytr[val_idx]) == 0 or np.ptp(ytr[fit_idx]) == 0:
            logger.warning("fold %d: target has fewer than two distinct values on one side; skipped", f)
            skipped += 1
            continue
        scaler = Standardizer().fit(Xtr[fit_idx])
        Xf, Xv = scaler.transform(Xtr[fit_idx]), scaler.transform(Xtr[val_idx])
        mu = ytr[fit_idx].mean()
        beta = None
        for li, lam in enumerate(lambdas):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                beta, _ = lasso_fit(Xf, ytr[fit_idx] - mu, lam, beta0=beta)
            scores[f, li] = r2_score(ytr[val_idx], Xv @ beta + mu)
    if skipped == task.folds:
        raise DegenerateTargetError("every fold had a constant target")
    mean_cv = np.nanmean(scores, axis=0)
    best = int(np.nanargmax(mean_cv))
    model = LassoRegressor(alpha=lambdas[best]).fit(Xtr, ytr)
    test_r2 = r2_score(y[te], model.predict(X[te]))
    return CVResult(float(lambdas[best]), test_r2, lambdas, mean_cv, len(tr), len(te), skipped)


# --------------------------------------------------------------------------
# Linear probe and classification metrics
# --------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Logistic regression by full-batch gradient descent from zero weights.

    Features are standardized with training statistics first unless
    ``standardize=False``.
    """

    def __init__(self, learning_rate=0.1, epochs=20, standardize=True):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError("linear probe needs both classes in the training set")
        t = (y == self.classes_[1]).astype(np.float64)
        self.scaler_ = Standardizer().fit(X) if self.standardize else None
        Z = self.scaler_.transform(X) if self.standardize else X
        w = np.zeros(X.shape[1])
        b = 0.0
        self.loss_curve_ = []
        for _ in range(self.epochs):
            p = _sigmoid(Z @ w + b)
            err = p - t
            w -= self.learning_rate * (Z.T @ err) / len(t)
            b -= self.learning_rate * float(err.mean())
            self.loss_curve_.append(float(-np.mean(t * np.log(p + 1e-300) + (1 - t) * np.log(1 - p + 1e-300))))
        self.coef_, self.intercept_ = w, b
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        Z = self.scaler_.transform(X) if self.scaler_ is not None else X
        return Z @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.predict_proba(X)[:, 1] >= 0.5).astype(int)]


@dataclass
class ProbeTask:
    features: np.ndarray
    scores: np.ndarray
    low: float = 3.5
    high: float = 6.5
    train_fraction: float = 0.8
    epochs: int = 20

    def labelled(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rows with a score below ``low`` (label 0) or above ``high`` (label 1)."""
        s = np.asarray(self.scores, dtype=np.float64)
        keep = (s < self.low) | (s > self.high)
        return np.flatnonzero(keep), (s[keep] > self.high).astype(int)


@dataclass
class ProbeResult:
    coef: np.ndarray
    intercept: float
    test_scores: np.ndarray
    test_labels: np.ndarray
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)


def stratified_split(labels: np.ndarray, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(train_fraction * len(idx)))
        n_tr = min(max(n_tr, 1), len(idx) - 1) if len(idx) > 1 else n_tr
        tr.append(idx[:n_tr])
        te.append(idx[n_tr:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))


def train_linear_probe(task: ProbeTask, lr: float = 0.1, seed: int = 0, standardize: bool = True) -> ProbeResult:
    rows, labels = task.labelled()
    if len(np.unique(labels)) < 2:
        raise ValueError("probe needs both low and high score examples")
    X = np.asarray(task.features, dtype=np.float64)[rows]
    tr, te = stratified_split(labels, task.train_fraction, seed)
    probe = LinearProbe(learning_rate=lr, epochs=task.epochs, standardize=standardize).fit(X[tr], labels[tr])
    scores = probe.predict_proba(X[te])[:, 1]
    return ProbeResult(probe.coef_, probe.intercept_, scores, labels[te], classification_metrics(scores, labels[te]))


def roc_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos, neg = scores[labels == 1], np.sort(scores[labels == 0])
    if not len(pos) or not len(neg):
        raise ValueError("AUC needs both classes")
    lo = np.searchsorted(neg, pos, side="left")
    hi = np.searchsorted(neg, pos, side="right")
    return float((lo.sum() + 0.5 * (hi - lo).sum()) / (len(pos) * len(neg)))


def classification_metrics(scores, labels, threshold: float = 0.5) -> Dict[str, Optional[float]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (scores >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    try:
        auc: Optional[float] = roc_auc(scores, labels)
    except ValueError:
        auc = None
    return {
        "accuracy": (tp + tn) / len(labels) if len(labels) else 0.0,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "f1": 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0,
        "auc": auc,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }
