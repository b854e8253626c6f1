"""Kernel ridge regression with a dot-product kernel on vectorized FC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .ndcore import ShapeError

DEFAULT_LAMBDAS = tuple(np.logspace(-6, 4, 16))
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class ConditioningError(ArithmeticError):
    pass


def kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entry (j, i) is the dot product of row j of ``a`` with row i of ``b``."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"kernel: feature widths differ ({a.shape[1]} vs {b.shape[1]})")
    return a @ b.T


@dataclass
class KernelModel:
    alphas: np.ndarray
    beta0: float
    lam: float
    train_features: np.ndarray
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = kernel_matrix

    def predict(self, features: np.ndarray) -> np.ndarray:
        return predict(self, features)


def _spd_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    scale = max(float(np.abs(np.diag(mat)).max()), 1.0)
    for jitter in JITTERS:
        try:
            factor = cho_factor(mat + jitter * scale * np.eye(len(mat)), lower=True)
        except LinAlgError:
            continue
        out = cho_solve(factor, rhs)
        if np.all(np.isfinite(out)):
            return out
    raise ConditioningError("Cholesky failed even with jitter 1e-6")


def fit(features: np.ndarray, targets: np.ndarray, lam: float,
        kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = kernel_matrix) -> KernelModel:
    """Joint minimizer of 1/2||y - K a - b0||^2 + lam/2 a'K a.

    With ``A = (K + lam I)^-1`` the optimum is ``b0 = 1'A y / 1'A 1`` and
    ``a = A (y - b0)``, an unpenalized intercept.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    m = len(y)
    if m < 2 or features.shape[0] != m:
        raise ShapeError(f"fit: {features.shape[0]} feature rows for {m} targets (need M >= 2)")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    k = kernel(features, features)
    sol = _spd_solve(k + lam * np.eye(m), np.column_stack([y, np.ones(m)]))
    a_y, a_1 = sol[:, 0], sol[:, 1]
    beta0 = float(a_y.sum() / a_1.sum())
    alphas = a_y - beta0 * a_1
    return KernelModel(alphas=alphas, beta0=beta0, lam=float(lam), train_features=features,
                       kernel=kernel)


def predict(model: KernelModel, features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return model.beta0 + model.kernel(features, model.train_features) @ model.alphas


def stationarity_residual(model: KernelModel, targets: np.ndarray) -> float:
    """Largest violation of K(y - K a - b0) = lam K a, relative to the terms' scale."""
    k = model.kernel(model.train_features, model.train_features)
    ka = k @ model.alphas
    lhs = k @ (np.asarray(targets) - ka - model.beta0)
    rhs = model.lam * ka
    return float(np.abs(lhs - rhs).max() / max(np.abs(lhs).max(), np.abs(rhs).max(), 1.0))


def r2_score(pred: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, dtype=np.float64)
    ss_tot = float(((target - target.mean()) ** 2).sum())
    return 1.0 - float(((target - pred) ** 2).sum()) / ss_tot


def select_lambda(features: np.ndarray, targets: np.ndarray, folds: Sequence[np.ndarray],
                  grid: Sequence[float] = DEFAULT_LAMBDAS,
                  prepare: Callable | None = None) -> float:
    """Grid value with the best mean inner-validation R^2; ties go to the largest lambda.

    ``folds`` holds one index array per inner fold; each in turn validates
    while the rest train. ``prepare(train_idx, val_idx)`` may return
    transformed ``(y_train, y_val)`` so target preprocessing is refit per
    inner split. Folds whose validation target is constant are not scored.
    """
    grid = sorted(set(float(g) for g in grid))
    if not grid:
        raise ValueError("empty lambda grid")
    if len(grid) == 1:
        return grid[0]
    y = np.asarray(targets, dtype=np.float64)
    scores = np.zeros(len(grid))
    all_idx = np.concatenate(folds)
    scored = 0
    for val_idx in folds:
        train_idx = np.setdiff1d(all_idx, val_idx)
        if prepare is None:
            y_tr, y_val = y[train_idx], y[val_idx]
        else:
            y_tr, y_val = prepare(train_idx, val_idx)
        # R^2 is undefined on a constant (e.g. single-subject) validation fold.
        if np.ptp(y_val) == 0:
            continue
        scored += 1
        for i, lam in enumerate(grid):
            model = fit(features[train_idx], y_tr, lam)
            scores[i] += r2_score(predict(model, features[val_idx]), y_val)
    if scored == 0:
        raise ValueError("no inner fold has a non-constant validation target")
    scores /= scored
    best = scores.max()
    tie = 1e-12 * max(1.0, abs(best))
    return max(lam for lam, s in zip(grid, scores) if s >= best - tie)
