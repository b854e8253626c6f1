"""Corrected resampled t-test for k-fold cross-validation differences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc


@dataclass(frozen=True)
class TTestResult:
    mean_diff: float
    corrected_var: float
    t: float
    p: float
    df: int


def student_t_two_sided(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t, via the regularized incomplete beta function."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def corrected_resampled_ttest(diffs, n_train: float, n_test: float) -> TTestResult:
    """Paired t-test with the variance inflated by (1/k + n_test/n_train).

    The inflation accounts for the overlap between training sets of
    different folds.
    """
    d = np.asarray(diffs, dtype=np.float64)
    k = len(d)
    if k < 2:
        raise ValueError("need at least two per-fold differences")
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    corrected = var * (1.0 / k + n_test / n_train)
    if np.ptp(d) == 0.0:
        if mean == 0.0:
            return TTestResult(mean, 0.0, 0.0, 1.0, k - 1)
        return TTestResult(mean, 0.0, math.copysign(math.inf, mean), 0.0, k - 1)
    t = mean / math.sqrt(corrected)
    return TTestResult(mean, corrected, t, student_t_two_sided(t, k - 1), k - 1)
