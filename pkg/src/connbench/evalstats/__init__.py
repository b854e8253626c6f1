"""Fold planning, metrics, nested cross-validation and pairwise statistics."""

from .folds import FoldPlan, FoldPlanError, make_fold_plan
from .metrics import METRICS, ConstantTargetWarning, UndefinedMetricError, joint_loss, mae, pcc, r2
from .ttest import TTestResult, corrected_resampled_ttest

__all__ = ["FoldPlan", "FoldPlanError", "make_fold_plan", "METRICS", "ConstantTargetWarning",
           "UndefinedMetricError", "joint_loss", "mae", "pcc", "r2", "TTestResult",
           "corrected_resampled_ttest"]
