"""Training objective and evaluation metrics."""

from __future__ import annotations

import warnings

import numpy as np

from .. import ndcore as nd
from ..ndcore import Tensor

PEARSON_EPS = 1e-8


class UndefinedMetricError(ArithmeticError):
    pass


class ConstantTargetWarning(RuntimeWarning):
    pass


def _is_constant(x: np.ndarray) -> bool:
    return float(np.ptp(x)) <= 1e-12 * max(1.0, float(np.abs(x).max()))


def _joint_loss_backward(g, d, pc, tc, s_pt, s_pp, s_tt, denom, weights):
    n = len(d)
    w_mae, w_mse, w_r = weights
    ratio = np.sqrt(s_tt / s_pp) if s_pp > 0 else 0.0
    dr = tc / denom - s_pt * pc * ratio / denom ** 2
    grad = w_mae * np.sign(d) / n + w_mse * 2.0 * d / n - w_r * dr
    return (g.item() * grad,)


def joint_loss(pred, target, weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """MAE + MSE + (1 - Pearson r) of a prediction vector against fixed targets.

    The Pearson denominator carries a 1e-8 guard; a constant target batch
    is flagged with :class:`ConstantTargetWarning` and contributes r = 0.
    """
    pred = nd.as_tensor(pred)
    p = pred.value.reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if len(p) != len(t) or len(p) < 2:
        raise ValueError(f"joint_loss needs matching vectors of length >= 2 ({len(p)} vs {len(t)})")
    if _is_constant(t):
        warnings.warn("constant target batch; Pearson term is eps-guarded", ConstantTargetWarning)
    d = p - t
    pc, tc = p - p.mean(), t - t.mean()
    s_pt, s_pp, s_tt = float(pc @ tc), float(pc @ pc), float(tc @ tc)
    denom = np.sqrt(s_pp * s_tt) + PEARSON_EPS
    r = s_pt / denom
    w_mae, w_mse, w_r = weights
    value = w_mae * np.abs(d).mean() + w_mse * (d ** 2).mean() + w_r * (1.0 - r)
    shape = pred.shape

    def rule(g):
        (grad,) = _joint_loss_backward(g, d, pc, tc, s_pt, s_pp, s_tt, denom, weights)
        return (grad.reshape(shape),)

    return nd._node(np.array([[value]]), (pred,), rule)


def r2(pred, target, reference_mean: float | None = None) -> float:
    """1 - SS_res / SS_tot, SS_tot about the evaluated targets' mean unless a reference is given."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if len(target) < 2 or _is_constant(target):
        raise UndefinedMetricError("R2 is undefined for a constant target")
    center = target.mean() if reference_mean is None else reference_mean
    ss_tot = float(((target - center) ** 2).sum())
    return 1.0 - float(((target - pred) ** 2).sum()) / ss_tot


def pcc(pred, target) -> float:
    """Pearson correlation; a constant prediction carries no linear association and scores 0."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if len(target) < 2 or _is_constant(target):
        raise UndefinedMetricError("PCC is undefined for a constant target")
    if _is_constant(pred):
        return 0.0
    pc, tc = pred - pred.mean(), target - target.mean()
    return float(pc @ tc / np.sqrt((pc @ pc) * (tc @ tc)))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if len(target) < 2:
        raise UndefinedMetricError("MAE needs at least 2 values")
    return float(np.abs(pred - target).mean())


METRICS = {"r2": r2, "pcc": pcc, "mae": mae}
