"""Training objectives: joint MSE, clamped KL for skinning, and their plain sum."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, add, as_tensor, log, mul, square, sub, sum_
from ..autodiff.tensor import ShapeError

KL_EPS = 1e-8


def loss_skeleton(pred: Tensor, target) -> Tensor:
    """Mean over joints of the squared Euclidean joint error."""
    pred = as_tensor(pred)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"loss_skeleton: {pred.shape} vs {target.shape}")
    return mul(sum_(square(sub(pred, target))), 1.0 / pred.shape[0])


def loss_skinning(pred: Tensor, target, log_pred: Tensor | None = None) -> Tensor:
    """``(1/m) sum_ij P_ij log(P_ij / max(G_ij, eps))``.

    ``log_pred`` should be passed when available (e.g. from log-softmax) so
    tiny probabilities do not underflow inside the log.
    """
    pred = as_tensor(pred)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"loss_skinning: {pred.shape} vs {target.shape}")
    if log_pred is None:
        # exact zeros contribute 0 log 0 = 0; shift them to log(1) so the tape stays finite
        log_pred = log(add(pred, (pred.data == 0).astype(np.float64)))
    log_target = np.log(np.maximum(target, KL_EPS))
    return mul(sum_(mul(pred, sub(log_pred, log_target))), 1.0 / pred.shape[0])


def loss_total(pred_joints, pred_skin, gt_joints, gt_skin, log_pred_skin=None) -> Tensor:
    return loss_skinning(pred_skin, gt_skin, log_pred_skin) + loss_skeleton(pred_joints, gt_joints)


def loss_skinning_forward(log_pred: Tensor, target) -> Tensor:
    """``(1/m) sum_ij G_ij log(G_ij / P_ij)`` with ``0 log 0 = 0``.

    Not part of the reported total.  The trainer adds it to the clamped KL
    above: on its own that KL parks confident mass on a neighbouring bone and
    then barely moves, because its gradient on a column scales with P there.
    """
    log_pred = as_tensor(log_pred)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if log_pred.shape != target.shape:
        raise ShapeError(f"loss_skinning_forward: {log_pred.shape} vs {target.shape}")
    pos = target > 0
    entropy = float((target[pos] * np.log(target[pos])).sum())
    return mul(sub(entropy, sum_(mul(target, log_pred))), 1.0 / target.shape[0])
