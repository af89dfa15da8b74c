"""Training objectives: generalized EDL loss, segmentation bundle, prototype CE, total."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .evidence import CLASS_AXIS, DirichletField
from .tensor import Tensor

SMOOTH = 1e-5
FOCAL_GAMMA = 2.0


def one_hot(labels, num_classes: int) -> np.ndarray:
    """``[..., D, H, W]`` integer labels -> ``[..., N, D, H, W]`` indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in 0..{num_classes - 1}")
    eye = np.eye(num_classes, dtype=T.get_default_dtype())
    return np.moveaxis(eye[labels.astype(np.intp)], -1, CLASS_AXIS)


def _check_unit(name, arr):
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError(f"{name} must lie in [0, 1]")


def gedl_loss(d: DirichletField, labels, u_bar, literal: bool = False) -> Tensor:
    """Uncertainty-weighted evidential loss, averaged over voxels.

    Per voxel ``(1 - u_bar) * sum_n y_n (log S - log alpha_n)``; with
    ``literal=True`` the bracket is ``log S - alpha_n`` instead.
    """
    u_bar = np.asarray(getattr(u_bar, "data", u_bar))
    _check_unit("normalized uncertainty", u_bar)
    n = d.alpha.shape[CLASS_AXIS]
    y = one_hot(labels, n)
    if y.shape != d.alpha.shape:
        raise ShapeError(f"labels {y.shape} do not match Dirichlet {d.alpha.shape}")
    if u_bar.shape != d.alpha.shape[:CLASS_AXIS] + d.alpha.shape[CLASS_AXIS + 1:]:
        raise ShapeError("uncertainty field does not match the Dirichlet field")
    ref = d.alpha if literal else T.log(d.alpha)
    per_voxel = (T.as_tensor(y) * (T.log(d.strength) - ref)).sum(axis=CLASS_AXIS)
    weight = T.as_tensor(1.0 - u_bar)
    return (weight * per_voxel).mean()


def check_probs(probs: Tensor, tol: float = 1e-4) -> None:
    rows = probs.data.sum(axis=CLASS_AXIS)
    if np.abs(rows - 1.0).max() > tol:
        raise DomainError("probabilities do not sum to one along the class axis")


def _spatial_axes(t: Tensor) -> tuple:
    # every axis except the class axis
    return tuple(i for i in range(t.ndim) if i != t.ndim + CLASS_AXIS)


def seg_loss(probs, labels) -> Tensor:
    """Mean of soft Dice, cross-entropy, soft IoU and focal (gamma=2) losses."""
    p = T.as_tensor(probs)
    check_probs(p)
    y = T.as_tensor(one_hot(labels, p.shape[CLASS_AXIS]))
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} do not match probabilities {p.shape}")
    axes = _spatial_axes(p)
    inter = (p * y).sum(axis=axes)
    psum = p.sum(axis=axes)
    ysum = y.sum(axis=axes)
    dice = 1.0 - ((2.0 * inter + SMOOTH) / (psum + ysum + SMOOTH)).mean()
    iou = 1.0 - ((inter + SMOOTH) / (psum + ysum - inter + SMOOTH)).mean()
    logp = T.log(p)
    ce = -(y * logp).sum(axis=CLASS_AXIS).mean()
    focal = -(y * (1.0 - p) ** FOCAL_GAMMA * logp).sum(axis=CLASS_AXIS).mean()
    return (dice + ce + iou + focal) / 4.0


def proto_ce_loss(sim_probs, labels, beta) -> Tensor:
    """Reliability-weighted voxel cross-entropy, normalized by the total weight."""
    s = T.as_tensor(sim_probs)
    check_probs(s)
    beta = np.asarray(getattr(beta, "data", beta))
    _check_unit("reliability", beta)
    y = one_hot(labels, s.shape[CLASS_AXIS])
    if y.shape != s.shape:
        raise ShapeError(f"labels {y.shape} do not match probabilities {s.shape}")
    total_w = float(beta.sum())
    if total_w <= 0.0:
        return T.as_tensor(0.0)
    ce = -(T.as_tensor(y) * T.log(s)).sum(axis=CLASS_AXIS)
    return (T.as_tensor(beta) * ce).sum() / total_w


@dataclass
class LossReport:
    seg: float
    gedl_labeled: float
    gedl_unlabeled: float
    proto_ce_labeled: float
    proto_ce_unlabeled: float
    lambda_con: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(seg, gedl_labeled, gedl_unlabeled, proto_ce_labeled, proto_ce_unlabeled,
               lambda_con: float) -> tuple[Tensor, LossReport]:
    """``seg + (proto_l + gedl_l) + lambda_con * (proto_u + gedl_u)``."""
    parts = [T.as_tensor(x) for x in (seg, gedl_labeled, gedl_unlabeled, proto_ce_labeled, proto_ce_unlabeled)]
    seg_t, gl, gu, pl, pu = parts
    total = seg_t + (pl + gl) + lambda_con * (pu + gu)
    vals = [float(x.data) for x in parts]
    report = LossReport(seg=vals[0], gedl_labeled=vals[1], gedl_unlabeled=vals[2],
                        proto_ce_labeled=vals[3], proto_ce_unlabeled=vals[4],
                        lambda_con=float(lambda_con), total=float(total.data))
    return total, report
