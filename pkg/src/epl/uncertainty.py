"""Dual uncertainty (original uncertainty x belief entropy) and reliability maps."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DomainError
from .evidence import CLASS_AXIS, MassField
from .tensor import Tensor


def dual_uncertainty(m: MassField) -> Tensor:
    """Per-voxel ``U = -u * sum_n f(C_n) log2(f(C_n) / (2^|C_n| - 1))``.

    The sum runs over the N singletons (denominator 1) and the universal set
    (denominator ``2^N - 1``); ``u`` is the universal mass. Zero masses
    contribute nothing. Returns ``[..., D, H, W]``.
    """
    n = m.num_classes
    f, u = m.singleton, m.universal
    singles = (f * T.log2(f)).sum(axis=CLASS_AXIS, keepdims=True)
    whole = u * T.log2(u / float(2 ** n - 1))
    out = -(u * (singles + whole))
    return out.reshape(out.shape[:CLASS_AXIS] + out.shape[CLASS_AXIS + 1:])


def normalize01(u, scope: str = "volume") -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant range maps to all zeros.

    ``scope="volume"`` normalizes each ``[D,H,W]`` volume of a batch on its own,
    ``scope="batch"`` uses one range for everything.
    """
    u = np.asarray(getattr(u, "data", u), dtype=np.float64)
    if u.size == 0:
        raise ValueError("cannot normalize an empty field")
    if scope == "batch" or u.ndim <= 3:
        axes = None
    elif scope == "volume":
        axes = tuple(range(u.ndim - 3, u.ndim))
    else:
        raise ValueError(f"unknown normalization scope {scope!r}")
    lo = u.min(axis=axes, keepdims=True)
    span = u.max(axis=axes, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (u - lo) / safe, 0.0)


def reliability_map(u_bar) -> np.ndarray:
    """``beta = 1 - u_bar``; reliable voxels get weights near 1."""
    u_bar = np.asarray(getattr(u_bar, "data", u_bar), dtype=np.float64)
    if u_bar.size and (u_bar.min() < 0.0 or u_bar.max() > 1.0):
        raise DomainError("normalized uncertainty must lie in [0, 1]")
    return 1.0 - u_bar
