"""Mass assignments over singletons plus the universal set, and their fusion.

Per voxel a :class:`MassField` holds masses ``f(C_0) .. f(C_{N-1})`` on the
singleton classes and ``f(C_N)`` on the whole frame. Fields are
channels-first with the class axis at position -4, so both ``[N,D,H,W]`` and
batched ``[B,N,D,H,W]`` layouts work. Values are :class:`~epl.tensor.Tensor`
so that fusion and Dirichlet induction stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConflictError, DomainError, ShapeError
from .tensor import Tensor

CLASS_AXIS = -4
CONFLICT_TOL = 1e-9


@dataclass
class MassField:
    singleton: Tensor   # [..., N, D, H, W]
    universal: Tensor   # [..., 1, D, H, W]

    @property
    def num_classes(self) -> int:
        return self.singleton.shape[CLASS_AXIS]

    @property
    def spatial_shape(self) -> tuple:
        return self.singleton.shape[-3:]

    def to_array(self) -> np.ndarray:
        """Stack as ``[..., N+1, D, H, W]`` (singletons first, universal last)."""
        return np.concatenate([self.singleton.data, self.universal.data], axis=CLASS_AXIS)

    @classmethod
    def from_array(cls, arr, requires_grad: bool = False) -> "MassField":
        arr = np.asarray(getattr(arr, "data", arr))
        if arr.ndim < 4 or arr.shape[CLASS_AXIS] < 3:
            raise ShapeError(f"mass array needs [..., N+1, D, H, W] with N >= 2, got {arr.shape}")
        n = arr.shape[CLASS_AXIS]
        sing = np.take(arr, np.arange(n - 1), axis=CLASS_AXIS)
        univ = np.take(arr, [n - 1], axis=CLASS_AXIS)
        return cls(Tensor(sing, requires_grad=requires_grad, dtype=arr.dtype),
                   Tensor(univ, requires_grad=requires_grad, dtype=arr.dtype))

    def detach(self) -> "MassField":
        return MassField(self.singleton.detach(), self.universal.detach())

    def total(self) -> np.ndarray:
        return self.singleton.data.sum(axis=CLASS_AXIS, keepdims=True) + self.universal.data

    def validate(self, tol: float = 1e-6) -> None:
        if self.singleton.data.min() < 0 or self.universal.data.min() < 0:
            raise DomainError("negative mass")
        dev = np.abs(self.total() - 1.0).max()
        if dev > tol:
            raise DomainError(f"masses sum to 1 only within {dev:.3g}")


@dataclass
class DirichletField:
    strength: Tensor    # S, [..., 1, D, H, W]
    evidence: Tensor    # e_n, [..., N, D, H, W]
    alpha: Tensor       # e_n + 1


def vacuous(num_classes: int, spatial_shape, batch: tuple = ()) -> MassField:
    sing = np.zeros(batch + (num_classes,) + tuple(spatial_shape))
    univ = np.ones(batch + (1,) + tuple(spatial_shape))
    return MassField(T.as_tensor(sing), T.as_tensor(univ))


def mass_from_evidence(evidence) -> MassField:
    """Map non-negative evidence to masses with ``S = sum(e) + (N - 1)``.

    This is the forward map whose inverse is :func:`dirichlet_from_mass`.
    """
    e = T.as_tensor(evidence)
    if e.ndim < 4:
        raise ShapeError(f"evidence must be [..., N, D, H, W], got {e.shape}")
    n = e.shape[CLASS_AXIS]
    if n < 2:
        raise DomainError("need at least two classes")
    if e.data.min() < 0:
        raise DomainError("evidence must be non-negative")
    strength = e.sum(axis=CLASS_AXIS, keepdims=True) + float(n - 1)
    return MassField(e / strength, float(n - 1) / strength)


def _check_congruent(m1: MassField, m2: MassField) -> None:
    if m1.singleton.shape != m2.singleton.shape:
        raise ShapeError(f"mass fields differ: {m1.singleton.shape} vs {m2.singleton.shape}")


def conflict(m1: MassField, m2: MassField) -> Tensor:
    """Total product mass on disagreeing singleton pairs, ``[..., 1, D, H, W]``."""
    s1 = m1.singleton.sum(axis=CLASS_AXIS, keepdims=True)
    s2 = m2.singleton.sum(axis=CLASS_AXIS, keepdims=True)
    agree = (m1.singleton * m2.singleton).sum(axis=CLASS_AXIS, keepdims=True)
    return s1 * s2 - agree


def dempster_pair(m1: MassField, m2: MassField, normalize_universal: bool = True) -> MassField:
    """Dempster's rule for two fields on the frame {singletons, universal set}.

    With ``normalize_universal=False`` the universal term is left as the bare
    product ``f1(C_N) f2(C_N)``, which yields a sub-normalized assignment.
    """
    _check_congruent(m1, m2)
    delta = conflict(m1, m2)
    norm = 1.0 - delta
    bad = norm.data < CONFLICT_TOL
    if bad.any():
        coords = np.argwhere(bad.squeeze(CLASS_AXIS))
        raise ConflictError(f"total conflict at {len(coords)} voxel(s), first {tuple(coords[0])}", coords)
    f1, f2 = m1.singleton, m2.singleton
    u1, u2 = m1.universal, m2.universal
    fused = (f1 * f2 + f1 * u2 + f2 * u1) / norm
    uu = u1 * u2
    return MassField(fused, uu / norm if normalize_universal else uu)


def dempster_fuse_all(masses, normalize_universal: bool = True) -> MassField:
    masses = list(masses)
    if not masses:
        raise ValueError("need at least one mass field")
    out = masses[0]
    for m in masses[1:]:
        out = dempster_pair(out, m, normalize_universal)
    return out


def average_masses(masses) -> MassField:
    """Arithmetic mean of several fields, renormalized to sum to one."""
    masses = list(masses)
    if not masses:
        raise ValueError("need at least one mass field")
    for m in masses[1:]:
        _check_congruent(masses[0], m)
    k = float(len(masses))
    sing = T.stack([m.singleton for m in masses]).sum(axis=0) / k
    univ = T.stack([m.universal for m in masses]).sum(axis=0) / k
    total = sing.sum(axis=CLASS_AXIS, keepdims=True) + univ
    return MassField(sing / total, univ / total)


def fuse(masses, mode: str = "dempster", normalize_universal: bool = True) -> MassField:
    if mode == "dempster":
        return dempster_fuse_all(masses, normalize_universal)
    if mode == "average":
        return average_masses(masses)
    raise ValueError(f"unknown fusion mode {mode!r}")


def dirichlet_from_mass(m: MassField) -> DirichletField:
    """``S = (N-1)/f(C_N)``, ``e_n = f(C_n) S``, ``alpha_n = e_n + 1``."""
    if m.universal.data.min() < 1e-12:
        raise DomainError("universal mass must be positive to induce a Dirichlet")
    n = m.num_classes
    strength = float(n - 1) / m.universal
    ev = m.singleton * strength
    return DirichletField(strength=strength, evidence=ev, alpha=ev + 1.0)


def expected_probs(d: DirichletField) -> Tensor:
    return d.alpha / d.alpha.sum(axis=CLASS_AXIS, keepdims=True)


def pseudo_labels(m: MassField) -> np.ndarray:
    """Argmax over singleton masses; ties resolve to the lowest class index."""
    return np.argmax(m.singleton.data, axis=CLASS_AXIS).astype(np.uint8)


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in 0..{num_classes - 1}")
    return labels
