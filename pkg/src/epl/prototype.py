"""Reliability-masked class prototypes, their fusion, and prototype similarity."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError
from .tensor import Tensor


@dataclass
class PrototypeSet:
    vectors: Tensor          # [N, F]; zero rows for invalid classes
    valid: np.ndarray        # [N] bool
    source: str = "fused"

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _flatten_spatial(h: Tensor) -> Tensor:
    return h.reshape(h.shape[:2] + (-1,))


def pool_prototypes(h, beta, labels, num_classes: int, source: str = "labeled") -> PrototypeSet:
    """Masked average pooling of features ``h [B,F,D,H,W]``.

    For each sample the numerator sums ``h * beta`` over voxels of class n and
    the denominator counts those voxels. A class prototype averages only over
    the samples that contain the class.
    """
    h = T.as_tensor(h)
    if h.ndim == 4:
        h = h.reshape((1,) + h.shape)
    beta = np.asarray(getattr(beta, "data", beta), dtype=np.float64)
    labels = np.asarray(labels)
    if beta.ndim == 3:
        beta = beta[None]
    if labels.ndim == 3:
        labels = labels[None]
    B, F = h.shape[:2]
    if beta.shape != (B,) + h.shape[2:] or labels.shape != beta.shape:
        raise ShapeError(f"features {h.shape}, reliability {beta.shape}, labels {labels.shape} disagree")
    onehot = labels.reshape(B, 1, -1) == np.arange(num_classes).reshape(1, -1, 1)   # [B,N,V]
    counts = onehot.sum(axis=-1)                                                     # [B,N]
    present = counts > 0
    weights = onehot * beta.reshape(B, 1, -1) / np.maximum(counts, 1)[..., None]
    per_sample = T.matmul(T.as_tensor(weights), T.transpose(_flatten_spatial(h), (0, 2, 1)))  # [B,N,F]
    n_present = present.sum(axis=0)                                                  # [N]
    mix = present / np.maximum(n_present, 1)                                         # [B,N]
    vectors = (T.as_tensor(mix[..., None]) * per_sample).sum(axis=0)
    return PrototypeSet(vectors=vectors, valid=n_present > 0, source=source)


def fuse_prototypes(p_l: PrototypeSet, p_u: PrototypeSet, gamma: float) -> PrototypeSet:
    """``P_l + gamma (P_u - P_l)`` where both are valid, else whichever one is."""
    if p_l.vectors.shape != p_u.vectors.shape:
        raise ShapeError(f"prototype sets differ: {p_l.vectors.shape} vs {p_u.vectors.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    both = p_l.valid & p_u.valid
    coef = np.where(both, gamma, np.where(p_u.valid, 1.0, 0.0))
    fused = p_l.vectors + T.as_tensor(coef[:, None]) * (p_u.vectors - p_l.vectors)
    return PrototypeSet(vectors=fused, valid=p_l.valid | p_u.valid, source="fused")


def cosine_similarity(h, protos: PrototypeSet) -> Tensor:
    """Cosine between every voxel feature and every prototype, ``[B,N,D,H,W]``.

    A zero-norm feature or prototype yields similarity 0.
    """
    h = T.as_tensor(h)
    squeeze = h.ndim == 4
    if squeeze:
        h = h.reshape((1,) + h.shape)
    if h.shape[1] != protos.dim:
        raise ShapeError(f"feature dim {h.shape[1]} != prototype dim {protos.dim}")
    flat = _flatten_spatial(h)                                           # [B,F,V]
    dots = T.matmul(protos.vectors, flat)                                # [B,N,V]
    h_norm = T.sqrt(T.clamp_min((flat * flat).sum(axis=1, keepdims=True), 1e-24))     # [B,1,V]
    p_norm = T.sqrt(T.clamp_min((protos.vectors * protos.vectors).sum(axis=1, keepdims=True), 1e-24))  # [N,1]
    cos = dots / (p_norm * h_norm)
    out = cos.reshape(h.shape[:1] + (protos.num_classes,) + h.shape[2:])
    return out.reshape(out.shape[1:]) if squeeze else out


def similarity_probs(h, protos: PrototypeSet, temperature: float = 0.1) -> Tensor:
    """Softmax of cosine similarity / temperature over the valid classes."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not protos.valid.any():
        raise ValueError("prototype set has no valid class")
    cos = cosine_similarity(h, protos)
    axis = cos.ndim - 4
    shape = [1] * cos.ndim
    shape[axis] = protos.num_classes
    mask = protos.valid.reshape(shape)
    logits = cos / temperature
    shift = np.where(mask, logits.data, np.array(-np.inf, logits.dtype)).max(axis=axis, keepdims=True)
    e = T.exp(logits - shift) * T.as_tensor(mask)
    return e / e.sum(axis=axis, keepdims=True)


def dump_prototypes(protos: PrototypeSet) -> bytes:
    """Header ``(N, dim)`` as u32 LE, then N*dim float32 LE, then N validity bytes."""
    vec = np.ascontiguousarray(protos.vectors.data, dtype="<f4")
    return (struct.pack("<II", protos.num_classes, protos.dim) + vec.tobytes()
            + protos.valid.astype(np.uint8).tobytes())


def load_prototypes(buf: bytes, source: str = "fused") -> PrototypeSet:
    if len(buf) < 8:
        raise FormatError("truncated prototype header")
    n, dim = struct.unpack_from("<II", buf, 0)
    need = 8 + 4 * n * dim + n
    if len(buf) != need:
        raise FormatError(f"prototype record should be {need} bytes, got {len(buf)}")
    vec = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=8).reshape(n, dim).astype(np.float32)
    valid = np.frombuffer(buf, dtype=np.uint8, count=n, offset=8 + 4 * n * dim).astype(bool)
    return PrototypeSet(vectors=Tensor(vec, dtype=np.float32), valid=valid, source=source)
