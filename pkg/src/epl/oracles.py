"""Slow, independent reference implementations used by selftest and the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def _focal_sets(n: int):
    # singletons {0}..{n-1}, then the whole frame
    return [frozenset([k]) for k in range(n)] + [frozenset(range(n))]


def dempster_bruteforce(voxel_masses, normalize_universal: bool = True) -> list:
    """Fuse per-voxel mass vectors ``[f_0..f_{N-1}, f_frame]`` by enumerating focal products.

    Every T-tuple of focal elements contributes the product of its masses to
    the intersection of its sets; empty intersections are conflict.
    """
    vecs = [list(map(float, v)) for v in voxel_masses]
    n = len(vecs[0]) - 1
    sets = _focal_sets(n)
    acc = {s: 0.0 for s in sets}
    conflict = 0.0
    for combo in itertools.product(range(n + 1), repeat=len(vecs)):
        mass = math.prod(v[i] for v, i in zip(vecs, combo))
        inter = frozenset.intersection(*(sets[i] for i in combo))
        if inter:
            acc[inter] += mass
        else:
            conflict += mass
    norm = 1.0 - conflict
    out = [acc[s] / norm for s in sets[:n]]
    frame = acc[sets[n]]
    out.append(frame / norm if normalize_universal else frame)
    return out


def fuse_field_bruteforce(arrays, normalize_universal: bool = True) -> np.ndarray:
    """Apply :func:`dempster_bruteforce` voxel by voxel to ``[N+1, ...]`` arrays."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    first = arrays[0]
    out = np.empty_like(first)
    flat = [a.reshape(a.shape[0], -1) for a in arrays]
    res = out.reshape(first.shape[0], -1)
    for j in range(res.shape[1]):
        res[:, j] = dempster_bruteforce([f[:, j] for f in flat], normalize_universal)
    return out


def belief_entropy(masses_by_set: dict) -> float:
    """Deng entropy ``-sum_A m(A) log2(m(A) / (2^|A| - 1))`` over non-empty focal sets."""
    h = 0.0
    for subset, m in masses_by_set.items():
        if m > 0:
            h -= m * math.log2(m / (2 ** len(subset) - 1))
    return h


def dual_uncertainty_reference(voxel_mass) -> float:
    """Universal mass times belief entropy, enumerating every subset of the frame."""
    v = [float(x) for x in voxel_mass]
    n = len(v) - 1
    masses = {}
    for r in range(1, n + 1):
        for subset in itertools.combinations(range(n), r):
            if r == 1:
                masses[frozenset(subset)] = v[subset[0]]
            elif r == n:
                masses[frozenset(subset)] = v[n]
            else:
                masses[frozenset(subset)] = 0.0
    return v[n] * belief_entropy(masses)


_NEIGHBOURS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def surface_voxels_bruteforce(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    dims = mask.shape
    found = []
    for idx in zip(*np.nonzero(mask)):
        for d in _NEIGHBOURS:
            nb = tuple(i + o for i, o in zip(idx, d))
            if any(c < 0 or c >= s for c, s in zip(nb, dims)) or not mask[nb]:
                found.append(idx)
                break
    return np.array(found, dtype=np.int64).reshape(-1, 3)


def surface_distances_bruteforce(pred, gt, k: int) -> tuple[float, float]:
    """All-pairs symmetric surface distances: (95th percentile, mean)."""
    p, g = np.asarray(pred) == k, np.asarray(gt) == k
    sp, sg = surface_voxels_bruteforce(p), surface_voxels_bruteforce(g)
    diff = sp[:, None, :] - sg[None, :, :]
    d2 = (diff * diff).sum(axis=-1).astype(np.float64)
    d = np.concatenate([np.sqrt(d2.min(axis=1)), np.sqrt(d2.min(axis=0))])
    return float(np.percentile(d, 95)), float(d.mean())
