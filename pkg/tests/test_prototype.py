import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epl import prototype as P
from epl import tensor as T
from epl.errors import FormatError, ShapeError
from epl.tensor import Tensor


def feats(*vectors):
    """Features ``[1, F, 1, 1, V]`` from V voxel vectors."""
    return np.array(vectors, dtype=np.float64).T.reshape(1, len(vectors[0]), 1, 1, len(vectors))


def test_pooling_values():
    v1, v2 = [1.0, 2.0], [3.0, -1.0]
    h = feats(v1, v2)
    lbl = np.array([1, 1]).reshape(1, 1, 1, 2)
    p = P.pool_prototypes(h, np.ones((1, 1, 1, 2)), lbl, 2)
    np.testing.assert_allclose(p.vectors.data[1], [2.0, 0.5])
    assert p.valid.tolist() == [False, True]
    p = P.pool_prototypes(h, np.array([1.0, 0.0]).reshape(1, 1, 1, 2), lbl, 2)
    np.testing.assert_allclose(p.vectors.data[1], [0.5, 1.0])   # divided by the voxel count
    single = P.pool_prototypes(feats(v1), np.ones((1, 1, 1, 1)), np.ones((1, 1, 1, 1), int), 2)
    np.testing.assert_allclose(single.vectors.data[1], v1)


def test_pooling_averages_over_samples_with_class():
    h = np.concatenate([feats([1.0, 0.0], [0.0, 0.0]), feats([5.0, 5.0], [3.0, 3.0])])
    lbl = np.array([[1, 0], [0, 0]]).reshape(2, 1, 1, 2)
    p = P.pool_prototypes(h, np.ones((2, 1, 1, 2)), lbl, 2)
    np.testing.assert_allclose(p.vectors.data[1], [1.0, 0.0])   # only the first sample has class 1
    np.testing.assert_allclose(p.vectors.data[0], [(0 + 4.0) / 2, (0 + 4.0) / 2])


def test_pooling_shape_error():
    with pytest.raises(ShapeError):
        P.pool_prototypes(feats([1.0]), np.ones((1, 1, 1, 2)), np.ones((1, 1, 1, 1), int), 2)


def pset(*rows, valid=None):
    v = np.array(rows, dtype=np.float64)
    return P.PrototypeSet(Tensor(v), np.ones(len(rows), bool) if valid is None else np.array(valid))


def test_fusion():
    pl, pu = pset([2.0, 0.0]), pset([0.0, 2.0])
    np.testing.assert_allclose(P.fuse_prototypes(pl, pu, 0.0).vectors.data, pl.vectors.data)
    np.testing.assert_allclose(P.fuse_prototypes(pl, pu, 1.0).vectors.data, pu.vectors.data)
    np.testing.assert_allclose(P.fuse_prototypes(pl, pu, 0.5).vectors.data, [[1.0, 1.0]])
    with pytest.raises(ShapeError):
        P.fuse_prototypes(pl, pset([1.0, 2.0, 3.0]), 0.5)


def test_similarity_values():
    h = feats([1.0, 0.0])
    probs = P.similarity_probs(h, pset([1.0, 0.0], [-1.0, 0.0]), temperature=1.0).data.ravel()
    np.testing.assert_allclose(probs, [0.8808, 0.1192], atol=1e-4)
    same = P.similarity_probs(h, pset([0.3, 0.4], [0.3, 0.4]), 0.1).data.ravel()
    np.testing.assert_allclose(same, [0.5, 0.5])
    sharp = P.similarity_probs(h, pset([1.0, 0.0], [0.0, 1.0]), 0.01).data.ravel()
    assert sharp[0] > 1 - 1e-12
    zero = P.cosine_similarity(feats([0.0, 0.0]), pset([1.0, 0.0], [0.0, 1.0])).data
    assert not zero.any()
    masked = P.similarity_probs(h, pset([1.0, 0.0], [0.0, 1.0], valid=[False, True]), 0.1).data.ravel()
    np.testing.assert_array_equal(masked, [0.0, 1.0])


@given(st.integers(0, 2**32 - 1))
def test_similarity_gradient(seed):
    rng = np.random.default_rng(seed)
    protos = pset(*rng.normal(size=(3, 4)))
    h0 = rng.normal(size=(1, 4, 2, 2, 1))
    w = rng.random((3, 2, 2, 1))
    assert T.finite_diff_check(lambda h: (P.similarity_probs(h, protos, 0.5)[0] * w).sum(), h0) <= 1e-4


def test_dump_round_trip(rng):
    p = P.PrototypeSet(Tensor(rng.normal(size=(3, 5)).astype(np.float32)), np.array([True, False, True]))
    q = P.load_prototypes(P.dump_prototypes(p))
    assert np.array_equal(q.vectors.data, p.vectors.data) and q.valid.tolist() == [True, False, True]
    with pytest.raises(FormatError):
        P.load_prototypes(P.dump_prototypes(p)[:-1])
