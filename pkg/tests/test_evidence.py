import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epl import evidence as ev
from epl import oracles
from epl.errors import ConflictError, DomainError, ShapeError


def mass(*vals):
    """Single-voxel field from ``f_0..f_{N-1}, u``."""
    return ev.MassField.from_array(np.array(vals, dtype=np.float64).reshape(-1, 1, 1, 1))


def voxel(m):
    return m.to_array().ravel()


@st.composite
def mass_arrays(draw, n=None, shape=(2, 1, 2)):
    n = n or draw(st.integers(2, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    raw = np.random.default_rng(seed).random((n + 1,) + shape) + 1e-3
    return raw / raw.sum(axis=0, keepdims=True)


def test_evidence_to_mass():
    m = ev.mass_from_evidence(np.zeros((2, 1, 1, 1)))
    np.testing.assert_array_equal(voxel(m), [0, 0, 1])
    m = ev.mass_from_evidence(np.array([6.0, 0, 0]).reshape(3, 1, 1, 1))
    np.testing.assert_allclose(voxel(m), [0.75, 0, 0, 0.25])
    with pytest.raises(DomainError):
        ev.mass_from_evidence(np.array([-1.0, 0]).reshape(2, 1, 1, 1))


def test_pairwise_worked_example():
    m1, m2 = mass(0.6, 0.2, 0.2), mass(0.5, 0.3, 0.2)
    assert ev.conflict(m1, m2).item() == pytest.approx(0.28, abs=1e-12)
    np.testing.assert_allclose(voxel(ev.dempster_pair(m1, m2)), [0.7222, 0.2222, 0.0556], atol=1e-4)
    raw = voxel(ev.dempster_pair(m1, m2, normalize_universal=False))
    assert raw[-1] == pytest.approx(0.04)
    assert ev.pseudo_labels(ev.dempster_pair(m1, m2)).item() == 0


def test_vacuous_identity_and_certainty():
    m = mass(0.3, 0.1, 0.6)
    np.testing.assert_allclose(voxel(ev.dempster_pair(m, ev.vacuous(2, (1, 1, 1)))), voxel(m), atol=1e-15)
    sure = mass(0, 0, 1, 0)
    np.testing.assert_array_equal(voxel(ev.dempster_pair(sure, sure)), [0, 0, 1, 0])


def test_total_conflict_reports_voxels():
    a = ev.MassField.from_array(np.stack([np.ones((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2))]))
    b = ev.MassField.from_array(np.stack([np.zeros((2, 2, 2)), np.ones((2, 2, 2)), np.zeros((2, 2, 2))]))
    with pytest.raises(ConflictError) as info:
        ev.dempster_pair(a, b)
    assert "8 voxel" in str(info.value)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ev.dempster_pair(mass(0.5, 0.5, 0), mass(0.3, 0.3, 0.3, 0.1))


@given(mass_arrays(), st.integers(1, 4))
def test_fuse_all_matches_bruteforce(arr0, t):
    rng = np.random.default_rng(int(arr0.sum() * 1e6) % 1000)
    arrs = [arr0] + [rng.dirichlet(np.ones(arr0.shape[0]), size=arr0.shape[1:]).transpose(3, 0, 1, 2)
                     for _ in range(t - 1)]
    fused = ev.dempster_fuse_all([ev.MassField.from_array(a) for a in arrs])
    np.testing.assert_allclose(fused.to_array(), oracles.fuse_field_bruteforce(arrs), atol=1e-9)
    assert np.abs(fused.total() - 1).max() < 1e-9


def test_fuse_all_identity_and_vacuous_member(rng):
    a = ev.MassField.from_array(rng.dirichlet(np.ones(4), size=(2, 2, 2)).transpose(3, 0, 1, 2))
    b = ev.MassField.from_array(rng.dirichlet(np.ones(4), size=(2, 2, 2)).transpose(3, 0, 1, 2))
    assert np.array_equal(ev.dempster_fuse_all([a]).to_array(), a.to_array())
    with_vac = ev.dempster_fuse_all([a, ev.vacuous(3, (2, 2, 2)), b]).to_array()
    np.testing.assert_allclose(with_vac, ev.dempster_pair(a, b).to_array(), atol=1e-15)


@given(mass_arrays(), mass_arrays(n=None))
def test_average_is_normalized(a, b):
    if a.shape != b.shape:
        b = a[::-1].copy()
    m = ev.average_masses([ev.MassField.from_array(a), ev.MassField.from_array(b)])
    assert np.abs(m.total() - 1).max() < 1e-12


def test_dirichlet_induction():
    d = ev.dirichlet_from_mass(mass(0.5, 0.25, 0.0, 0.25))
    assert d.strength.item() == pytest.approx(8)
    assert d.evidence.data.ravel()[0] == pytest.approx(4)
    assert d.alpha.data.ravel()[0] == pytest.approx(5)
    flat = ev.dirichlet_from_mass(ev.vacuous(2, (1, 1, 1)))
    assert flat.strength.item() == 1 and np.array_equal(flat.alpha.data.ravel(), [1, 1])
    with pytest.raises(DomainError):
        ev.dirichlet_from_mass(mass(0.5, 0.5, 0.0))


@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_evidence_round_trip(seed, n):
    e = np.random.default_rng(seed).gamma(1.0, 5.0, size=(n, 2, 2, 2))
    d = ev.dirichlet_from_mass(ev.mass_from_evidence(e))
    np.testing.assert_allclose(d.evidence.data, e, atol=1e-9)


def test_expected_probs_and_labels():
    d = ev.dirichlet_from_mass(ev.mass_from_evidence(np.array([4.0, 0, 0]).reshape(3, 1, 1, 1)))
    np.testing.assert_allclose(ev.expected_probs(d).data.ravel(), [5 / 7, 1 / 7, 1 / 7])
    np.testing.assert_allclose(ev.expected_probs(ev.dirichlet_from_mass(ev.vacuous(2, (1, 1, 1)))).data.ravel(), [0.5, 0.5])
    assert ev.pseudo_labels(mass(0, 0, 1, 0)).item() == 2
    assert ev.pseudo_labels(mass(0.4, 0.4, 0.2)).item() == 0
