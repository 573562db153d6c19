import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hessmart.measures import (
    DiscreteMeasure,
    affine_hull_dimension,
    empirical,
    expectation,
    mean,
    product_measure,
    reduce_to_affine_hull,
)


def test_construction_rules():
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.5, -0.5])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0, 1.0]], [0.5, 0.5])
    m = DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0], allow_zero=True)
    assert m.support().size == 1
    # rounding-level mass error is renormalized
    m = DiscreteMeasure([0.0, 1.0], [0.5, 0.5 + 5e-10])
    assert abs(m.weights.sum() - 1.0) < 1e-15


@pytest.mark.parametrize(
    "atoms,weights,expected",
    [
        ([[-1.0], [1.0]], [0.5, 0.5], [0.0]),
        ([[1.0, 1.0]], [1.0], [1.0, 1.0]),
        ([[0.0], [1.0], [2.0]], [0.25, 0.5, 0.25], [1.0]),
    ],
)
def test_mean(atoms, weights, expected):
    np.testing.assert_allclose(mean(DiscreteMeasure(atoms, weights)), expected, atol=1e-15)


def test_expectation_examples():
    assert expectation(DiscreteMeasure.dirac([0.0]), lambda x: np.exp(x[0])) == 1.0
    assert expectation(DiscreteMeasure([-1.0, 1.0], [0.5, 0.5]), lambda x: abs(x[0])) == 1.0
    m = DiscreteMeasure([0.0, 0.5, 1.0], [0.25, 0.5, 0.25])
    assert expectation(m, lambda x: max(x[0] - 0.5, 0.0)) == pytest.approx(0.125, abs=1e-15)


def test_affine_hull_dimension_examples():
    assert affine_hull_dimension(DiscreteMeasure([[0, 0], [1, 1], [2, 2]], np.ones(3) / 3)) == 1
    assert affine_hull_dimension(DiscreteMeasure([[0, 0], [1, 0], [0, 1]], np.ones(3) / 3)) == 2
    assert affine_hull_dimension(DiscreteMeasure.dirac([3.0, 4.0])) == 0


def test_reduce_line():
    m1 = DiscreteMeasure([[0.5, 0.5]], [1.0])
    m2 = DiscreteMeasure([[0, 0], [1, 1]], [0.5, 0.5])
    (r1, r2), frame = reduce_to_affine_hull(m1, m2)
    assert r1.dim == r2.dim == 1
    np.testing.assert_allclose(np.abs(frame.basis[:, 0]), [2**-0.5, 2**-0.5], atol=1e-14)
    np.testing.assert_allclose(frame.lift(r2.atoms), m2.atoms, atol=1e-12)


def test_reduce_full_and_dirac():
    m = DiscreteMeasure([[0, 0], [1, 0], [0, 1]], np.ones(3) / 3)
    (r1, r2), frame = reduce_to_affine_hull(m, m)
    assert frame.is_identity and r1 is not None
    d = DiscreteMeasure.dirac([3.0, 4.0])
    (r1, r2), frame = reduce_to_affine_hull(d, d)
    assert frame.dim == 0 and r1.dim == 0
    np.testing.assert_allclose(frame.base, [3.0, 4.0])
    np.testing.assert_allclose(frame.lift(frame.project([[3.0, 4.0]])), [[3.0, 4.0]])


def test_json_round_trip_and_helpers():
    m = DiscreteMeasure([[0, 1], [2, 3]], [0.25, 0.75])
    back = DiscreteMeasure.from_json(m.to_json())
    np.testing.assert_array_equal(back.atoms, m.atoms)
    np.testing.assert_array_equal(back.weights, m.weights)
    p = product_measure(DiscreteMeasure([0, 1], [0.5, 0.5]), DiscreteMeasure([2, 3], [0.25, 0.75]))
    assert p.size == 4 and p.dim == 2
    np.testing.assert_allclose(p.mean(), [0.5, 2.75])
    np.testing.assert_allclose(empirical([1.0, 2.0, 3.0]).mean(), [2.0])


def _measures(max_n=3, max_atoms=8):
    @st.composite
    def build(draw):
        n = draw(st.integers(1, max_n))
        m = draw(st.integers(1, max_atoms))
        atoms = draw(hnp.arrays(float, (m, n), elements=st.floats(-10, 10)))
        raw = draw(hnp.arrays(float, m, elements=st.floats(0.05, 1.0)))
        return DiscreteMeasure(atoms, raw / raw.sum())
    return build()


@settings(max_examples=100, deadline=None)
@given(_measures(), st.floats(-5, 5), st.data())
def test_affine_expectation_exact(m, a, data):
    b = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=m.dim, max_size=m.dim)))
    val = expectation(m, lambda y: a + b @ y)
    assert abs(val - (a + b @ m.mean())) <= 1e-12 * (1 + abs(a) + np.abs(b).sum() * 10)


@settings(max_examples=100, deadline=None)
@given(_measures())
def test_reduce_then_lift(m):
    (r1, r2), frame = reduce_to_affine_hull(m, m)
    np.testing.assert_allclose(frame.lift(r2.atoms), m.atoms, atol=1e-10)
    assert r2.dim == affine_hull_dimension(m)


@settings(max_examples=60, deadline=None)
@given(_measures(), st.integers(0, 2**32 - 1))
def test_hull_dimension_rotation_invariant(m, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(m.dim, m.dim)))
    rot = DiscreteMeasure(m.atoms @ q.T, m.weights)
    assert affine_hull_dimension(rot) == affine_hull_dimension(m)
