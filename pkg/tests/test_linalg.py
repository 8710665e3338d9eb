import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmvtrack.linalg import (
    OrthonormalBasis,
    Projector,
    complement_basis,
    min_nonzero_singular,
    numerical_rank,
    orthonormal_basis,
    pivoted_independent_columns,
    project,
    projector_distance,
    spectral_norm,
)


def proj(basis):
    Q = basis.columns
    return Q @ Q.T


# -- orthonormal_basis


def test_basis_of_axis_matrix():
    b = orthonormal_basis([[1.0, 0.0], [0.0, 0.0]])
    assert b.basis_dim == 1
    np.testing.assert_allclose(proj(b), [[1, 0], [0, 0]], atol=1e-12)


def test_basis_of_identity():
    assert orthonormal_basis(np.eye(2)).basis_dim == 2


def test_basis_of_rank_one():
    b = orthonormal_basis([[1.0, 2.0], [2.0, 4.0]])
    assert b.basis_dim == 1
    v = np.array([1.0, 2.0]) / math.sqrt(5)
    np.testing.assert_allclose(proj(b), np.outer(v, v), atol=1e-12)


def test_basis_of_zero_matrix_is_empty():
    b = orthonormal_basis(np.zeros((3, 2)))
    assert b.basis_dim == 0 and b.ambient_dim == 3


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        orthonormal_basis([[np.nan, 1.0]])


# -- complement_basis


def test_complement_of_e1():
    c = complement_basis(orthonormal_basis([[1.0], [0.0]]))
    np.testing.assert_allclose(proj(c), [[0, 0], [0, 1]], atol=1e-12)


def test_complement_of_empty_is_everything():
    c = complement_basis(OrthonormalBasis.empty(3))
    assert c.basis_dim == 3
    np.testing.assert_allclose(proj(c), np.eye(3), atol=1e-12)


def test_complement_of_diagonal():
    c = complement_basis(orthonormal_basis([[1.0], [1.0]]))
    w = np.array([1.0, -1.0]) / math.sqrt(2)
    np.testing.assert_allclose(proj(c), np.outer(w, w), atol=1e-12)


def test_complement_of_full_space_is_empty():
    assert complement_basis(orthonormal_basis(np.eye(3))).basis_dim == 0


# -- project


def test_project_onto_e1():
    P = Projector(orthonormal_basis([[1.0], [0.0]]))
    np.testing.assert_allclose(project(P, [3.0, 4.0]), [3.0, 0.0], atol=1e-12)


def test_project_empty_basis():
    P = Projector(OrthonormalBasis.empty(2))
    np.testing.assert_array_equal(project(P, [3.0, 4.0]), [0.0, 0.0])


def test_project_onto_diagonal():
    P = Projector(orthonormal_basis([[1.0], [1.0]]))
    np.testing.assert_allclose(project(P, [1.0, 0.0]), [0.5, 0.5], atol=1e-12)


def test_project_dimension_mismatch():
    P = Projector(orthonormal_basis([[1.0], [0.0]]))
    with pytest.raises(ValueError, match="dimension mismatch"):
        project(P, [1.0, 2.0, 3.0])


# -- ranks and singular values


@pytest.mark.parametrize(
    "M, expected",
    [
        (np.eye(3), 3),
        ([[1.0, 1.0], [1.0, 1.0]], 1),
        ([[1.0, 0.0], [0.0, 1e-12]], 1),
        (np.zeros((2, 2)), 0),
    ],
)
def test_numerical_rank(M, expected):
    assert numerical_rank(M, 1e-8) == expected


@pytest.mark.parametrize(
    "M, expected",
    [(np.diag([3.0, 1.0]), 3.0), (np.zeros((2, 2)), 0.0), ([[0.0, 2.0], [0.0, 0.0]], 2.0)],
)
def test_spectral_norm(M, expected):
    assert spectral_norm(M) == pytest.approx(expected, rel=1e-12)


def test_min_nonzero_singular_examples():
    assert min_nonzero_singular(np.diag([3.0, 1.0])) == pytest.approx(1.0)
    assert min_nonzero_singular(np.diag([5.0, 0.0]), 1e-8) == pytest.approx(5.0)
    assert min_nonzero_singular([[1.0, 1.0], [0.0, 1.0]]) == pytest.approx(
        math.sqrt((3 - math.sqrt(5)) / 2), rel=1e-12
    )


def test_min_nonzero_singular_zero_matrix():
    with pytest.raises(ValueError, match="no nonzero singular value"):
        min_nonzero_singular(np.zeros((2, 2)))


def test_spectral_norm_matches_power_iteration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        M = rng.standard_normal((10, 10))
        v = rng.standard_normal(10)
        for _ in range(5000):
            v = M.T @ (M @ v)
            v /= np.linalg.norm(v)
        assert spectral_norm(M) == pytest.approx(np.linalg.norm(M @ v), rel=1e-8)


# -- projector distance and pivoted selection


def test_projector_distance_against_explicit_matrices():
    rng = np.random.default_rng(0)
    for _ in range(20):
        U = orthonormal_basis(rng.standard_normal((8, 3)))
        W = orthonormal_basis(rng.standard_normal((8, 3)))
        explicit = np.linalg.norm(proj(U) - proj(W), 2)
        assert projector_distance(U, W) == pytest.approx(explicit, abs=1e-12)


def test_projector_distance_unequal_dimensions():
    assert projector_distance(orthonormal_basis(np.eye(3)[:, :1]),
                              orthonormal_basis(np.eye(3)[:, :2])) == 1.0


def test_pivoted_selection_skips_dependent_columns():
    base = orthonormal_basis([[1.0], [0.0], [0.0]])
    V = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 0.0, 0.0]]).T
    # column 0 lies in span(base); columns 1 and 2 are parallel
    assert len(pivoted_independent_columns(base, V, 0.1)) == 1


# -- properties

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 7), st.integers(1, 7)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)
)


@settings(max_examples=150, deadline=None)
@given(matrices)
def test_basis_is_orthonormal(M):
    Q = orthonormal_basis(M).columns
    assert np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1]), 2) <= 1e-10 if Q.size else True


@settings(max_examples=150, deadline=None)
@given(matrices, st.integers(0, 2**32 - 1))
def test_projector_and_complement_sum_to_identity(M, seed):
    b = orthonormal_basis(M)
    P = Projector(b)
    Pc = P.complement()
    v = np.random.default_rng(seed).standard_normal(b.ambient_dim)
    np.testing.assert_allclose(P(v) + Pc(v), v, atol=1e-10 * max(1.0, np.linalg.norm(v)))


@settings(max_examples=150, deadline=None)
@given(matrices, st.integers(0, 2**32 - 1))
def test_projector_idempotent_and_symmetric(M, seed):
    P = Projector(orthonormal_basis(M))
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, P.basis.ambient_dim))
    np.testing.assert_allclose(P(P(v)), P(v), atol=1e-10 * np.linalg.norm(v))
    assert abs(P(u) @ v - u @ P(v)) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)


@settings(max_examples=150, deadline=None)
@given(matrices)
def test_rank_is_transpose_invariant(M):
    assert numerical_rank(M, 1e-8) == numerical_rank(M.T, 1e-8)
