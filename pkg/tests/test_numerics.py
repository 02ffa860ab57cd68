import subprocess
import sys

import numpy as np
import pytest

from nearood.errors import (
    DataError,
    DegeneratePlane,
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
    NumericalError,
)
from nearood.numerics import (
    CholeskyFactor,
    RngState,
    as_matrix,
    as_vector,
    cholesky,
    mix_seed,
    orthonormal_columns,
    orthonormal_plane_basis,
    solve_spd,
)


def random_spd(rng, n, jitter=1.0):
    a = rng.normal(size=(n, n))
    return a.T @ a + jitter * np.eye(n)


class TestConstructors:
    def test_rejects_nan(self):
        with pytest.raises(DataError):
            as_matrix([[1.0, np.nan]])
        with pytest.raises(DataError):
            as_vector([np.inf])

    def test_rejects_wrong_ndim(self):
        with pytest.raises(DataError):
            as_matrix([1.0, 2.0])
        with pytest.raises(DataError):
            as_vector([[1.0]])


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(3))
        assert np.array_equal(f.lower, np.eye(3))

    def test_diagonal(self):
        f = cholesky([[4.0, 0.0], [0.0, 9.0]])
        assert np.array_equal(f.lower, [[2.0, 0.0], [0.0, 3.0]])

    def test_random_spd_reconstructs(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(20, 20))
        m = a.T @ a + np.eye(20)
        f = cholesky(m)
        assert np.max(np.abs(f.reconstruct() - m)) < 1e-9

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_zero_matrix_fails(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.zeros((3, 3)))

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            cholesky([[1.0, 0.5], [0.0, 1.0]])

    def test_not_square(self):
        with pytest.raises(NotSymmetric):
            cholesky(np.ones((2, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        m = random_spd(rng, n, jitter=1e-3)
        f = cholesky(m)
        scale = np.max(np.abs(m))
        assert np.max(np.abs(f.reconstruct() - m)) < 1e-8 * scale

    def test_factor_requires_positive_diagonal(self):
        with pytest.raises(NotPositiveDefinite):
            CholeskyFactor(lower=np.array([[1.0, 0.0], [0.5, 0.0]]))


class TestSolveSpd:
    def test_identity_factor(self):
        f = cholesky(np.eye(3))
        assert np.array_equal(solve_spd(f, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_diagonal_solve(self):
        f = cholesky([[4.0, 0.0], [0.0, 9.0]])
        assert np.allclose(solve_spd(f, [8.0, 9.0]), [2.0, 1.0], atol=0, rtol=1e-15)

    def test_random_residual(self):
        rng = np.random.default_rng(1)
        m = random_spd(rng, 10)
        b = rng.normal(size=10)
        x = solve_spd(cholesky(m), b)
        assert np.max(np.abs(m @ x - b)) < 1e-9

    def test_dimension_mismatch(self):
        f = cholesky(np.eye(3))
        with pytest.raises(DimensionMismatch):
            solve_spd(f, [1.0, 2.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(2, 16))
        m = random_spd(rng, n)
        x = rng.normal(size=n)
        assert np.max(np.abs(solve_spd(cholesky(m), m @ x) - x)) < 1e-8


class TestPlaneBasis:
    def test_axis_aligned(self):
        u1, u2 = orthonormal_plane_basis([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0])
        assert np.allclose(u1, [1.0, 0.0, 0.0])
        assert np.allclose(u2, [0.0, 1.0, 0.0])

    def test_coincident_points_degenerate(self):
        with pytest.raises(DegeneratePlane):
            orthonormal_plane_basis([1.0, 1.0], [1.0, 1.0], [2.0, 2.0])

    def test_collinear_degenerate(self):
        with pytest.raises(DegeneratePlane):
            orthonormal_plane_basis([0.0, 0.0], [1.0, 1.0], [2.0, 2.0])

    def test_random_gram_matrix(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.normal(size=(3, 64))
        u1, u2 = orthonormal_plane_basis(a, b, c)
        gram = np.array([[u1 @ u1, u1 @ u2], [u2 @ u1, u2 @ u2]])
        assert np.max(np.abs(gram - np.eye(2))) < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_orthonormality_property(self, seed):
        rng = np.random.default_rng(200 + seed)
        dim = int(rng.integers(2, 40))
        a, b, c = rng.normal(size=(3, dim))
        u1, u2 = orthonormal_plane_basis(a, b, c)
        assert abs(np.linalg.norm(u1) - 1.0) < 1e-10
        assert abs(np.linalg.norm(u2) - 1.0) < 1e-10
        assert abs(u1 @ u2) < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            orthonormal_plane_basis([0.0, 0.0], [1.0, 0.0], [0.0, 1.0, 0.0])


class TestOrthonormalColumns:
    def test_orthonormal_output(self):
        rng = np.random.default_rng(3)
        q = orthonormal_columns(rng.normal(size=(12, 5)))
        assert np.max(np.abs(q.T @ q - np.eye(5))) < 1e-12

    def test_dependent_columns_rejected(self):
        a = np.ones((4, 2))
        with pytest.raises(NumericalError):
            orthonormal_columns(a)

    def test_too_many_columns(self):
        with pytest.raises(DataError):
            orthonormal_columns(np.ones((2, 3)))


class TestRngState:
    def test_same_seed_same_stream(self):
        assert RngState(42).bytes(64) == RngState(42).bytes(64)

    def test_different_seeds_differ(self):
        assert RngState(1).bytes(64) != RngState(2).bytes(64)

    def test_children_are_deterministic_and_distinct(self):
        root = RngState(7)
        assert root.child(0).seed == root.child(0).seed
        assert root.child(0).seed != root.child(1).seed
        assert root.child(0).bytes(32) != root.bytes(32)

    def test_mix_seed_is_pure(self):
        assert mix_seed(123, 4) == mix_seed(123, 4)
        assert mix_seed(123, 4) != mix_seed(123, 5)
        with pytest.raises(DataError):
            mix_seed(1, -1)

    def test_stream_identical_across_processes(self):
        # Byte-identical streams must reproduce in a fresh interpreter.
        snippet = (
            "from nearood.numerics import RngState;"
            "import sys; sys.stdout.write(RngState(987654321).bytes(256).hex())"
        )
        outs = [
            subprocess.run(
                [sys.executable, "-c", snippet], capture_output=True, text=True, check=True
            ).stdout
            for _ in range(2)
        ]
        assert outs[0] == outs[1]
        assert outs[0] == RngState(987654321).bytes(256).hex()
