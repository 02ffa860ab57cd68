"""Dense linear-algebra primitives and the seedable random source.

Everything operates on float64 numpy arrays: matrices are 2-D row-major,
vectors are 1-D. The ``as_matrix``/``as_vector`` constructors reject
non-finite entries so downstream code never sees NaN or Inf. All
functions are pure; all returned factor objects are immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DataError,
    DegeneratePlane,
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
    NumericalError,
)

_MASK64 = (1 << 64) - 1

# Symmetry pre-check for cholesky(), relative to the largest entry.
SYMMETRY_TOL = 1e-10
# Reject plane bases when sin(angle between difference vectors) is below this.
COLLINEARITY_TOL = 1e-8

RNG_ALGORITHM = "splitmix64-mix/pcg64-stream"


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Copy ``a`` into a float64 (rows, cols) array, rejecting NaN/Inf."""
    m = np.array(a, dtype=np.float64, order="C")
    if m.ndim != 2:
        raise DataError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Copy ``a`` into a float64 1-D array, rejecting NaN/Inf."""
    v = np.array(a, dtype=np.float64)
    if v.ndim != 1:
        raise DataError(f"{name} must be 1-D, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{name} contains non-finite entries")
    return v


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular L with L @ L.T equal to the factored SPD matrix."""

    lower: np.ndarray

    def __post_init__(self):
        m = self.lower
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError("Cholesky factor must be square")
        if np.any(np.triu(m, k=1) != 0.0):
            raise DataError("Cholesky factor must be lower-triangular")
        if np.any(np.diag(m) <= 0.0):
            raise NotPositiveDefinite("factor diagonal must be strictly positive")
        object.__setattr__(self, "lower", _freeze(np.array(m, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        """L @ L.T, the matrix that was factored."""
        return self.lower @ self.lower.T


def cholesky(m) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix as L @ L.T.

    Raises NotSymmetric when the input is not square/symmetric within
    tolerance, NotPositiveDefinite when factorization fails. The caller
    owns any shrinkage policy; no silent repair happens here.
    """
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"matrix is {a.shape[0]}x{a.shape[1]}, not square")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > SYMMETRY_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    sym = 0.5 * (a + a.T)
    try:
        lower = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if np.any(np.diag(lower) <= 0.0):
        raise NotPositiveDefinite("zero pivot in factorization")
    return CholeskyFactor(lower=lower)


def solve_spd(factor: CholeskyFactor, b) -> np.ndarray:
    """Solve (L @ L.T) x = b via forward then backward triangular solves."""
    v = as_vector(b)
    if v.shape[0] != factor.dim:
        raise DimensionMismatch(f"factor dim {factor.dim} != vector dim {v.shape[0]}")
    y = solve_triangular(factor.lower, v, lower=True, check_finite=False)
    return solve_triangular(factor.lower, y, lower=True, trans="T", check_finite=False)


def whiten(factor: CholeskyFactor, deltas: np.ndarray) -> np.ndarray:
    """L^{-1} @ deltas for a (dim, k) block of column vectors."""
    if deltas.shape[0] != factor.dim:
        raise DimensionMismatch(f"factor dim {factor.dim} != block dim {deltas.shape[0]}")
    return solve_triangular(factor.lower, deltas, lower=True, check_finite=False)


def orthonormal_plane_basis(a, b, c) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis (u1, u2) of the plane through points a, b, c.

    u1 points from a to b; u2 is the component of c - a orthogonal to u1.
    Raises DegeneratePlane when the difference vectors are collinear
    (sine of their angle below COLLINEARITY_TOL) or zero.
    """
    pa = as_vector(a, "a")
    pb = as_vector(b, "b")
    pc = as_vector(c, "c")
    if not (pa.shape == pb.shape == pc.shape):
        raise DimensionMismatch("plane points must share one dimension")
    d1 = pb - pa
    d2 = pc - pa
    n1 = np.linalg.norm(d1)
    n2 = np.linalg.norm(d2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegeneratePlane("two of the three plane points coincide")
    u1 = d1 / n1
    v = d2 - np.dot(d2, u1) * u1
    if np.linalg.norm(v) / n2 < COLLINEARITY_TOL:
        raise DegeneratePlane("difference vectors are collinear")
    v = v - np.dot(v, u1) * u1  # second pass keeps <u1,u2> at roundoff level
    u2 = v / np.linalg.norm(v)
    return u1, u2


def orthonormal_columns(a) -> np.ndarray:
    """Gram-Schmidt orthonormalization of the columns of a (d, k) matrix, k <= d.

    Two projection passes per column; raises NumericalError on (near-)
    dependent columns.
    """
    m = as_matrix(a)
    d, k = m.shape
    if k > d:
        raise DataError(f"cannot orthonormalize {k} columns in dimension {d}")
    q = np.zeros_like(m)
    for j in range(k):
        v = m[:, j].copy()
        norm0 = np.linalg.norm(v)
        for _ in range(2):
            v -= q[:, :j] @ (q[:, :j].T @ v)
        norm = np.linalg.norm(v)
        if norm0 == 0.0 or norm / norm0 < 1e-10:
            raise NumericalError(f"column {j} is linearly dependent on earlier columns")
        q[:, j] = v / norm
    return q


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64, state


def mix_seed(seed: int, index: int) -> int:
    """Pinned seed-mixing function for deriving independent child seeds."""
    if index < 0:
        raise DataError("mix index must be nonnegative")
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngState:
    """Deterministic seedable random source.

    Child seeds are derived with splitmix64 mixing; the sample stream is
    numpy's PCG64, which is reproducible for a fixed seed across runs and
    platforms. Identical seeds yield identical streams.
    """

    seed: int
    algorithm: str = field(default=RNG_ALGORITHM)

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        if self.algorithm != RNG_ALGORITHM:
            raise DataError(f"unsupported rng algorithm {self.algorithm!r}")

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at the start of this stream."""
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "RngState":
        """Derive an independent child stream by pinned seed mixing."""
        return RngState(mix_seed(self.seed, index))

    def bytes(self, n: int) -> bytes:
        """First n bytes of the stream (used by reproducibility checks)."""
        return self.generator().bytes(n)
