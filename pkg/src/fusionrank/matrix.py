"""Minimal dense-matrix kernel: float64 arrays, shape-checked ops, seeded RNG.

Matrices are plain ``numpy.ndarray`` values (row-major float64, 2-D unless a
function says otherwise). Every exported operation validates shapes and
guarantees finite output, so downstream modules never have to re-check.

Randomness comes from :class:`SeededRng`, a thin wrapper over numpy's PCG64
generator: the same seed yields the same stream on every platform for a
given numpy version.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeMismatchError

Mat = np.ndarray


def as_float64(a, name: str = "matrix") -> Mat:
    """Coerce to a float64 ndarray, rejecting non-finite entries."""
    out = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ShapeMismatchError(f"{name} contains NaN or Inf entries")
    return out


def check_matrix(a, name: str = "matrix") -> Mat:
    """Validate a 2-D finite float64 matrix."""
    out = as_float64(a, name)
    if out.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def check_vector(a, name: str = "vector") -> Mat:
    """Validate a 1-D finite float64 vector."""
    out = as_float64(a, name)
    if out.ndim != 1:
        raise ShapeMismatchError(f"{name} must be 1-D, got shape {out.shape}")
    return out


def matmul(a: Mat, b: Mat) -> Mat:
    """Matrix product a @ b; ``b`` may be 1-D (treated as a column)."""
    a = as_float64(a, "matmul lhs")
    b = as_float64(b, "matmul rhs")
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeMismatchError(
            f"matmul expects 2-D lhs and 1-D/2-D rhs, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    return a @ b


def elem_mul(a: Mat, b: Mat) -> Mat:
    """Elementwise (Hadamard) product of two identically shaped arrays."""
    a = as_float64(a, "elem_mul lhs")
    b = as_float64(b, "elem_mul rhs")
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"elem_mul shapes differ: {a.shape} vs {b.shape}"
        )
    return a * b


def sigmoid(x):
    """Logistic function, stable over the full float64 range.

    Uses the branch-free tanh identity sigma(x) = (1 + tanh(x/2)) / 2, which
    never overflows; accepts scalars or arrays and preserves shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ShapeMismatchError("sigmoid input contains NaN or Inf")
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    if out.ndim == 0:
        return float(out)
    return out


class SeededRng:
    """Deterministic random stream (PCG64) with an explicit integer seed.

    Identical seeds produce identical streams; every consumer of randomness
    in the package draws from one of these, never from global state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, rows: int, cols: int, scale: float) -> Mat:
        """Matrix with i.i.d. entries uniform on [-scale, +scale]."""
        if scale <= 0:
            raise ConfigError(f"uniform scale must be positive, got {scale}")
        if rows <= 0 or cols <= 0:
            raise ConfigError(f"matrix dims must be positive, got {rows}x{cols}")
        return self._gen.uniform(-scale, scale, size=(rows, cols))

    def normal(self, shape: tuple[int, ...]) -> Mat:
        """Standard normal draws of the given shape."""
        return self._gen.standard_normal(size=shape)

    def shuffled(self, n: int) -> np.ndarray:
        """A random permutation of range(n)."""
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        """Sample ``size`` indices from range(n)."""
        return self._gen.choice(n, size=size, replace=replace)


def rand_uniform(rng: SeededRng, rows: int, cols: int, scale: float) -> Mat:
    """Seeded uniform init on [-scale, +scale]; see :meth:`SeededRng.uniform`."""
    return rng.uniform(rows, cols, scale)
