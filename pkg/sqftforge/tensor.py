"""Dense numerics shared by every other module.

Matrices are plain 2-D numpy arrays. Working precision is float64;
checkpoints store float32. Activations are column samples throughout the
project: a layer computes Y = W·X with X of shape (in_dim, batch)."""

from typing import Sequence, Union

import numpy as np

from .errors import DataError, ShapeError

Matrix = np.ndarray

WORKING_DTYPE = np.float64
CHECKPOINT_DTYPE = np.float32


def as_matrix(data: Union[Matrix, Sequence], dtype=WORKING_DTYPE) -> Matrix:
    matrix = np.array(data, dtype=dtype)
    if matrix.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {matrix.shape}")
    return ensure_finite(matrix)


def ensure_finite(matrix: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{what} contains NaN or Inf")
    return matrix


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return ensure_finite(a @ b)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    check_same_shape(a, b)
    return ensure_finite(a * b)


def col_l2_norms(x: Matrix) -> np.ndarray:
    if x.ndim != 2 or x.size == 0:
        raise ShapeError(f"expected a nonempty matrix, got shape {x.shape}")
    return ensure_finite(np.sqrt(np.einsum('ij,ij->j', x, x)))


def frobenius_sq(a: Matrix) -> float:
    return float(ensure_finite(np.asarray(np.sum(np.square(a)))))


def frozen(matrix: np.ndarray) -> np.ndarray:
    """Read-only copy; writes through it raise ValueError."""
    matrix = np.array(matrix, copy=True)
    matrix.flags.writeable = False
    return matrix


class Rng:
    """Seeded PCG64 generator with labelled stream derivation.

    Streams are derived through numpy's SeedSequence spawn keys, so
    Rng(seed).derive('train') always yields the same stream on every
    platform, independent of what has been drawn from the parent."""

    def __init__(self, seed: int = 0, *labels: Union[str, int]):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(labels)
        spawn_key = tuple(_label_key(label) for label in labels)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=spawn_key))
        )

    def derive(self, *labels: Union[str, int]) -> 'Rng':
        return Rng(self.seed, *self.labels, *labels)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, population: Sequence, size: int, replace: bool = False) -> list:
        indices = self.generator.choice(len(population), size=size, replace=replace)
        return [population[int(i)] for i in indices]

    def __repr__(self):
        return f"Rng({', '.join(map(repr, (self.seed, *self.labels)))})"


def _label_key(label: Union[str, int]) -> int:
    if isinstance(label, int):
        return label
    return int.from_bytes(label.encode('UTF-8'), 'little')


__all__ = (
    'CHECKPOINT_DTYPE',
    'Matrix',
    'Rng',
    'WORKING_DTYPE',
    'as_matrix',
    'check_same_shape',
    'col_l2_norms',
    'ensure_finite',
    'frobenius_sq',
    'frozen',
    'hadamard',
    'matmul',
)
