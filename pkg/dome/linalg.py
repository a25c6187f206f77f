from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple, Union

import numpy as np

from dome.exceptions import InvalidArgumentError

# dense float64 arrays, (rows, cols) and (dim,)
Matrix = np.ndarray
Vector = np.ndarray

ORTHONORMAL_TOL = 1e-10
RANK_CUTOFF = 1e-12
NORM_FLOOR = 1e-300

_U64 = 2**64


class Stream(IntEnum):
    """Stream ids under one run seed. Every random draw of a run goes through exactly one of them."""

    SKETCH_INIT = 1
    SKETCH_UPDATE = 2
    CLIENT = 3
    SELECTION = 4
    SECAGG_SEEDS = 5
    TASK = 6
    THETA_INIT = 7
    EXPERIMENT = 8
    QR_FALLBACK = 9


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int
    path: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for value in (self.seed, self.stream_id, *self.path):
            if not 0 <= int(value) < _U64:
                raise InvalidArgumentError(f"RNG keys must be 64-bit unsigned integers, got {value}")

    def derive(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(key) for key in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id), *self.path))
        return np.random.Generator(np.random.PCG64(sequence))


Rng = Union[RngStream, np.random.Generator]


def as_generator(rng: Rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise InvalidArgumentError(f"Expected an RngStream or numpy Generator, got {type(rng)}")


def check_finite(name: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return values


def check_vector(name: str, values: np.ndarray, dim: int) -> Vector:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (dim,):
        raise InvalidArgumentError(f"{name} must have shape ({dim},), got {values.shape}")
    return values


def gaussian_matrix(rows: int, cols: int, rng: Rng) -> Matrix:
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"Gaussian matrix needs positive dimensions, got {rows}x{cols}")
    return as_generator(rng).standard_normal((rows, cols))


def _orthogonalize(v: Vector, basis: Matrix) -> Tuple[Vector, Vector]:
    """Two classical Gram-Schmidt passes of v against the columns of basis."""
    coefficients = np.zeros(basis.shape[1])
    for _ in range(2):
        h = basis.T @ v
        v = v - basis @ h
        coefficients += h
    return v, coefficients


def gram_schmidt_qr(x: Matrix, rng: Optional[Rng] = None) -> Tuple[Matrix, Matrix]:
    """
    Thin QR of a d x p matrix (d >= p) with re-orthogonalized Gram-Schmidt.

    A column whose residual falls below RANK_CUTOFF times its original norm is replaced by a
    fresh Gaussian direction orthogonal to the accepted columns and its R column is zeroed,
    so Q always has p orthonormal columns.
    """
    x = check_finite("QR input", x)
    if x.ndim != 2:
        raise InvalidArgumentError(f"QR input must be a matrix, got shape {x.shape}")
    d, p = x.shape
    if not d >= p >= 1:
        raise InvalidArgumentError(f"QR needs d >= p >= 1, got {d}x{p}")

    q = np.zeros((d, p))
    r = np.zeros((p, p))
    fallback = None
    for j in range(p):
        original = np.linalg.norm(x[:, j])
        v, coefficients = _orthogonalize(x[:, j].copy(), q[:, :j])
        residual = np.linalg.norm(v)
        if residual <= RANK_CUTOFF * max(original, NORM_FLOOR):
            if fallback is None:
                fallback = as_generator(rng if rng is not None else RngStream(0, Stream.QR_FALLBACK, (d, p)))
            while True:
                v, _ = _orthogonalize(fallback.standard_normal(d), q[:, :j])
                residual = np.linalg.norm(v)
                if residual > RANK_CUTOFF:
                    break
            q[:, j] = v / residual
            continue
        r[:j, j] = coefficients
        r[j, j] = residual
        q[:, j] = v / residual
    return q, r


def project_complement(u: Matrix, omega: Matrix) -> Matrix:
    """(I - U U^T) Omega for U with orthonormal columns."""
    u = np.asarray(u, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if u.ndim != 2 or omega.ndim != 2 or u.shape[0] != omega.shape[0]:
        raise InvalidArgumentError(f"Cannot project {omega.shape} against a basis of shape {u.shape}")
    if u.shape[1] == 0:
        return omega.copy()
    return omega - u @ (u.T @ omega)


def diag_of_gram(s: Matrix) -> Vector:
    """Diagonal of S S^T, i.e. squared row norms, without forming the d x d product."""
    s = np.asarray(s, dtype=np.float64)
    return np.sum(s * s, axis=1)


def orthonormality_error(s: Matrix) -> float:
    return float(np.max(np.abs(s.T @ s - np.eye(s.shape[1]))))
