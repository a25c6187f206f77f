"""
Reference computations the experiments and tests compare against. Nothing in here goes
through the sketch, optimizer or the Gram-Schmidt QR used by the protocol.
"""
from typing import Tuple

import numpy as np
from dbt.events import AdapterLogger
from scipy.linalg import subspace_angles

from dome.exceptions import InvalidArgumentError
from dome.linalg import Matrix, Vector

logger = AdapterLogger("Dome")

OFF_DIAGONAL_TOL = 1e-12
MAX_QR_ITERATIONS = 20000


def brute_force_svd(
    g: Matrix, tol: float = OFF_DIAGONAL_TOL, max_iter: int = MAX_QR_ITERATIONS
) -> Tuple[Matrix, Vector]:
    """
    Left singular vectors and singular values of a d x n matrix, by unshifted QR iteration on
    G G^T until the off-diagonal mass falls below `tol` relative to the whole matrix. Singular
    values are the norms of U^T G, which keeps them accurate down to roundoff of G itself.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise InvalidArgumentError(f"Expected a nonempty matrix, got shape {g.shape}")
    a = g @ g.T
    d = a.shape[0]
    u = np.eye(d)
    scale = np.linalg.norm(a)
    if scale == 0:
        return u, np.zeros(d)

    for _ in range(max_iter):
        off_diagonal = np.linalg.norm(a - np.diag(np.diag(a)))
        if off_diagonal <= tol * scale:
            break
        q, r = np.linalg.qr(a)
        a = r @ q
        u = u @ q
    else:
        logger.warning(f"QR iteration stopped after {max_iter} iterations short of the {tol} tolerance")

    values = np.linalg.norm(u.T @ g, axis=1)
    order = np.argsort(-values, kind="stable")
    return u[:, order], values[order]


def largest_principal_angle(a: Matrix, b: Matrix) -> float:
    """Largest principal angle, in radians, between span(a) and span(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(f"Cannot compare subspaces of shapes {a.shape} and {b.shape}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise InvalidArgumentError("Principal angles need nonempty subspaces")
    return float(np.max(subspace_angles(a, b)))


def numerical_rank(values: Vector, rel_tol: float) -> int:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or values[0] == 0:
        return 0
    return int(np.sum(values > rel_tol * values[0]))


def central_difference(f, theta: Vector, h: float = 1e-6) -> Vector:
    """Gradient of a scalar function by central differences."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = h
        out[i] = (f(theta + step) - f(theta - step)) / (2 * h)
    return out
