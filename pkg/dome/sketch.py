from dataclasses import dataclass, field

import numpy as np
from dbt.events import AdapterLogger

from dome.exceptions import InvalidArgumentError
from dome.linalg import (
    Matrix,
    Rng,
    RngStream,
    Vector,
    as_generator,
    check_finite,
    check_vector,
    gaussian_matrix,
    gram_schmidt_qr,
    orthonormality_error,
    project_complement,
)

logger = AdapterLogger("Dome")

SKETCH_ORTHONORMAL_TOL = 1e-8


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class SketchState:
    """
    Orthonormal sketch S (d x k) together with the running spectral state (U, lambda)
    of the gradient history. `retained` is the number of leading columns of S taken
    from U at the last update, the remaining columns are random exploration directions.
    """

    s: Matrix
    u: Matrix
    lam: Vector
    q: float
    t: int = 0
    retained: int = 0
    d: int = field(init=False)
    k: int = field(init=False)

    def __post_init__(self) -> None:
        s = check_finite("sketch S", self.s)
        if s.ndim != 2:
            raise InvalidArgumentError(f"Sketch must be a matrix, got shape {s.shape}")
        d, k = s.shape
        if not 1 <= k <= d:
            raise InvalidArgumentError(f"Sketch width must satisfy 1 <= k <= d, got k={k}, d={d}")
        if not 0.0 < self.q <= 1.0:
            raise InvalidArgumentError(f"Energy ratio q must be in (0, 1], got {self.q}")
        u = check_finite("sketch U", self.u)
        if u.shape != (d, k):
            raise InvalidArgumentError(f"U must have shape {(d, k)}, got {u.shape}")
        lam = check_vector("sketch lambda", check_finite("sketch lambda", self.lam), k)
        if np.any(lam < 0):
            raise InvalidArgumentError("Sketch singular values must be nonnegative")
        if orthonormality_error(s) > SKETCH_ORTHONORMAL_TOL:
            raise InvalidArgumentError("Sketch columns are not orthonormal")
        object.__setattr__(self, "s", _frozen(s))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "k", k)

    @property
    def retained_columns(self) -> Matrix:
        return self.s[:, : self.retained]


@dataclass(frozen=True, eq=False)
class SketchedGradient:
    coords: Vector


def init_sketch(d: int, k: int, q: float, rng: Rng) -> SketchState:
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"Sketch width must satisfy 1 <= k <= d, got k={k}, d={d}")
    generator = as_generator(rng)
    s, _ = gram_schmidt_qr(gaussian_matrix(d, k, generator), generator)
    return SketchState(s=s, u=np.zeros((d, k)), lam=np.zeros(k), q=q)


def identity_sketch(d: int) -> SketchState:
    """Fixed S = I_d, used by the full-dimension baseline."""
    return SketchState(s=np.eye(d), u=np.zeros((d, d)), lam=np.zeros(d), q=1.0, retained=d)


def remove_mean(g: Vector, m_hat: Vector) -> Vector:
    g = np.asarray(g, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if g.shape != m_hat.shape:
        raise InvalidArgumentError(f"Cannot remove a mean of shape {m_hat.shape} from a gradient of shape {g.shape}")
    return g - m_hat


def project(state: SketchState, g_bar: Vector) -> SketchedGradient:
    g_bar = check_vector("gradient", g_bar, state.d)
    return SketchedGradient(coords=state.s.T @ g_bar)


def lift(state: SketchState, g_prec: Vector, m_hat: Vector) -> Vector:
    g_prec = check_vector("sketched gradient", g_prec, state.k)
    m_hat = check_vector("running mean", m_hat, state.d)
    return state.s @ g_prec + m_hat


def retained_count(lam: Vector, q: float) -> int:
    """
    Smallest r whose leading squared singular values hold a fraction q of the total energy.
    Expects lam sorted in descending order. Returns 0 when there is no energy at all and k
    when q = 1.
    """
    energy = np.cumsum(lam * lam)
    total = energy[-1]
    if total == 0.0:
        return 0
    if q >= 1.0:
        return len(lam)
    return min(int(np.searchsorted(energy, q * total, side="left")) + 1, len(lam))


def _draw_exploration(kept: Matrix, d: int, width: int, rng: RngStream) -> Matrix:
    omega = gaussian_matrix(d, width, rng.derive(0))
    # twice, so roundoff from the first pass does not leak back into span(kept)
    perp = project_complement(kept, project_complement(kept, omega))
    columns, _ = gram_schmidt_qr(perp, rng.derive(1))
    return columns


def update_sketch(state: SketchState, g_hat: Vector, rng: RngStream) -> SketchState:
    """
    Streaming history-PCA update of (U, lambda) followed by energy-ratio truncation and
    fresh orthogonal random columns for the part of S that is not retained.
    """
    g_hat = check_finite("lifted gradient", check_vector("lifted gradient", g_hat, state.d))
    d, k = state.d, state.k
    qr_rng = rng.derive(2)

    if state.t == 0:
        y = np.outer(g_hat, g_hat @ state.s)
        u_new, r = gram_schmidt_qr(y, qr_rng)
        lam_new = np.sqrt(np.sum(r * r, axis=0))
    elif not np.any(g_hat):
        logger.debug(f"Zero gradient at sketch step {state.t}, keeping the spectral state")
        u_new, lam_new = np.array(state.u), np.array(state.lam)
    else:
        order = np.argsort(-state.lam, kind="stable")
        u, lam = state.u[:, order], state.lam[order]
        y = u * lam + np.outer(g_hat, g_hat @ u)
        u_new, r = gram_schmidt_qr(y, qr_rng)
        lam_new = np.sqrt(np.sum(r * r, axis=0))

    order = np.argsort(-lam_new, kind="stable")
    u_new, lam_new = u_new[:, order], lam_new[order]

    retained = retained_count(lam_new, state.q)
    if retained == 0:
        logger.debug("Gradient history carries no energy, drawing a fully random sketch")
        s, _ = gram_schmidt_qr(gaussian_matrix(d, k, rng.derive(3)), rng.derive(4))
    elif retained == k:
        s = u_new
    else:
        kept = u_new[:, :retained]
        s = np.hstack([kept, _draw_exploration(kept, d, k - retained, rng)])

    return SketchState(s=s, u=u_new, lam=lam_new, q=state.q, t=state.t + 1, retained=retained)
