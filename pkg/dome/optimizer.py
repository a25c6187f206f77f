from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from dbt.dataclass_schema import StrEnum

from dome.exceptions import InvalidArgumentError
from dome.linalg import Vector, check_vector


class DebiasVariant(StrEnum):
    # per-coordinate noise variance of the averaged aggregate
    averaged = "averaged"
    # per-client variance a^2 as written in the algorithm listing
    literal = "literal"


def _zeros_like(d: int) -> Vector:
    return np.zeros(d)


@dataclass(frozen=True, eq=False)
class AdamState:
    """
    Raw and bias-corrected Adam moments. The second moment is fed the debiased increment
    g_hat^2 - noise_variance * diag(S S^T), clamped at zero.
    """

    d: int
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    gamma_floor: float = 1e-8
    step: int = 0
    m_raw: Vector = field(default=None)
    v_raw: Vector = field(default=None)
    m_hat: Vector = field(default=None)
    v_hat: Vector = field(default=None)

    def __post_init__(self) -> None:
        if self.d < 1:
            raise InvalidArgumentError(f"Parameter dimension must be positive, got {self.d}")
        if not self.eta > 0:
            raise InvalidArgumentError(f"Learning rate must be positive, got {self.eta}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1), got {beta}")
        if not self.gamma_floor > 0:
            raise InvalidArgumentError(f"gamma_floor must be positive, got {self.gamma_floor}")
        for name in ("m_raw", "v_raw", "m_hat", "v_hat"):
            value = getattr(self, name)
            value = _zeros_like(self.d) if value is None else check_vector(name, value, self.d)
            object.__setattr__(self, name, value)


def init_adam(d: int, eta: float, beta1: float = 0.9, beta2: float = 0.999, gamma_floor: float = 1e-8) -> AdamState:
    return AdamState(d=d, eta=eta, beta1=beta1, beta2=beta2, gamma_floor=gamma_floor)


def update_first_moment(state: AdamState, g_hat: Vector) -> AdamState:
    g_hat = check_vector("gradient", g_hat, state.d)
    step = state.step + 1
    m_raw = state.beta1 * state.m_raw + (1 - state.beta1) * g_hat
    return replace(state, step=step, m_raw=m_raw, m_hat=m_raw / (1 - state.beta1**step))


def debias_increment(g_hat: Vector, noise_variance: float, gram_diag: Vector, clamp: bool = True) -> Vector:
    """g_hat^2 minus the injected noise energy on each coordinate."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    increment = g_hat * g_hat - noise_variance * np.asarray(gram_diag, dtype=np.float64)
    if clamp:
        return np.maximum(increment, 0.0)
    return increment


def update_second_moment_debiased(state: AdamState, g_hat: Vector, a2: float, gram_diag: Vector) -> AdamState:
    """
    Second-moment update for the step opened by `update_first_moment`. `a2` is the noise variance
    actually present in each coordinate of g_hat's sketch coordinates and `gram_diag` the diagonal
    of S S^T for the sketch that carried this round's gradients.
    """
    if state.step < 1:
        raise InvalidArgumentError("Update the first moment before the second one")
    if a2 < 0:
        raise InvalidArgumentError(f"Noise variance must be nonnegative, got {a2}")
    g_hat = check_vector("gradient", g_hat, state.d)
    gram_diag = check_vector("sketch gram diagonal", gram_diag, state.d)
    v_raw = state.beta2 * state.v_raw + (1 - state.beta2) * debias_increment(g_hat, a2, gram_diag)
    return replace(state, v_raw=v_raw, v_hat=v_raw / (1 - state.beta2**state.step))


def apply_step(theta: Vector, state: AdamState) -> Vector:
    if state.step < 1:
        raise InvalidArgumentError("No moment estimates yet, call update_first_moment first")
    theta = check_vector("theta", theta, state.d)
    return theta - state.eta * state.m_hat / np.sqrt(np.maximum(state.v_hat, state.gamma_floor))


def adam_step(
    theta: Vector, state: AdamState, g_hat: Vector, a2: float, gram_diag: Vector
) -> Tuple[Vector, AdamState]:
    state = update_first_moment(state, g_hat)
    state = update_second_moment_debiased(state, g_hat, a2, gram_diag)
    return apply_step(theta, state), state


def debias_variance(round_variance: float, participants: int, variant: DebiasVariant) -> float:
    """
    Per-coordinate noise variance to subtract from g_hat^2. `round_variance` is the per-client
    variance of this round, `participants` the number of shares averaged into g_hat.
    """
    if participants < 1:
        raise InvalidArgumentError(f"A round has at least one participant, got {participants}")
    if variant == DebiasVariant.literal:
        return round_variance
    return round_variance / participants
