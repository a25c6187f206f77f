import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional

import numpy as np
from dbt.events import AdapterLogger

from dome.exceptions import BudgetViolationError, InvalidArgumentError
from dome.linalg import Rng, Vector, as_generator

logger = AdapterLogger("Dome")


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise InvalidArgumentError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class NoiseCalibration:
    """
    Noise multiplier sigma and clip bound C for a run of `rounds_total` communication rounds
    with `batch_size` clients each. Every client adds N(0, a^2) noise per coordinate, so the
    aggregate of a full round carries variance rounds_total * sigma^2 * C^2.
    """

    sigma: float
    clip: float
    rounds_total: int
    batch_size: int

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise InvalidArgumentError(f"Noise multiplier must be nonnegative, got {self.sigma}")
        if not self.clip > 0:
            raise InvalidArgumentError(f"Clip bound must be positive, got {self.clip}")
        if self.rounds_total < 1 or self.batch_size < 1:
            raise InvalidArgumentError(
                f"rounds_total and batch_size must be positive, got {self.rounds_total} and {self.batch_size}"
            )
        if self.sigma > 0 and math.isinf(self.clip):
            raise InvalidArgumentError("A noisy run needs a finite clip bound")

    @property
    def per_client_variance(self) -> float:
        if self.sigma == 0:
            return 0.0
        return (self.rounds_total / self.batch_size) * self.sigma**2 * self.clip**2

    def round_variance(self, participants: int) -> float:
        """
        Per-client variance for a round with `participants` clients. A short tail round scales
        it by B / B' so the aggregate noise stays at the level the accountant charges.
        """
        if participants < 1 or participants > self.batch_size:
            raise InvalidArgumentError(f"A round has between 1 and {self.batch_size} clients, got {participants}")
        if participants == self.batch_size:
            return self.per_client_variance
        return self.per_client_variance * self.batch_size / participants


@dataclass(frozen=True)
class PrivacyAccountant:
    rho_per_round: float
    rounds_recorded: int = 0

    @property
    def rho_spent(self) -> float:
        if self.rounds_recorded == 0:
            return 0.0
        return self.rounds_recorded * self.rho_per_round


@dataclass(frozen=True)
class PrivacyReport:
    sigma: float
    rho_per_round: float
    rho_spent: float
    epsilon_prime: float
    epsilon: float
    delta: float
    rounds_total: int
    rounds_recorded: int
    per_client_variance: float
    private: bool

    @property
    def sound(self) -> bool:
        return not self.private or self.epsilon_prime <= self.epsilon

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma": self.sigma,
            "rho_per_round": self.rho_per_round,
            "rho_spent": self.rho_spent,
            "epsilon_prime": self.epsilon_prime,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "rounds_total": self.rounds_total,
            "rounds_recorded": self.rounds_recorded,
            "per_client_variance_a2": self.per_client_variance,
            "private": self.private,
        }


def calibrate_sigma(budget: PrivacyBudget) -> float:
    return max(1 / math.sqrt(budget.epsilon), 2 * math.sqrt(2) / budget.epsilon * math.sqrt(math.log(1 / budget.delta)))


def calibrate(
    budget: PrivacyBudget, clip: float, rounds_total: int, batch_size: int, sigma: Optional[float] = None
) -> NoiseCalibration:
    if sigma is None:
        sigma = calibrate_sigma(budget)
    else:
        logger.warning(f"Noise multiplier fixed to {sigma}, the run is not calibrated to the privacy budget")
    return NoiseCalibration(sigma=sigma, clip=clip, rounds_total=rounds_total, batch_size=batch_size)


def clip(s: Vector, bound: float) -> Vector:
    """Rescale s to l2 norm at most `bound`. Clipping an already clipped vector returns it unchanged."""
    if not bound > 0:
        raise InvalidArgumentError(f"Clip bound must be positive, got {bound}")
    s = np.asarray(s, dtype=np.float64)
    norm = np.linalg.norm(s)
    if norm <= bound:
        return s
    factor = bound / norm
    clipped = s * factor
    while np.linalg.norm(clipped) > bound:
        factor = np.nextafter(factor, 0.0)
        clipped = s * factor
    return clipped


def gaussian_noise(variance: float, dim: int, rng: Rng) -> Vector:
    if variance == 0:
        return np.zeros(dim)
    return as_generator(rng).normal(0.0, math.sqrt(variance), size=dim)


def per_client_noise(calib: NoiseCalibration, dim: int, rng: Rng, participants: Optional[int] = None) -> Vector:
    variance = calib.per_client_variance if participants is None else calib.round_variance(participants)
    return gaussian_noise(variance, dim, rng)


def rho_per_round(calib: NoiseCalibration) -> float:
    """zCDP of one round: Gaussian mechanism with sensitivity C and aggregate variance rounds_total * sigma^2 * C^2."""
    if calib.sigma == 0:
        return math.inf
    return 1 / (2 * calib.rounds_total * calib.sigma**2)


def record_round(acct: PrivacyAccountant) -> PrivacyAccountant:
    return replace(acct, rounds_recorded=acct.rounds_recorded + 1)


def zcdp_to_dp(rho: float, delta: float) -> float:
    if rho < 0:
        raise InvalidArgumentError(f"rho must be nonnegative, got {rho}")
    if not 0 < delta < 1:
        raise InvalidArgumentError(f"delta must be in (0, 1), got {delta}")
    return rho + 2 * math.sqrt(rho * math.log(1 / delta))


def privacy_report(calib: NoiseCalibration, acct: PrivacyAccountant, budget: PrivacyBudget) -> PrivacyReport:
    return PrivacyReport(
        sigma=calib.sigma,
        rho_per_round=acct.rho_per_round,
        rho_spent=acct.rho_spent,
        epsilon_prime=zcdp_to_dp(acct.rho_spent, budget.delta),
        epsilon=budget.epsilon,
        delta=budget.delta,
        rounds_total=calib.rounds_total,
        rounds_recorded=acct.rounds_recorded,
        per_client_variance=calib.per_client_variance,
        private=calib.sigma > 0,
    )


def check_budget(report: PrivacyReport) -> None:
    if not report.private:
        logger.warning("Run without noise, no privacy guarantee to check")
        return
    if not report.sound:
        raise BudgetViolationError(
            f"Spent budget epsilon'={report.epsilon_prime} exceeds the target epsilon={report.epsilon} "
            f"after {report.rounds_recorded} rounds"
        )
    logger.info(f"Privacy budget holds: epsilon'={report.epsilon_prime:.6f} <= epsilon={report.epsilon}")
