import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dbt.dataclass_schema import StrEnum
from dbt.events import AdapterLogger

from dome.exceptions import ToleranceFailure
from dome.linalg import RngStream, Vector, gaussian_matrix, gram_schmidt_qr, orthonormality_error
from dome.oracles import brute_force_svd, largest_principal_angle
from dome.secagg import (
    FixedPointParams,
    PairSeeds,
    decode,
    encode,
    make_masks,
    modular_sum,
    provision_pair_seeds,
)
from dome.sketch import init_sketch, update_sketch

logger = AdapterLogger("Dome")

# standard errors allowed on top of the relative tolerance of a Monte-Carlo mean
STAT_SIGMAS = 4.0
EXACT_TOL = 1e-10
NOISE_CHECK_DIM = 16


class Comparison(StrEnum):
    close = "close"
    at_most = "at_most"


@dataclass(frozen=True)
class Check:
    quantity: str
    measured: float
    expected: float
    tolerance: float
    provenance: str
    comparison: Comparison = Comparison.close
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "measured", float(self.measured))
        object.__setattr__(self, "expected", float(self.expected))
        object.__setattr__(self, "tolerance", float(self.tolerance))
        if self.comparison == Comparison.at_most:
            passed = self.measured <= self.expected + self.tolerance
        else:
            passed = abs(self.measured - self.expected) <= self.tolerance
        object.__setattr__(self, "passed", bool(passed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quantity": self.quantity,
            "measured": self.measured,
            "expected": self.expected,
            "tolerance": self.tolerance,
            "comparison": str(self.comparison.value),
            "provenance": self.provenance,
            "passed": self.passed,
        }


@dataclass
class ExperimentReport:
    name: str
    parameters: Dict[str, Any]
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[Check]:
        return [check for check in self.checks if not check.passed]

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        if not check.passed:
            logger.debug(
                f"{self.name}: {check.quantity}={check.measured:.6g} misses "
                f"{check.expected:.6g} +/- {check.tolerance:.3g}"
            )
        return check

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "parameters": self.parameters,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
        }

    def raise_for_failures(self) -> None:
        if self.failures:
            names = ", ".join(check.quantity for check in self.failures)
            raise ToleranceFailure(f"{self.name} failed: {names}")


def _batches(trials: int, batch_trials: int):
    for index, start in enumerate(range(0, trials, batch_trials)):
        yield index, min(batch_trials, trials - start)


def lemma1_experiment(
    d: int,
    k: int,
    sigma: float,
    trials: int,
    rng: RngStream,
    batch_trials: int = 1000,
    rel_tol: float = 0.03,
    ratio_tol: float = 0.06,
) -> ExperimentReport:
    """
    Noise on the full gradient vs noise on its coordinates in a k-dimensional basis that holds
    the gradient. Expected mean squared errors are sigma^2 d and sigma^2 k.
    """
    report = ExperimentReport(
        name="lemma1", parameters={"d": d, "k": k, "sigma": sigma, "trials": trials, "seed": rng.seed}
    )
    p, _ = gram_schmidt_qr(gaussian_matrix(d, k, rng.derive(0)), rng.derive(0, 1))
    full_sum = 0.0
    sketch_sum = 0.0
    for index, n in _batches(trials, batch_trials):
        generator = rng.derive(1, index).generator()
        coefficients = generator.standard_normal((n, k))
        coefficients /= np.linalg.norm(coefficients, axis=1, keepdims=True)
        g = coefficients @ p.T
        noisy_full = g + sigma * generator.standard_normal((n, d))
        noisy_sketch = (g @ p + sigma * generator.standard_normal((n, k))) @ p.T
        full_sum += float(np.sum((noisy_full - g) ** 2))
        sketch_sum += float(np.sum((noisy_sketch - g) ** 2))
    mse_full = full_sum / trials
    mse_sketch = sketch_sum / trials

    expected_full = sigma**2 * d
    expected_sketch = sigma**2 * k
    if sigma == 0:
        report.add(Check("mse_full", mse_full, 0.0, EXACT_TOL, "no noise"))
        report.add(Check("mse_sketch", mse_sketch, 0.0, EXACT_TOL, "no noise"))
        return report

    report.add(Check("mse_full", mse_full, expected_full, rel_tol * expected_full, "E1 = sigma^2 d"))
    report.add(Check("mse_sketch", mse_sketch, expected_sketch, rel_tol * expected_sketch, "E2 = sigma^2 k"))
    report.add(Check("mse_ratio", mse_full / mse_sketch, d / k, ratio_tol * d / k, "E1 / E2 = d / k"))
    # E2 << E1 when k << d
    report.add(
        Check(
            "mse_sketch_vs_full",
            mse_sketch,
            mse_full,
            rel_tol * expected_full,
            "E2 <= E1",
            comparison=Comparison.at_most,
        )
    )
    return report


def lemma2_experiment(
    d: int,
    k: int,
    v: float,
    trials: int,
    rng: RngStream,
    batch_trials: int = 5000,
    rel_tol: float = 0.01,
    abs_tol: float = 1e-6,
    g: Optional[Vector] = None,
) -> ExperimentReport:
    """
    Monte-Carlo mean of (S(S^T g + z))^2 - v^2 diag(S S^T) against (S S^T g)^2 for z ~ N(0, v^2 I_k).
    The tolerance is relative to the largest target coordinate, widened to STAT_SIGMAS standard
    errors when the target itself is tiny.
    """
    s, _ = gram_schmidt_qr(gaussian_matrix(d, k, rng.derive(0)), rng.derive(0, 1))
    if g is None:
        g = 2.0 * rng.derive(1).generator().standard_normal(d)
    g = np.asarray(g, dtype=np.float64)
    report = ExperimentReport(
        name="lemma2",
        parameters={"d": d, "k": k, "v": v, "trials": trials, "seed": rng.seed, "g_norm": float(np.linalg.norm(g))},
    )

    coordinates = s.T @ g
    target = (s @ coordinates) ** 2
    gram_diag = np.sum(s * s, axis=1)

    total = np.zeros(d)
    total_sq = np.zeros(d)
    for index, n in _batches(trials, batch_trials):
        generator = rng.derive(2, index).generator()
        z = v * generator.standard_normal((n, k))
        estimates = ((coordinates + z) @ s.T) ** 2 - v**2 * gram_diag
        total += np.sum(estimates, axis=0)
        total_sq += np.sum(estimates**2, axis=0)
    mean = total / trials
    deviation = float(np.max(np.abs(mean - target)))

    scale = float(np.max(target))
    if v == 0:
        report.add(Check("max_deviation", deviation, 0.0, EXACT_TOL * max(scale, 1.0), "no noise, exact"))
        return report

    variance = np.maximum(total_sq / trials - mean**2, 0.0)
    stderr = float(np.max(np.sqrt(variance / max(trials - 1, 1))))
    tolerance = max(rel_tol * scale, STAT_SIGMAS * stderr) + abs_tol
    provenance = "E[(S(S^T g + z))^2] - v^2 diag(S S^T) = (S S^T g)^2"
    report.add(Check("max_deviation", deviation, 0.0, tolerance, provenance))
    return report


def sketch_tracking_experiment(
    d: int,
    k: int,
    true_rank: int,
    spectrum: Sequence[float],
    steps: int,
    q: float,
    rng: RngStream,
    angle_tol: float = 0.1,
    orthonormal_tol: float = 1e-8,
    invariant_steps: int = 0,
) -> ExperimentReport:
    """
    Streams gradients from a fixed subspace with the given spectrum through the sketch update
    and scores the retained columns against an exact SVD of the accumulated gradients.
    `invariant_steps` more updates with full-rank Gaussian gradients only check orthonormality.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    report = ExperimentReport(
        name="sketch_tracking",
        parameters={
            "d": d,
            "k": k,
            "true_rank": true_rank,
            "spectrum": [float(value) for value in spectrum],
            "steps": steps,
            "q": q,
            "invariant_steps": invariant_steps,
            "seed": rng.seed,
        },
    )
    p, _ = gram_schmidt_qr(gaussian_matrix(d, true_rank, rng.derive(0)), rng.derive(0, 1))
    state = init_sketch(d, k, q, rng.derive(1))

    worst_orthonormality = orthonormality_error(state.s)
    worst_exploration_overlap = 0.0
    history = np.zeros((d, steps))

    def track() -> None:
        nonlocal worst_orthonormality, worst_exploration_overlap
        worst_orthonormality = max(worst_orthonormality, orthonormality_error(state.s))
        if 0 < state.retained < k:
            overlap = np.max(np.abs(state.retained_columns.T @ state.s[:, state.retained :]))
            worst_exploration_overlap = max(worst_exploration_overlap, float(overlap))

    for step in range(steps):
        g = p @ (spectrum * rng.derive(2, step).generator().standard_normal(true_rank))
        history[:, step] = g
        state = update_sketch(state, g, rng.derive(3, step))
        track()

    oracle, values = brute_force_svd(history)
    retained = state.retained_columns
    report.parameters["retained_r"] = state.retained
    if state.retained > 0:
        report.add(
            Check(
                "largest_angle_to_oracle",
                largest_principal_angle(retained, oracle[:, :true_rank]),
                0.0,
                angle_tol,
                "exact SVD of the accumulated gradients",
                Comparison.at_most,
            )
        )
        report.add(
            Check(
                "dominant_direction_angle",
                largest_principal_angle(retained, oracle[:, :1]),
                0.0,
                angle_tol,
                "top left singular vector of the accumulated gradients",
                Comparison.at_most,
            )
        )
    report.parameters["oracle_singular_values"] = [float(value) for value in values[:true_rank]]

    for step in range(invariant_steps):
        g = rng.derive(4, step).generator().standard_normal(d)
        state = update_sketch(state, g, rng.derive(5, step))
        track()

    report.add(
        Check(
            "orthonormality_error_max",
            worst_orthonormality,
            0.0,
            orthonormal_tol,
            f"S^T S = I after each of {steps + invariant_steps} updates",
            Comparison.at_most,
        )
    )
    report.add(
        Check(
            "exploration_overlap_max",
            worst_exploration_overlap,
            0.0,
            orthonormal_tol,
            "exploration columns orthogonal to retained columns",
            Comparison.at_most,
        )
    )
    return report


def secagg_experiment(
    batch_sizes: Sequence[int],
    dims: Sequence[int],
    rounds: int,
    noise_trials: int,
    noise_variance: float,
    clip_bound: float,
    rng: RngStream,
    scale_bits: int = 20,
    modulus_bits: int = 64,
    variance_tol: float = 0.05,
) -> ExperimentReport:
    """
    Mask cancellation, fixed-point error of the decoded sum and the variance of the aggregated
    per-client noise, over a grid of batch sizes and widths.
    """
    report = ExperimentReport(
        name="secagg",
        parameters={
            "batch_sizes": list(batch_sizes),
            "dims": list(dims),
            "rounds": rounds,
            "noise_trials": noise_trials,
            "noise_variance": noise_variance,
            "clip": clip_bound,
            "scale_bits": scale_bits,
            "modulus_bits": modulus_bits,
            "seed": rng.seed,
        },
    )
    for batch_size in batch_sizes:
        ids = list(range(batch_size))
        pair_seeds = provision_pair_seeds(ids, rng.seed)
        params = FixedPointParams(scale_bits, modulus_bits, value_bound=clip_bound, max_summands=batch_size)
        for dim in dims:
            _masking_checks(report, ids, dim, rounds, pair_seeds, params, rng)
        report.add(
            _noise_variance_check(
                batch_size, noise_trials, noise_variance, clip_bound, rng, scale_bits, modulus_bits, variance_tol
            )
        )
    return report


def _masking_checks(
    report: ExperimentReport,
    ids: List[int],
    dim: int,
    rounds: int,
    pair_seeds: PairSeeds,
    params: FixedPointParams,
    rng: RngStream,
) -> None:
    batch_size = len(ids)
    mismatches = 0
    exposed = 0
    worst_error = 0.0
    for round_id in range(rounds):
        generator = rng.derive(1, batch_size, dim, round_id).generator()
        vectors = generator.uniform(-params.value_bound, params.value_bound, (batch_size, dim))
        encoded = [encode(vector, params) for vector in vectors]
        masks = make_masks(round_id, ids, dim, pair_seeds, params)
        masked = [(value + mask) & params.mask for value, mask in zip(encoded, masks)]
        masked_sum = modular_sum(masked, params)
        mismatches += int(np.count_nonzero(masked_sum != modular_sum(encoded, params)))
        exposed += sum(int(np.array_equal(share, value)) for share, value in zip(masked, encoded))
        error = np.max(np.abs(decode(masked_sum, params, batch_size) - vectors.sum(axis=0)))
        worst_error = max(worst_error, float(error))

    label = f"B={batch_size},dim={dim}"
    report.add(Check(f"mask_mismatches[{label}]", mismatches, 0, 0, "masks sum to zero", Comparison.at_most))
    report.add(Check(f"exposed_shares[{label}]", exposed, 0, 0, "masked share hides its encoding", Comparison.at_most))
    report.add(
        Check(
            f"decode_error[{label}]",
            worst_error,
            0.0,
            batch_size * params.resolution + 1e-12,
            "B rounding errors of 2^-(scale_bits+1)",
            Comparison.at_most,
        )
    )


def _noise_variance_check(
    batch_size: int,
    trials: int,
    noise_variance: float,
    clip_bound: float,
    rng: RngStream,
    scale_bits: int,
    modulus_bits: int,
    variance_tol: float,
    batch_trials: int = 1000,
) -> Check:
    """Aggregate B noisy encoded vectors and compare the variance of the summed noise with B a^2."""
    bound = clip_bound + 10 * math.sqrt(noise_variance)
    params = FixedPointParams(scale_bits, modulus_bits, value_bound=bound, max_summands=batch_size)
    signal = rng.derive(2, batch_size).generator().uniform(-clip_bound, clip_bound, (batch_size, NOISE_CHECK_DIM))
    aggregate_noise = []
    for index, n in _batches(trials, batch_trials):
        generator = rng.derive(3, batch_size, index).generator()
        noise = math.sqrt(noise_variance) * generator.standard_normal((n, batch_size, NOISE_CHECK_DIM))
        summed = np.sum(encode(signal + noise, params), axis=1, dtype=np.uint64) & params.mask
        aggregate_noise.append(decode(summed, params, batch_size) - signal.sum(axis=0))
    measured = float(np.var(np.concatenate(aggregate_noise), axis=0, ddof=1).mean())
    expected = batch_size * noise_variance
    return Check(
        f"aggregate_noise_variance[B={batch_size}]",
        measured,
        expected,
        variance_tol * expected,
        "sum of B independent N(0, a^2) draws has variance B a^2",
    )
