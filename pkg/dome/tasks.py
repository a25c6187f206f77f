from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from dbt.dataclass_schema import StrEnum
from scipy.special import expit

from dome.exceptions import InvalidArgumentError
from dome.linalg import Matrix, Rng, Vector, as_generator, check_vector, gaussian_matrix, gram_schmidt_qr

# share of feature energy outside the planted subspace in the logistic task
LOGISTIC_AMBIENT_SCALE = 0.1


class TaskKind(StrEnum):
    lowrank_regression = "lowrank_regression"
    logistic = "logistic"


class Example(NamedTuple):
    x: Vector
    y: float


@dataclass(frozen=True, eq=False)
class Task(ABC):
    features: Matrix
    labels: Vector
    theta_star: Vector
    label_noise: float
    d: int = field(init=False)

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise InvalidArgumentError(f"Features must be a matrix, got shape {features.shape}")
        labels = check_vector("labels", self.labels, features.shape[0])
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "d", features.shape[1])
        object.__setattr__(self, "theta_star", check_vector("theta_star", self.theta_star, self.d))

    @property
    @abstractmethod
    def kind(self) -> TaskKind:
        ...

    @property
    def p_star(self) -> Optional[Matrix]:
        return None

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def examples(self) -> List[Example]:
        return [Example(x, float(y)) for x, y in zip(self.features, self.labels)]

    def example(self, index: int) -> Example:
        return Example(self.features[index], float(self.labels[index]))

    @abstractmethod
    def example_losses(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        ...

    @abstractmethod
    def residuals(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        """d loss / d <x, theta> for every row of x."""


@dataclass(frozen=True, eq=False)
class LowRankRegressionTask(Task):
    """Squared loss on features that lie in span(P_star), so every per-example gradient does too."""

    basis: Matrix = None

    def __post_init__(self) -> None:
        super().__post_init__()
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != self.d:
            raise InvalidArgumentError(f"P_star must have {self.d} rows, got shape {basis.shape}")
        object.__setattr__(self, "basis", basis)

    @property
    def kind(self) -> TaskKind:
        return TaskKind.lowrank_regression

    @property
    def p_star(self) -> Matrix:
        return self.basis

    def example_losses(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        return 0.5 * (x @ theta - y) ** 2

    def residuals(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        return x @ theta - y


@dataclass(frozen=True, eq=False)
class LogisticTask(Task):
    """Binary labels from a planted linear model; features are only approximately low-rank."""

    spread: float = 1.0

    def __post_init__(self) -> None:
        super().__post_init__()
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise InvalidArgumentError("Logistic labels must be 0 or 1")

    @property
    def kind(self) -> TaskKind:
        return TaskKind.logistic

    def example_losses(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        z = x @ theta
        return np.logaddexp(0.0, z) - y * z

    def residuals(self, theta: Vector, x: Matrix, y: Vector) -> Vector:
        return expit(x @ theta) - y


def _check_shape(d: int, k_star: int, n_total: int) -> None:
    if not 1 <= k_star <= d:
        raise InvalidArgumentError(f"Planted rank must satisfy 1 <= k_star <= d, got k_star={k_star}, d={d}")
    if n_total < 1:
        raise InvalidArgumentError(f"Need at least one example, got {n_total}")


def gen_lowrank_regression(
    d: int, k_star: int, n_total: int, label_noise: float, rng: Rng, spread: float = 1.0
) -> LowRankRegressionTask:
    _check_shape(d, k_star, n_total)
    generator = as_generator(rng)
    p_star, _ = gram_schmidt_qr(gaussian_matrix(d, k_star, generator), generator)
    theta_star = p_star @ generator.standard_normal(k_star)
    features = (spread * generator.standard_normal((n_total, k_star))) @ p_star.T
    labels = features @ theta_star
    if label_noise > 0:
        labels = labels + label_noise * generator.standard_normal(n_total)
    return LowRankRegressionTask(
        features=features, labels=labels, theta_star=theta_star, label_noise=label_noise, basis=p_star
    )


def gen_logistic(
    d: int, k_star: int, n_total: int, label_noise: float, rng: Rng, spread: float = 1.0
) -> LogisticTask:
    _check_shape(d, k_star, n_total)
    generator = as_generator(rng)
    p_star, _ = gram_schmidt_qr(gaussian_matrix(d, k_star, generator), generator)
    theta_star = p_star @ generator.standard_normal(k_star)
    planted = (spread * generator.standard_normal((n_total, k_star))) @ p_star.T
    ambient = (LOGISTIC_AMBIENT_SCALE * spread / np.sqrt(d)) * generator.standard_normal((n_total, d))
    features = planted + ambient
    logits = features @ theta_star + label_noise * generator.standard_normal(n_total)
    labels = (logits > 0).astype(np.float64)
    return LogisticTask(
        features=features, labels=labels, theta_star=theta_star, label_noise=label_noise, spread=spread
    )


def generate_task(
    kind: TaskKind, d: int, k_star: int, n_total: int, label_noise: float, rng: Rng, spread: float = 1.0
) -> Task:
    if kind == TaskKind.lowrank_regression:
        return gen_lowrank_regression(d, k_star, n_total, label_noise, rng, spread)
    if kind == TaskKind.logistic:
        return gen_logistic(d, k_star, n_total, label_noise, rng, spread)
    raise InvalidArgumentError(f"Unknown task kind {kind}")


def grad(task: Task, theta: Vector, example: Example) -> Vector:
    theta = check_vector("theta", theta, task.d)
    x = check_vector("example features", example.x, task.d)
    return task.residuals(theta, x[None, :], np.array([example.y]))[0] * x


def mean_grad(task: Task, theta: Vector, indices: Sequence[int]) -> Vector:
    theta = check_vector("theta", theta, task.d)
    x = task.features[list(indices)]
    return task.residuals(theta, x, task.labels[list(indices)]) @ x / len(x)


def loss(task: Task, theta: Vector, examples: Optional[Sequence[Example]] = None) -> float:
    theta = check_vector("theta", theta, task.d)
    if examples is None:
        x, y = task.features, task.labels
    else:
        if not examples:
            raise InvalidArgumentError("Loss of an empty example set is undefined")
        x = np.stack([example.x for example in examples])
        y = np.array([example.y for example in examples], dtype=np.float64)
    return float(np.mean(task.example_losses(theta, x, y)))


def partition_round_robin(n_total: int, n_clients: int) -> List[List[int]]:
    """Example i goes to client i mod n_clients."""
    if n_clients < 1:
        raise InvalidArgumentError(f"Need at least one client, got {n_clients}")
    return [list(range(client, n_total, n_clients)) for client in range(n_clients)]
