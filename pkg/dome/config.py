import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Type, TypeVar

from dbt.clients.yaml_helper import load_yaml_text
from dbt.dataclass_schema import StrEnum, ValidationError, dbtClassMixin
from dbt.events import AdapterLogger
from dbt.exceptions import DbtRuntimeError

from dome.exceptions import DomeConfigError
from dome.optimizer import DebiasVariant
from dome.privacy import PrivacyBudget
from dome.tasks import TaskKind

logger = AdapterLogger("Dome")

ConfigT = TypeVar("ConfigT", bound="DomeConfig")

_MAX_SEED = 2**64


class SketchMode(StrEnum):
    dome = "dome"
    # S = I_d, no sketch updates
    full = "full"


class ThetaInit(StrEnum):
    zeros = "zeros"
    xavier = "xavier"


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise DomeConfigError(f"Invalid value for '{key}': {message}")


@dataclass
class DomeConfig(dbtClassMixin):
    _ALIASES = {}

    @classmethod
    def translate_aliases(cls, raw: Mapping[str, Any]) -> Dict[str, Any]:
        translated: Dict[str, Any] = {}
        for key, value in raw.items():
            canonical = cls._ALIASES.get(key, key)
            if canonical in translated:
                raise DomeConfigError(f"Config key '{key}' given twice (also as '{canonical}')")
            translated[canonical] = value
        return translated

    @classmethod
    def from_raw(cls: Type[ConfigT], raw: Mapping[str, Any]) -> ConfigT:
        data = cls.translate_aliases(raw)
        try:
            cls.validate(data)
            return cls.from_dict(data)
        except ValidationError as exc:
            raise DomeConfigError(f"Invalid {cls.__name__}: {getattr(exc, 'message', exc)}") from exc
        except (TypeError, ValueError, KeyError) as exc:
            raise DomeConfigError(f"Invalid {cls.__name__}: {exc}") from exc

    def check(self) -> None:
        seed = getattr(self, "seed", 0)
        _require(0 <= seed < _MAX_SEED, "seed", "must be a 64-bit unsigned integer")


@dataclass
class TaskConfig(dbtClassMixin):
    kind: TaskKind = TaskKind.lowrank_regression
    k_star: int = 4
    label_noise: float = 0.0
    spread: float = 1.0


@dataclass
class TrainingConfig(DomeConfig):
    d: int
    k: int
    n_clients: int
    examples_per_client: int
    batch_size: int
    epochs: int
    epsilon: float
    delta: float
    clip: float
    eta: float
    q: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    gamma_floor: float = 1e-8
    scale_bits: int = 20
    modulus_bits: int = 64
    value_bound: Optional[float] = None
    noise_multiplier: Optional[float] = None
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    debias_variant: DebiasVariant = DebiasVariant.averaged
    sketch_mode: SketchMode = SketchMode.dome
    theta_init: ThetaInit = ThetaInit.zeros
    threads: int = 1
    metrics_path: str = "metrics.csv"
    privacy_report_path: str = "privacy_report.json"
    checkpoint_path: Optional[str] = None
    trace_path: Optional[str] = None
    _ALIASES = {"N_clients": "n_clients", "B": "batch_size", "C": "clip"}

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(epsilon=self.epsilon, delta=self.delta)

    @property
    def n_total(self) -> int:
        return self.n_clients * self.examples_per_client

    @property
    def private(self) -> bool:
        return self.noise_multiplier is None or self.noise_multiplier > 0

    @property
    def width(self) -> int:
        """Words each client sends per round."""
        return self.d if self.sketch_mode == SketchMode.full else self.k

    def check(self) -> None:
        super().check()
        _require(self.d >= 1, "d", "must be positive")
        _require(self.k >= 1, "k", "must be positive")
        _require(self.k <= self.d, "k", f"sketch width {self.k} exceeds the dimension d={self.d}")
        _require(0 < self.q <= 1, "q", "must be in (0, 1]")
        _require(self.n_clients >= 1, "N_clients", "must be positive")
        _require(self.examples_per_client >= 1, "examples_per_client", "must be positive")
        _require(1 <= self.batch_size <= self.n_clients, "B", f"must be between 1 and N_clients={self.n_clients}")
        _require(self.epochs >= 1, "epochs", "must be positive")
        _require(self.epsilon > 0, "epsilon", "must be positive")
        _require(0 < self.delta < 1, "delta", "must be in (0, 1)")
        _require(self.clip > 0, "C", "must be positive")
        _require(self.eta > 0, "eta", "must be positive")
        _require(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        _require(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        _require(self.gamma_floor > 0, "gamma_floor", "must be positive")
        _require(self.modulus_bits <= 64, "modulus_bits", "at most 64")
        _require(0 <= self.scale_bits < self.modulus_bits, "scale_bits", "must be below modulus_bits")
        _require(self.threads >= 1, "threads", "must be positive")
        if self.value_bound is not None:
            _require(0 < self.value_bound < math.inf, "value_bound", "must be positive and finite")
        if self.noise_multiplier is not None:
            _require(self.noise_multiplier >= 0, "noise_multiplier", "must be nonnegative")
        if math.isinf(self.clip):
            _require(not self.private, "C", "clipping can only be disabled when noise_multiplier is 0")
            _require(self.value_bound is not None, "value_bound", "required when C is infinite")
        _require(1 <= self.task.k_star <= self.d, "task.k_star", f"must be between 1 and d={self.d}")
        _require(self.task.label_noise >= 0, "task.label_noise", "must be nonnegative")
        _require(self.task.spread > 0, "task.spread", "must be positive")


@dataclass
class Lemma1Config(DomeConfig):
    d: int
    k: int
    sigma: float
    trials: int
    seed: int = 0
    batch_trials: int = 1000
    rel_tol: float = 0.03
    ratio_tol: float = 0.06
    report_path: str = "lemma1_report.json"

    def check(self) -> None:
        super().check()
        _require(1 <= self.k <= self.d, "k", f"must be between 1 and d={self.d}")
        _require(self.sigma >= 0, "sigma", "must be nonnegative")
        _require(self.trials >= 1, "trials", "must be positive")
        _require(self.batch_trials >= 1, "batch_trials", "must be positive")


@dataclass
class Lemma2Config(DomeConfig):
    d: int
    k: int
    v: float
    trials: int
    seed: int = 0
    batch_trials: int = 5000
    rel_tol: float = 0.01
    abs_tol: float = 1e-6
    report_path: str = "lemma2_report.json"

    def check(self) -> None:
        super().check()
        _require(1 <= self.k <= self.d, "k", f"must be between 1 and d={self.d}")
        _require(self.v >= 0, "v", "must be nonnegative")
        _require(self.trials >= 1, "trials", "must be positive")
        _require(self.batch_trials >= 1, "batch_trials", "must be positive")


@dataclass
class SecAggCheckConfig(DomeConfig):
    batch_sizes: List[int] = field(default_factory=lambda: [2, 10, 50])
    dims: List[int] = field(default_factory=lambda: [1, 16, 256])
    rounds: int = 100
    noise_trials: int = 10000
    noise_variance: float = 1.0
    scale_bits: int = 20
    modulus_bits: int = 64
    clip: float = 1.0
    variance_tol: float = 0.05
    seed: int = 0
    report_path: str = "secagg_report.json"
    _ALIASES = {"C": "clip"}

    def check(self) -> None:
        super().check()
        _require(all(b >= 2 for b in self.batch_sizes), "batch_sizes", "masking needs at least two clients")
        _require(all(dim >= 1 for dim in self.dims), "dims", "must be positive")
        _require(self.rounds >= 1, "rounds", "must be positive")
        _require(self.noise_trials >= 2, "noise_trials", "at least two")
        _require(self.noise_variance > 0, "noise_variance", "must be positive")
        _require(self.clip > 0, "C", "must be positive")
        _require(0 <= self.scale_bits < self.modulus_bits <= 64, "scale_bits", "must be below modulus_bits <= 64")


@dataclass
class SketchCheckConfig(DomeConfig):
    d: int
    k: int
    true_rank: int
    spectrum: List[float]
    steps: int
    q: float = 0.99
    angle_tol: float = 0.1
    orthonormal_tol: float = 1e-8
    invariant_steps: int = 0
    seed: int = 0
    report_path: str = "sketch_report.json"

    def check(self) -> None:
        super().check()
        _require(1 <= self.k <= self.d, "k", f"must be between 1 and d={self.d}")
        _require(1 <= self.true_rank <= self.k, "true_rank", f"must be between 1 and k={self.k}")
        _require(len(self.spectrum) == self.true_rank, "spectrum", f"needs {self.true_rank} values")
        _require(all(value > 0 for value in self.spectrum), "spectrum", "values must be positive")
        _require(self.steps >= 1, "steps", "must be positive")
        _require(0 < self.q <= 1, "q", "must be in (0, 1]")
        _require(self.invariant_steps >= 0, "invariant_steps", "must be nonnegative")


def load_config(path: str, config_cls: Type[ConfigT], seed: Optional[int] = None) -> ConfigT:
    try:
        with open(path, encoding="utf-8") as f:
            contents = f.read()
    except OSError as exc:
        raise DomeConfigError(f"Cannot read config file {path}: {exc}") from exc
    try:
        raw = load_yaml_text(contents, path)
    except DbtRuntimeError as exc:
        raise DomeConfigError(f"Cannot parse config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DomeConfigError(f"Config file {path} must hold a mapping of keys")
    if seed is not None:
        raw["seed"] = seed
    config = config_cls.from_raw(raw)
    config.check()
    logger.debug(f"Loaded {config_cls.__name__} from {path}")
    return config
