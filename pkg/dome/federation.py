import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import tenacity
from dbt.events import AdapterLogger
from scipy.linalg import subspace_angles
from tenacity.retry import retry_if_exception_type
from tenacity.stop import stop_after_attempt

from dome.config import SketchMode, ThetaInit, TrainingConfig
from dome.exceptions import (
    BudgetViolationError,
    EncodingRangeError,
    EpochExhausted,
    InvalidArgumentError,
    ProtocolError,
)
from dome.linalg import Rng, RngStream, Stream, Vector, as_generator, diag_of_gram
from dome.optimizer import (
    AdamState,
    DebiasVariant,
    apply_step,
    debias_variance,
    init_adam,
    update_first_moment,
    update_second_moment_debiased,
)
from dome.privacy import (
    NoiseCalibration,
    PrivacyAccountant,
    PrivacyReport,
    calibrate,
    check_budget,
    clip,
    per_client_noise,
    privacy_report,
    record_round,
    rho_per_round,
)
from dome.secagg import (
    FixedPointParams,
    MaskedShare,
    PairSeeds,
    aggregate,
    client_mask,
    encode,
    mask_share,
    provision_pair_seeds,
)
from dome.sketch import (
    SketchState,
    identity_sketch,
    init_sketch,
    lift,
    project,
    remove_mean,
    update_sketch,
)
from dome.tasks import Task, generate_task, grad, loss, mean_grad, partition_round_robin

logger = AdapterLogger("Dome")

NOISE_REDRAW_ATTEMPTS = 20
VALUE_BOUND_SIGMAS = 6.0
FLOAT_BYTES = 8

METRIC_COLUMNS = (
    "round",
    "epoch",
    "loss",
    "grad_recon_err",
    "subspace_angle",
    "retained_r",
    "rho_spent",
    "bytes_up",
    "bytes_down",
)


@dataclass(eq=False)
class ClientState:
    """
    One client: the indices of its local examples in the task and the examples it has not
    used yet this epoch. `unseen=None` starts the client with its whole dataset.
    """

    client_id: int
    dataset: List[int]
    pair_seeds: PairSeeds = field(default_factory=dict)
    unseen: Optional[Set[int]] = None
    last_example: Optional[int] = None

    def __post_init__(self) -> None:
        if self.unseen is None:
            self.unseen = set(self.dataset)
        elif not self.unseen <= set(self.dataset):
            raise InvalidArgumentError(f"Client {self.client_id} has unseen examples outside its dataset")

    @property
    def eligible(self) -> bool:
        return bool(self.unseen)

    def reset_epoch(self) -> None:
        self.unseen = set(self.dataset)

    def draw_example(self, rng: Rng) -> int:
        if not self.unseen:
            raise ProtocolError(f"Client {self.client_id} was selected without an unseen example")
        candidates = sorted(self.unseen)
        index = candidates[int(as_generator(rng).integers(len(candidates)))]
        self.unseen.remove(index)
        self.last_example = index
        return index


@dataclass(frozen=True, eq=False)
class ServerState:
    theta: Vector
    sketch: SketchState
    adam: AdamState
    accountant: PrivacyAccountant
    calib: NoiseCalibration
    round: int = 0
    epoch: int = 0

    def __post_init__(self) -> None:
        if self.accountant.rounds_recorded != self.round:
            raise ProtocolError(
                f"Accountant recorded {self.accountant.rounds_recorded} rounds but the server ran {self.round}"
            )
        if self.round > self.calib.rounds_total:
            raise BudgetViolationError(f"Round {self.round} exceeds the calibrated {self.calib.rounds_total} rounds")


@dataclass(frozen=True)
class RoundContext:
    round_id: int
    epoch: int
    participants: Tuple[int, ...]
    params: FixedPointParams
    clip: float

    @property
    def size(self) -> int:
        return len(self.participants)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    epoch: int
    participants: Tuple[int, ...]
    aggregate: Vector
    g_hat: Vector
    retained_r: int
    rho_spent: float
    loss: Optional[float] = None
    grad_recon_err: Optional[float] = None
    subspace_angle: Optional[float] = None
    bytes_up: int = 0
    bytes_down: int = 0

    def to_row(self) -> Dict[str, Optional[float]]:
        return {column: getattr(self, column) for column in METRIC_COLUMNS}


@dataclass(frozen=True, eq=False)
class TrainingResult:
    records: List[RoundRecord]
    theta: Vector
    initial_loss: float
    final_loss: float
    privacy: PrivacyReport
    server: ServerState
    task: Task


def plan_rounds(counts: Sequence[int], batch_size: int) -> int:
    """
    Rounds needed for one full pass when every round draws from the clients holding the most
    unseen examples, the tail running short once fewer than `batch_size` clients remain.
    """
    if batch_size < 1:
        raise InvalidArgumentError(f"Batch size must be positive, got {batch_size}")
    remaining = sorted((count for count in counts if count > 0), reverse=True)
    rounds = 0
    while remaining:
        take = min(batch_size, len(remaining))
        drawn = [count - 1 for count in remaining[:take]]
        remaining = sorted((count for count in drawn + remaining[take:] if count > 0), reverse=True)
        rounds += 1
    return rounds


def select_clients(pool: Sequence[ClientState], batch_size: int, rng: Rng) -> List[int]:
    if not 1 <= batch_size <= len(pool):
        raise InvalidArgumentError(f"Cannot draw {batch_size} clients from a pool of {len(pool)}")
    eligible = [client for client in pool if client.eligible]
    if len(eligible) < batch_size:
        raise EpochExhausted(
            f"Only {len(eligible)} clients hold unseen examples, {batch_size} needed",
            remaining=sorted(client.client_id for client in eligible),
        )
    tiers: Dict[int, List[int]] = {}
    for client in eligible:
        tiers.setdefault(len(client.unseen), []).append(client.client_id)

    generator = as_generator(rng)
    chosen: List[int] = []
    for count in sorted(tiers, reverse=True):
        tier = sorted(tiers[count])
        room = batch_size - len(chosen)
        if len(tier) <= room:
            chosen.extend(tier)
        else:
            chosen.extend(int(client_id) for client_id in generator.choice(tier, size=room, replace=False))
        if len(chosen) == batch_size:
            break
    return sorted(chosen)


def fixed_point_params(config: TrainingConfig, calib: NoiseCalibration, participants: int) -> FixedPointParams:
    if config.value_bound is not None:
        bound = config.value_bound
    else:
        bound = (calib.clip + VALUE_BOUND_SIGMAS * math.sqrt(calib.round_variance(participants))) * (1 + 1e-9)
    return FixedPointParams(
        scale_bits=config.scale_bits, modulus_bits=config.modulus_bits, value_bound=bound, max_summands=participants
    )


def _log_redraw(retry_state: tenacity.RetryCallState) -> None:
    logger.debug(f"Noisy share outside the encodable range, re-drawing noise (attempt {retry_state.attempt_number})")


def client_round(
    client: ClientState,
    task: Task,
    theta: Vector,
    sketch: SketchState,
    m_hat: Vector,
    calib: NoiseCalibration,
    ctx: RoundContext,
    rng: RngStream,
) -> MaskedShare:
    index = client.draw_example(rng.derive(0))
    s = project(sketch, remove_mean(grad(task, theta, task.example(index)), m_hat)).coords
    s_clip = clip(s, ctx.clip)

    noise_rng = rng.derive(1).generator()

    def noisy_encoding() -> np.ndarray:
        return encode(s_clip + per_client_noise(calib, sketch.k, noise_rng, participants=ctx.size), ctx.params)

    retrying = tenacity.Retrying(
        retry=retry_if_exception_type(EncodingRangeError),
        stop=stop_after_attempt(NOISE_REDRAW_ATTEMPTS if calib.sigma > 0 else 1),
        after=_log_redraw,
        reraise=True,
    )
    encoded = retrying(noisy_encoding)
    mask = client_mask(ctx.round_id, client.client_id, ctx.participants, sketch.k, client.pair_seeds, ctx.params)
    return mask_share(client.client_id, ctx.round_id, encoded, mask, ctx.params)


def server_round(
    server: ServerState,
    shares: Sequence[MaskedShare],
    ctx: RoundContext,
    sketch_rng: Optional[RngStream] = None,
    variant: DebiasVariant = DebiasVariant.averaged,
) -> Tuple[ServerState, RoundRecord]:
    """
    Aggregate the masked shares of one round and apply the server update. The sketch is kept
    fixed when `sketch_rng` is None.
    """
    if ctx.round_id != server.round + 1:
        raise ProtocolError(f"Server expects round {server.round + 1}, got shares for round {ctx.round_id}")
    if server.round >= server.calib.rounds_total:
        raise BudgetViolationError(f"All {server.calib.rounds_total} calibrated rounds were already executed")
    if len(shares) != ctx.size:
        raise ProtocolError(f"Expected {ctx.size} shares, got {len(shares)}")
    if {share.client_id for share in shares} != set(ctx.participants):
        raise ProtocolError("Shares do not come from the selected clients")

    g_prec = aggregate(shares, ctx.params, ctx.size) / ctx.size
    g_hat = lift(server.sketch, g_prec, server.adam.m_hat)
    noise_variance = debias_variance(server.calib.round_variance(ctx.size), ctx.size, variant)

    adam = update_first_moment(server.adam, g_hat)
    adam = update_second_moment_debiased(adam, g_hat, noise_variance, diag_of_gram(server.sketch.s))
    theta = apply_step(server.theta, adam)
    sketch = server.sketch if sketch_rng is None else update_sketch(server.sketch, g_hat, sketch_rng)
    accountant = record_round(server.accountant)

    server = replace(server, theta=theta, sketch=sketch, adam=adam, accountant=accountant, round=server.round + 1)
    record = RoundRecord(
        round=ctx.round_id,
        epoch=ctx.epoch,
        participants=ctx.participants,
        aggregate=g_prec,
        g_hat=g_hat,
        retained_r=sketch.retained,
        rho_spent=accountant.rho_spent,
    )
    return server, record


def initial_theta(config: TrainingConfig) -> Vector:
    if config.theta_init == ThetaInit.xavier:
        limit = math.sqrt(6 / (config.d + 1))
        return RngStream(config.seed, Stream.THETA_INIT).generator().uniform(-limit, limit, size=config.d)
    return np.zeros(config.d)


def _relative_error(estimate: Vector, truth: Vector) -> Optional[float]:
    norm = np.linalg.norm(truth)
    if norm == 0:
        return None
    return float(np.linalg.norm(estimate - truth) / norm)


def _largest_angle(sketch: SketchState, task: Task) -> Optional[float]:
    if task.p_star is None or sketch.retained == 0:
        return None
    return float(np.max(subspace_angles(sketch.retained_columns, task.p_star)))


class Simulation:
    def __init__(self, config: TrainingConfig, task: Optional[Task] = None, trace_path: Optional[str] = None) -> None:
        self.config = config
        self.trace_path = trace_path
        seed = config.seed
        if task is None:
            task = generate_task(
                config.task.kind,
                config.d,
                config.task.k_star,
                config.n_total,
                config.task.label_noise,
                RngStream(seed, Stream.TASK),
                config.task.spread,
            )
        if task.d != config.d or task.size != config.n_total:
            raise InvalidArgumentError(
                f"Task holds {task.size} examples of dimension {task.d}, "
                f"config expects {config.n_total} of dimension {config.d}"
            )
        self.task = task

        shards = partition_round_robin(task.size, config.n_clients)
        pair_seeds = provision_pair_seeds(range(config.n_clients), seed)
        self.clients = [
            ClientState(
                client_id=client_id,
                dataset=shard,
                pair_seeds={pair: value for pair, value in pair_seeds.items() if client_id in pair},
            )
            for client_id, shard in enumerate(shards)
        ]
        self.rounds_per_epoch = plan_rounds([len(shard) for shard in shards], config.batch_size)
        self.calib = calibrate(
            config.budget,
            config.clip,
            self.rounds_per_epoch * config.epochs,
            config.batch_size,
            sigma=config.noise_multiplier,
        )

        if config.sketch_mode == SketchMode.full:
            sketch = identity_sketch(config.d)
        else:
            sketch = init_sketch(config.d, config.k, config.q, RngStream(seed, Stream.SKETCH_INIT))
        theta = initial_theta(config)
        self.server = ServerState(
            theta=theta,
            sketch=sketch,
            adam=init_adam(config.d, config.eta, config.beta1, config.beta2, config.gamma_floor),
            accountant=PrivacyAccountant(rho_per_round=rho_per_round(self.calib)),
            calib=self.calib,
        )
        self.initial_loss = loss(task, theta)
        self.records: List[RoundRecord] = []
        self._executor: Optional[ThreadPoolExecutor] = None
        self._trace: Optional[BinaryIO] = None

    @property
    def bytes_up(self) -> int:
        return self.server.sketch.k * FLOAT_BYTES

    @property
    def bytes_down(self) -> int:
        d = self.config.d
        if self.config.sketch_mode == SketchMode.full:
            return d * FLOAT_BYTES
        return (d * self.config.k + d) * FLOAT_BYTES

    def _sketch_rng(self, round_id: int) -> Optional[RngStream]:
        if self.config.sketch_mode == SketchMode.full:
            return None
        return RngStream(self.config.seed, Stream.SKETCH_UPDATE, (round_id,))

    def run_round(self, participants: Sequence[int], epoch: int) -> RoundRecord:
        server = self.server
        ctx = RoundContext(
            round_id=server.round + 1,
            epoch=epoch,
            participants=tuple(participants),
            params=fixed_point_params(self.config, self.calib, len(participants)),
            clip=self.config.clip,
        )
        clients = [self.clients[client_id] for client_id in ctx.participants]

        def work(client: ClientState) -> MaskedShare:
            rng = RngStream(self.config.seed, Stream.CLIENT, (client.client_id, ctx.round_id))
            return client_round(client, self.task, server.theta, server.sketch, server.adam.m_hat, self.calib, ctx, rng)

        if self._executor is not None:
            shares = list(self._executor.map(work, clients))
        else:
            shares = [work(client) for client in clients]
        if self._trace is not None:
            for share in shares:
                self._trace.write(share.to_bytes())

        true_grad = mean_grad(self.task, server.theta, [client.last_example for client in clients])
        self.server, record = server_round(
            server, shares, ctx, self._sketch_rng(ctx.round_id), self.config.debias_variant
        )
        record = replace(
            record,
            loss=loss(self.task, self.server.theta),
            grad_recon_err=_relative_error(record.g_hat, true_grad),
            subspace_angle=_largest_angle(self.server.sketch, self.task),
            bytes_up=self.bytes_up,
            bytes_down=self.bytes_down,
        )
        self.records.append(record)
        logger.debug(f"Round {record.round} (epoch {epoch}): loss={record.loss:.6g}, retained={record.retained_r}")
        return record

    def run_epoch(self) -> List[RoundRecord]:
        epoch = self.server.epoch + 1
        for client in self.clients:
            client.reset_epoch()

        records = []
        while True:
            selection_rng = RngStream(self.config.seed, Stream.SELECTION, (epoch, self.server.round + 1))
            try:
                participants = select_clients(self.clients, self.config.batch_size, selection_rng)
            except EpochExhausted as exc:
                if not exc.remaining:
                    break
                logger.warning(
                    f"Short round with {len(exc.remaining)} of {self.config.batch_size} clients ending epoch {epoch}"
                )
                participants = exc.remaining
            records.append(self.run_round(participants, epoch))

        if any(client.eligible for client in self.clients):
            raise ProtocolError(f"Epoch {epoch} ended with unseen examples left")
        self.server = replace(self.server, epoch=epoch)
        logger.info(f"Epoch {epoch} done after {len(records)} rounds, loss={self.records[-1].loss:.6g}")
        return records

    def run(self) -> TrainingResult:
        logger.info(
            f"Training {self.config.epochs} epochs of {self.rounds_per_epoch} rounds, "
            f"sigma={self.calib.sigma:.6g}, a^2={self.calib.per_client_variance:.6g}"
        )
        try:
            if self.trace_path is not None:
                self._trace = open(self.trace_path, "wb")
            with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
                self._executor = executor if self.config.threads > 1 else None
                for _ in range(self.config.epochs):
                    self.run_epoch()
        finally:
            self._executor = None
            if self._trace is not None:
                self._trace.close()
                self._trace = None

        if self.server.round != self.calib.rounds_total:
            raise BudgetViolationError(
                f"Executed {self.server.round} rounds, the noise was calibrated for {self.calib.rounds_total}"
            )
        report = privacy_report(self.calib, self.server.accountant, self.config.budget)
        check_budget(report)
        return TrainingResult(
            records=list(self.records),
            theta=self.server.theta,
            initial_loss=self.initial_loss,
            final_loss=loss(self.task, self.server.theta),
            privacy=report,
            server=self.server,
            task=self.task,
        )


def run_training(
    config: TrainingConfig, task: Optional[Task] = None, trace_path: Optional[str] = None
) -> TrainingResult:
    return Simulation(config, task=task, trace_path=trace_path).run()
