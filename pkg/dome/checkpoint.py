import struct
from typing import BinaryIO, List, NamedTuple, Tuple

import numpy as np

from dome.exceptions import InvalidArgumentError
from dome.linalg import Vector
from dome.optimizer import AdamState
from dome.sketch import SketchState
from dome.tasks import LogisticTask, LowRankRegressionTask, Task, TaskKind

_CHECKPOINT_MAGIC = b"DOMECKPT"
_TASK_MAGIC = b"DOMETASK"
# d, k, sketch step, retained columns, adam step
_CHECKPOINT_DIMS = struct.Struct("<QQQQQ")
# q, eta, beta1, beta2, gamma_floor
_CHECKPOINT_SCALARS = struct.Struct("<ddddd")
# kind, examples, d, planted rank
_TASK_DIMS = struct.Struct("<QQQQ")
# label_noise, spread
_TASK_SCALARS = struct.Struct("<dd")
_FLOAT = np.dtype("<f8")

_TASK_CODES = {TaskKind.lowrank_regression: 1, TaskKind.logistic: 2}


class Checkpoint(NamedTuple):
    theta: Vector
    sketch: SketchState
    adam: AdamState


def _write_floats(f: BinaryIO, values: np.ndarray) -> None:
    f.write(np.ascontiguousarray(values, dtype=_FLOAT).tobytes())


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise InvalidArgumentError(f"{self.path} is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct) -> Tuple:
        return layout.unpack(self.take(layout.size))

    def floats(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * _FLOAT.itemsize), dtype=_FLOAT).reshape(shape).astype(np.float64)

    def magic(self, expected: bytes) -> None:
        if self.take(len(expected)) != expected:
            raise InvalidArgumentError(f"{self.path} is not a {expected.decode()} file")

    def done(self) -> None:
        if self.offset != len(self.data):
            raise InvalidArgumentError(f"{self.path} has {len(self.data) - self.offset} trailing bytes")


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise InvalidArgumentError(f"Cannot read {path}: {exc}") from exc


def write_checkpoint(path: str, theta: Vector, sketch: SketchState, adam: AdamState) -> None:
    if len(theta) != sketch.d or adam.d != sketch.d:
        raise InvalidArgumentError("theta, sketch and optimizer state disagree on the dimension")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(_CHECKPOINT_DIMS.pack(sketch.d, sketch.k, sketch.t, sketch.retained, adam.step))
        f.write(_CHECKPOINT_SCALARS.pack(sketch.q, adam.eta, adam.beta1, adam.beta2, adam.gamma_floor))
        for values in (sketch.s, sketch.u, sketch.lam, adam.m_raw, adam.v_raw, adam.m_hat, adam.v_hat, theta):
            _write_floats(f, values)


def read_checkpoint(path: str) -> Checkpoint:
    reader = _Reader(_read(path), path)
    reader.magic(_CHECKPOINT_MAGIC)
    d, k, t, retained, step = reader.unpack(_CHECKPOINT_DIMS)
    q, eta, beta1, beta2, gamma_floor = reader.unpack(_CHECKPOINT_SCALARS)
    sketch = SketchState(
        s=reader.floats(d, k), u=reader.floats(d, k), lam=reader.floats(k), q=q, t=t, retained=retained
    )
    moments: List[np.ndarray] = [reader.floats(d) for _ in range(4)]
    theta = reader.floats(d)
    reader.done()
    adam = AdamState(
        d=d,
        eta=eta,
        beta1=beta1,
        beta2=beta2,
        gamma_floor=gamma_floor,
        step=step,
        m_raw=moments[0],
        v_raw=moments[1],
        m_hat=moments[2],
        v_hat=moments[3],
    )
    return Checkpoint(theta=theta, sketch=sketch, adam=adam)


def dump_task(path: str, task: Task) -> None:
    basis = task.p_star
    spread = getattr(task, "spread", 1.0)
    with open(path, "wb") as f:
        f.write(_TASK_MAGIC)
        rank = 0 if basis is None else basis.shape[1]
        f.write(_TASK_DIMS.pack(_TASK_CODES[task.kind], task.size, task.d, rank))
        f.write(_TASK_SCALARS.pack(task.label_noise, spread))
        for values in (task.features, task.labels, task.theta_star):
            _write_floats(f, values)
        if basis is not None:
            _write_floats(f, basis)


def load_task(path: str) -> Task:
    reader = _Reader(_read(path), path)
    reader.magic(_TASK_MAGIC)
    code, n, d, rank = reader.unpack(_TASK_DIMS)
    label_noise, spread = reader.unpack(_TASK_SCALARS)
    features = reader.floats(n, d)
    labels = reader.floats(n)
    theta_star = reader.floats(d)
    if code == _TASK_CODES[TaskKind.lowrank_regression]:
        basis = reader.floats(d, rank)
        reader.done()
        return LowRankRegressionTask(
            features=features, labels=labels, theta_star=theta_star, label_noise=label_noise, basis=basis
        )
    if code == _TASK_CODES[TaskKind.logistic]:
        reader.done()
        return LogisticTask(
            features=features, labels=labels, theta_star=theta_star, label_noise=label_noise, spread=spread
        )
    raise InvalidArgumentError(f"{path} holds an unknown task kind {code}")
