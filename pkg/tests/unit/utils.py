from typing import Any, Dict

import numpy as np
import yaml

from dome.config import TrainingConfig
from dome.linalg import RngStream, Stream


def rng(*path: int, seed: int = 7) -> RngStream:
    return RngStream(seed, Stream.EXPERIMENT, path)


def orthonormal(d: int, k: int, seed: int = 0) -> np.ndarray:
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, k)))
    return q


def training_config(base: Dict[str, Any], **overrides: Any) -> TrainingConfig:
    raw = {**base, **overrides}
    config = TrainingConfig.from_raw(raw)
    config.check()
    return config


def write_yaml(path, contents: Dict[str, Any]) -> str:
    path.write_text(yaml.safe_dump(contents))
    return str(path)
