import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from dome.exceptions import EncodingRangeError, InvalidArgumentError, ProtocolError
from dome.linalg import RngStream, Stream, Vector

# (lower id, higher id) -> 64-bit seed shared by the pair
PairSeeds = Dict[Tuple[int, int], int]

_HEADER = struct.Struct("<QQI")
_WORD = np.dtype("<u8")


@dataclass(frozen=True)
class FixedPointParams:
    """
    Fixed-point encoding of reals into integers modulo 2**modulus_bits. `max_summands` encoded
    values of magnitude at most `value_bound` must sum without wrapping around.
    """

    scale_bits: int = 20
    modulus_bits: int = 64
    value_bound: float = 1.0
    max_summands: int = 1

    def __post_init__(self) -> None:
        if not 0 <= self.scale_bits < self.modulus_bits <= 64:
            raise InvalidArgumentError(
                f"Need 0 <= scale_bits < modulus_bits <= 64, got {self.scale_bits} and {self.modulus_bits}"
            )
        if not (self.value_bound > 0 and math.isfinite(self.value_bound)):
            raise InvalidArgumentError(f"value_bound must be positive and finite, got {self.value_bound}")
        if self.max_summands < 1:
            raise InvalidArgumentError(f"max_summands must be positive, got {self.max_summands}")
        if self.value_bound * 2.0**self.scale_bits * self.max_summands >= 2.0 ** (self.modulus_bits - 1):
            raise InvalidArgumentError(
                f"{self.max_summands} summands bounded by {self.value_bound} overflow "
                f"{self.modulus_bits}-bit arithmetic at scale 2**{self.scale_bits}"
            )

    @property
    def mask(self) -> np.uint64:
        return np.uint64(2**self.modulus_bits - 1)

    @property
    def scale(self) -> float:
        return 2.0**self.scale_bits

    @property
    def resolution(self) -> float:
        """Worst-case rounding error of one encoded coordinate."""
        return 2.0 ** -(self.scale_bits + 1)


@dataclass(frozen=True, eq=False)
class MaskedShare:
    client_id: int
    round_id: int
    payload: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.round_id, self.client_id, self.dim) + np.asarray(self.payload, dtype=_WORD).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MaskedShare":
        if len(data) < _HEADER.size:
            raise InvalidArgumentError(f"Masked share needs at least {_HEADER.size} bytes, got {len(data)}")
        round_id, client_id, dim = _HEADER.unpack_from(data)
        body = data[_HEADER.size :]
        if len(body) != dim * _WORD.itemsize:
            raise InvalidArgumentError(f"Masked share declares {dim} words but carries {len(body)} bytes")
        payload = np.frombuffer(body, dtype=_WORD).astype(np.uint64)
        return cls(client_id=client_id, round_id=round_id, payload=payload)


def read_shares(data: bytes) -> List[MaskedShare]:
    """Split a round trace (concatenated wire-format shares) back into shares."""
    shares = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < _HEADER.size:
            raise InvalidArgumentError(
                f"Trace ends with {len(data) - offset} bytes at offset {offset}, a share header needs {_HEADER.size}"
            )
        _, _, dim = _HEADER.unpack_from(data, offset)
        size = _HEADER.size + dim * _WORD.itemsize
        shares.append(MaskedShare.from_bytes(data[offset : offset + size]))
        offset += size
    return shares


def encode(v: Vector, params: FixedPointParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)) or np.any(np.abs(v) > params.value_bound):
        raise EncodingRangeError(f"Value outside the encodable range +/-{params.value_bound}")
    signed = np.rint(v * params.scale).astype(np.int64)
    return signed.astype(np.uint64) & params.mask


def decode(w: np.ndarray, params: FixedPointParams, num_summands: int) -> Vector:
    if not 1 <= num_summands <= params.max_summands:
        raise InvalidArgumentError(f"Cannot decode a sum of {num_summands} values with these parameters")
    w = np.asarray(w, dtype=np.uint64) & params.mask
    if params.modulus_bits == 64:
        signed = w.view(np.int64)
    else:
        signed = w.astype(np.int64)
        signed = np.where(signed >= 2 ** (params.modulus_bits - 1), signed - 2**params.modulus_bits, signed)
    return signed.astype(np.float64) / params.scale


def modular_sum(payloads: Iterable[np.ndarray], params: FixedPointParams) -> np.ndarray:
    total = None
    for payload in payloads:
        payload = np.asarray(payload, dtype=np.uint64)
        total = payload.copy() if total is None else total + payload
    if total is None:
        raise ProtocolError("Nothing to aggregate")
    return total & params.mask


def provision_pair_seeds(client_ids: Iterable[int], seed: int) -> PairSeeds:
    """Out-of-band seed table standing in for pairwise key agreement."""
    ids = sorted(set(int(client_id) for client_id in client_ids))
    stream = RngStream(seed, Stream.SECAGG_SEEDS)
    seeds: PairSeeds = {}
    for position, low in enumerate(ids):
        for high in ids[position + 1 :]:
            seeds[(low, high)] = int(stream.derive(low, high).generator().integers(0, 2**64, dtype=np.uint64))
    return seeds


def _prg(pair_seed: int, round_id: int, dim: int, params: FixedPointParams) -> np.ndarray:
    generator = RngStream(pair_seed, round_id).generator()
    return generator.integers(0, 2**64, size=dim, dtype=np.uint64) & params.mask


def _check_participants(client_ids: Sequence[int]) -> List[int]:
    ids = [int(client_id) for client_id in client_ids]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError(f"Duplicate client ids in {ids}")
    return ids


def client_mask(
    round_id: int, client_id: int, client_ids: Sequence[int], dim: int, pair_seeds: PairSeeds, params: FixedPointParams
) -> np.ndarray:
    """Mask of one client: + PRG of pairs with higher ids, - PRG of pairs with lower ids."""
    ids = _check_participants(client_ids)
    mask = np.zeros(dim, dtype=np.uint64)
    for other in ids:
        if other == client_id:
            continue
        key = (min(client_id, other), max(client_id, other))
        if key not in pair_seeds:
            raise ProtocolError(f"No shared seed between clients {key[0]} and {key[1]}")
        if other > client_id:
            mask += _prg(pair_seeds[key], round_id, dim, params)
        else:
            mask -= _prg(pair_seeds[key], round_id, dim, params)
    return mask & params.mask


def make_masks(
    round_id: int, client_ids: Sequence[int], dim: int, pair_seeds: PairSeeds, params: FixedPointParams
) -> List[np.ndarray]:
    ids = _check_participants(client_ids)
    if len(ids) < 2:
        raise InvalidArgumentError("Pairwise masking needs at least two clients")
    masks = {client_id: np.zeros(dim, dtype=np.uint64) for client_id in ids}
    for position, first in enumerate(ids):
        for second in ids[position + 1 :]:
            low, high = min(first, second), max(first, second)
            if (low, high) not in pair_seeds:
                raise ProtocolError(f"No shared seed between clients {low} and {high}")
            stream = _prg(pair_seeds[(low, high)], round_id, dim, params)
            masks[low] += stream
            masks[high] -= stream
    return [masks[client_id] & params.mask for client_id in ids]


def mask_share(
    client_id: int, round_id: int, encoded: np.ndarray, mask: np.ndarray, params: FixedPointParams
) -> MaskedShare:
    payload = (np.asarray(encoded, dtype=np.uint64) + np.asarray(mask, dtype=np.uint64)) & params.mask
    return MaskedShare(client_id=int(client_id), round_id=int(round_id), payload=payload)


def aggregate(shares: Sequence[MaskedShare], params: FixedPointParams, num_summands: int) -> Vector:
    """Real-valued sum of the clients' vectors. Only the modular sum of masked payloads is ever formed."""
    if len(shares) != num_summands:
        raise ProtocolError(f"Expected {num_summands} shares, got {len(shares)}")
    round_ids = {share.round_id for share in shares}
    if len(round_ids) != 1:
        raise ProtocolError(f"Shares from different rounds: {sorted(round_ids)}")
    dims = {share.dim for share in shares}
    if len(dims) != 1:
        raise ProtocolError(f"Shares of different widths: {sorted(dims)}")
    return decode(modular_sum((share.payload for share in shares), params), params, num_summands)
