import numpy as np
import pytest

from dome.exceptions import EncodingRangeError, InvalidArgumentError, ProtocolError
from dome.secagg import (
    FixedPointParams,
    MaskedShare,
    aggregate,
    client_mask,
    decode,
    encode,
    make_masks,
    mask_share,
    modular_sum,
    provision_pair_seeds,
    read_shares,
)

from .utils import rng

PARAMS = FixedPointParams(scale_bits=20, modulus_bits=64, value_bound=1.0, max_summands=50)


def shares_for(vectors, round_id, params=PARAMS, seed=11):
    ids = list(range(len(vectors)))
    pair_seeds = provision_pair_seeds(ids, seed)
    masks = make_masks(round_id, ids, vectors.shape[1], pair_seeds, params)
    return [
        mask_share(client_id, round_id, encode(vector, params), mask, params)
        for client_id, vector, mask in zip(ids, vectors, masks)
    ]


class TestFixedPoint:
    def test_encode_one(self):
        assert encode(np.array([1.0]), PARAMS)[0] == 2**20

    def test_encode_negative_half(self):
        assert encode(np.array([-0.5]), PARAMS)[0] == np.uint64(2**64 - 524288)
        assert decode(encode(np.array([-0.5]), PARAMS), PARAMS, 1)[0] == -0.5

    @pytest.mark.parametrize(
        "value",
        (pytest.param(1.5, id="above bound"), pytest.param(np.nan, id="nan"), pytest.param(-np.inf, id="inf")),
    )
    def test_encode_out_of_range(self, value):
        with pytest.raises(EncodingRangeError):
            encode(np.array([0.0, value]), PARAMS)

    def test_rounding_error_bound(self):
        values = rng(1).generator().uniform(-1, 1, 1000)
        decoded = decode(encode(values, PARAMS), PARAMS, 1)
        assert np.max(np.abs(decoded - values)) <= PARAMS.resolution

    def test_narrow_modulus(self):
        params = FixedPointParams(scale_bits=8, modulus_bits=32, value_bound=4.0, max_summands=3)
        values = np.array([[-3.5, 1.25], [2.0, -4.0], [0.5, 0.125]])
        total = modular_sum([encode(v, params) for v in values], params)
        assert np.all(total < 2**32)
        assert np.allclose(decode(total, params, 3), values.sum(axis=0))

    def test_overflow_is_rejected(self):
        with pytest.raises(InvalidArgumentError):
            FixedPointParams(scale_bits=40, modulus_bits=64, value_bound=1e6, max_summands=100)

    def test_decode_rejects_too_many_summands(self):
        with pytest.raises(InvalidArgumentError):
            decode(np.zeros(1, dtype=np.uint64), PARAMS, 51)


class TestMasks:
    def test_two_clients_antisymmetric(self):
        pair_seeds = provision_pair_seeds([0, 1], 3)
        first, second = make_masks(5, [0, 1], 8, pair_seeds, PARAMS)
        assert np.array_equal((first + second) & PARAMS.mask, np.zeros(8, dtype=np.uint64))
        assert np.any(first != 0)

    @pytest.mark.parametrize("batch_size", (2, 10, 50))
    def test_masks_cancel(self, batch_size):
        ids = list(range(batch_size))
        masks = make_masks(9, ids, 16, provision_pair_seeds(ids, 4), PARAMS)
        assert np.array_equal(modular_sum(masks, PARAMS), np.zeros(16, dtype=np.uint64))

    def test_client_mask_matches_table(self):
        ids = [2, 5, 7]
        pair_seeds = provision_pair_seeds(ids, 8)
        masks = make_masks(1, ids, 4, pair_seeds, PARAMS)
        for client_id, mask in zip(ids, masks):
            assert np.array_equal(client_mask(1, client_id, ids, 4, pair_seeds, PARAMS), mask)

    def test_masks_change_every_round(self):
        pair_seeds = provision_pair_seeds([0, 1], 3)
        assert not np.array_equal(
            make_masks(1, [0, 1], 4, pair_seeds, PARAMS)[0], make_masks(2, [0, 1], 4, pair_seeds, PARAMS)[0]
        )

    def test_masked_share_hides_encoding(self):
        vectors = rng(2).generator().uniform(-1, 1, (100, 4))
        for share, vector in zip(shares_for(vectors, 3), vectors):
            assert not np.array_equal(share.payload, encode(vector, PARAMS))

    @pytest.mark.parametrize(
        ("ids", "error"),
        (
            pytest.param([1], InvalidArgumentError, id="single client"),
            pytest.param([1, 1, 2], InvalidArgumentError, id="duplicate ids"),
        ),
    )
    def test_make_masks_rejects(self, ids, error):
        with pytest.raises(error):
            make_masks(1, ids, 2, provision_pair_seeds(ids, 0), PARAMS)

    def test_missing_seed(self):
        with pytest.raises(ProtocolError):
            client_mask(1, 0, [0, 3], 2, provision_pair_seeds([0, 1], 0), PARAMS)


class TestAggregate:
    def test_known_vectors_masks_off(self):
        vectors = np.array([[0.5, -0.25], [0.125, 0.75], [-1.0, 0.3]])
        shares = [
            mask_share(i, 1, encode(v, PARAMS), np.zeros(2, dtype=np.uint64), PARAMS) for i, v in enumerate(vectors)
        ]
        assert np.max(np.abs(aggregate(shares, PARAMS, 3) - vectors.sum(axis=0))) <= 3 * 2**-21

    @pytest.mark.parametrize("batch_size", (2, 10, 50))
    @pytest.mark.parametrize("dim", (1, 16, 256))
    def test_masked_sum_within_tolerance(self, batch_size, dim):
        vectors = rng(3, batch_size, dim).generator().uniform(-1, 1, (batch_size, dim))
        shares = shares_for(vectors, 7)
        masked = modular_sum([share.payload for share in shares], PARAMS)
        plain = modular_sum([encode(v, PARAMS) for v in vectors], PARAMS)
        assert np.array_equal(masked, plain)
        assert np.max(np.abs(aggregate(shares, PARAMS, batch_size) - vectors.sum(axis=0))) <= batch_size * 2**-21

    def test_round_mismatch(self):
        shares = shares_for(np.zeros((2, 3)), 1)
        stray = MaskedShare(client_id=1, round_id=2, payload=shares[1].payload)
        with pytest.raises(ProtocolError):
            aggregate([shares[0], stray], PARAMS, 2)

    def test_count_mismatch(self):
        with pytest.raises(ProtocolError):
            aggregate(shares_for(np.zeros((2, 3)), 1), PARAMS, 3)

    def test_width_mismatch(self):
        shares = shares_for(np.zeros((2, 3)), 1)
        short = MaskedShare(client_id=1, round_id=1, payload=shares[1].payload[:2])
        with pytest.raises(ProtocolError):
            aggregate([shares[0], short], PARAMS, 2)


class TestWireFormat:
    def test_layout(self):
        share = MaskedShare(client_id=3, round_id=9, payload=np.array([1, 2**64 - 1], dtype=np.uint64))
        data = share.to_bytes()
        assert data[:8] == (9).to_bytes(8, "little")
        assert data[8:16] == (3).to_bytes(8, "little")
        assert data[16:20] == (2).to_bytes(4, "little")
        assert data[20:28] == (1).to_bytes(8, "little")
        assert data[28:] == b"\xff" * 8

    def test_trace_of_several_shares(self):
        shares = shares_for(rng(4).generator().uniform(-1, 1, (3, 5)), 2)
        parsed = read_shares(b"".join(share.to_bytes() for share in shares))
        assert [share.client_id for share in parsed] == [0, 1, 2]
        assert all(np.array_equal(a.payload, b.payload) for a, b in zip(parsed, shares))

    def test_truncated(self):
        data = MaskedShare(client_id=0, round_id=1, payload=np.zeros(2, dtype=np.uint64)).to_bytes()
        with pytest.raises(InvalidArgumentError):
            MaskedShare.from_bytes(data[:-1])

    @pytest.mark.parametrize("tail", (pytest.param(1, id="one byte"), pytest.param(19, id="header less one")))
    def test_trace_with_partial_header(self, tail):
        data = MaskedShare(client_id=0, round_id=1, payload=np.zeros(2, dtype=np.uint64)).to_bytes()
        with pytest.raises(InvalidArgumentError):
            read_shares(data + data[:tail])
