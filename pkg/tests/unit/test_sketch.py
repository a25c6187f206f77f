import numpy as np
import pytest

from dome.exceptions import InvalidArgumentError
from dome.linalg import gram_schmidt_qr, orthonormality_error
from dome.sketch import (
    SketchState,
    identity_sketch,
    init_sketch,
    lift,
    project,
    remove_mean,
    retained_count,
    update_sketch,
)

from .utils import orthonormal, rng


def low_rank_gradient(p, spectrum, step):
    return p @ (np.asarray(spectrum) * rng(100, step).generator().standard_normal(p.shape[1]))


class TestSketchState:
    def test_init_is_orthonormal(self):
        state = init_sketch(16, 4, 0.9, rng(1))
        assert orthonormality_error(state.s) < 1e-10
        assert state.t == 0
        assert state.retained == 0
        assert np.all(state.lam == 0)

    def test_init_is_deterministic(self):
        assert np.array_equal(init_sketch(8, 3, 0.9, rng(2)).s, init_sketch(8, 3, 0.9, rng(2)).s)

    @pytest.mark.parametrize(
        ("d", "k", "q"),
        (
            pytest.param(4, 5, 0.9, id="k above d"),
            pytest.param(4, 0, 0.9, id="k zero"),
            pytest.param(4, 2, 0.0, id="q zero"),
            pytest.param(4, 2, 1.5, id="q above one"),
        ),
    )
    def test_init_rejects(self, d, k, q):
        with pytest.raises(InvalidArgumentError):
            init_sketch(d, k, q, rng(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidArgumentError):
            SketchState(s=2 * np.eye(3), u=np.zeros((3, 3)), lam=np.zeros(3), q=0.9)

    def test_arrays_are_read_only(self):
        state = identity_sketch(3)
        with pytest.raises(ValueError):
            state.s[0, 0] = 5.0


class TestProjectLift:
    def test_identity_round_trip(self):
        state = identity_sketch(5)
        g = np.arange(5.0)
        m_hat = np.full(5, 0.5)
        coords = project(state, remove_mean(g, m_hat)).coords
        assert np.allclose(lift(state, coords, m_hat), g)

    def test_lift_preserves_norm(self):
        state = init_sketch(20, 6, 0.9, rng(4))
        coords = rng(5).generator().standard_normal(6)
        lifted = lift(state, coords, np.zeros(20))
        assert np.linalg.norm(lifted) == pytest.approx(np.linalg.norm(coords), rel=1e-12)

    def test_projection_of_span_vector_is_exact(self):
        state = init_sketch(10, 3, 0.9, rng(6))
        g = state.s @ np.array([1.0, -2.0, 0.5])
        assert np.allclose(lift(state, project(state, g).coords, np.zeros(10)), g, atol=1e-12)

    def test_lift_is_adjoint_of_project(self):
        state = init_sketch(15, 4, 0.9, rng(31))
        x = rng(32).generator().standard_normal(4)
        y = rng(33).generator().standard_normal(15)
        assert lift(state, x, np.zeros(15)) @ y == pytest.approx(x @ project(state, y).coords, rel=1e-12)

    @pytest.mark.parametrize(
        "call",
        (
            pytest.param(lambda s: project(s, np.zeros(3)), id="project"),
            pytest.param(lambda s: lift(s, np.zeros(3), np.zeros(4)), id="lift coords"),
            pytest.param(lambda s: remove_mean(np.zeros(4), np.zeros(3)), id="remove mean"),
        ),
    )
    def test_shape_errors(self, call):
        with pytest.raises(InvalidArgumentError):
            call(identity_sketch(4))


class TestRetainedCount:
    @pytest.mark.parametrize(
        ("lam", "q", "expected"),
        (
            pytest.param([3.0, 1.0, 0.0], 0.5, 1, id="dominant"),
            pytest.param([3.0, 1.0, 0.0], 0.95, 2, id="two"),
            pytest.param([3.0, 1.0, 0.0], 1.0, 3, id="q one keeps all"),
            pytest.param([0.0, 0.0], 0.9, 0, id="no energy"),
            pytest.param([1.0, 1.0, 1.0, 1.0], 0.5, 2, id="flat exact boundary"),
        ),
    )
    def test_retained_count(self, lam, q, expected):
        assert retained_count(np.array(lam), q) == expected


class TestUpdateSketch:
    def test_first_step_rank_one(self):
        state = init_sketch(12, 4, 0.99, rng(7))
        g = rng(8).generator().standard_normal(12)
        new = update_sketch(state, g, rng(9))
        assert new.t == 1
        assert new.retained == 1
        direction = g / np.linalg.norm(g)
        assert abs(new.s[:, 0] @ direction) == pytest.approx(1.0, abs=1e-10)
        assert orthonormality_error(new.s) < 1e-10

    def test_exploration_orthogonal_to_retained(self):
        p = orthonormal(16, 2, seed=1)
        state = init_sketch(16, 5, 0.99, rng(10))
        for step in range(20):
            state = update_sketch(state, low_rank_gradient(p, [3.0, 1.0], step), rng(11, step))
        assert 0 < state.retained < 5
        overlap = state.retained_columns.T @ state.s[:, state.retained :]
        assert np.max(np.abs(overlap)) < 1e-10

    def test_tracks_planted_subspace(self):
        p = orthonormal(24, 2, seed=2)
        state = init_sketch(24, 4, 0.99, rng(12))
        for step in range(60):
            state = update_sketch(state, low_rank_gradient(p, [4.0, 2.0], step), rng(13, step))
        residual = p - state.s @ (state.s.T @ p)
        assert np.linalg.norm(residual) < 1e-6

    def test_singular_values_sorted(self):
        state = init_sketch(10, 4, 1.0, rng(14))
        for step in range(10):
            state = update_sketch(state, rng(15, step).generator().standard_normal(10), rng(16, step))
        assert np.all(np.diff(state.lam) <= 0)
        assert state.retained == 4

    def test_zero_gradient_keeps_spectrum(self):
        state = init_sketch(10, 3, 0.99, rng(17))
        state = update_sketch(state, rng(18).generator().standard_normal(10), rng(19))
        after = update_sketch(state, np.zeros(10), rng(20))
        assert np.array_equal(after.lam, state.lam)
        assert after.t == state.t + 1
        assert orthonormality_error(after.s) < 1e-10

    def test_zero_first_gradient_gives_random_sketch(self):
        state = init_sketch(10, 3, 0.99, rng(21))
        after = update_sketch(state, np.zeros(10), rng(22))
        assert after.retained == 0
        assert orthonormality_error(after.s) < 1e-10

    def test_orthonormal_over_long_stream(self):
        state = init_sketch(32, 6, 0.9, rng(23))
        worst = 0.0
        for step in range(200):
            state = update_sketch(state, rng(24, step).generator().standard_normal(32), rng(25, step))
            worst = max(worst, orthonormality_error(state.s))
        assert worst < 1e-8

    def test_deterministic(self):
        g = rng(26).generator().standard_normal(9)
        first = update_sketch(init_sketch(9, 3, 0.9, rng(27)), g, rng(28))
        second = update_sketch(init_sketch(9, 3, 0.9, rng(27)), g, rng(28))
        assert np.array_equal(first.s, second.s)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            update_sketch(init_sketch(4, 2, 0.9, rng(29)), np.array([1.0, np.inf, 0.0, 0.0]), rng(30))

    def test_rank_one_by_hand(self):
        state = SketchState(s=np.array([[1.0], [0.0]]), u=np.zeros((2, 1)), lam=np.zeros(1), q=0.9)
        new = update_sketch(state, np.array([1.0, 0.0]), rng(34))
        assert np.allclose(new.u, [[1.0], [0.0]])
        assert np.allclose(new.lam, [1.0])
        assert new.retained == 1
        assert np.allclose(new.s, [[1.0], [0.0]])

    def test_prior_order_does_not_matter(self):
        u = orthonormal(10, 3, seed=3)
        lam = np.array([3.0, 2.0, 0.5])
        shuffle = [2, 0, 1]
        ordered = SketchState(s=u, u=u, lam=lam, q=0.9, t=1, retained=3)
        shuffled = SketchState(s=u, u=u[:, shuffle], lam=lam[shuffle], q=0.9, t=1, retained=3)
        g = rng(35).generator().standard_normal(10)
        first = update_sketch(ordered, g, rng(36))
        second = update_sketch(shuffled, g, rng(36))
        assert first.retained == second.retained
        assert np.allclose(first.lam, second.lam, atol=1e-12)
        assert np.allclose(first.u, second.u, atol=1e-12)
        assert np.allclose(first.s, second.s, atol=1e-12)

    def test_spectrum_is_column_norms_of_r(self):
        u = orthonormal(12, 4, seed=4)
        lam = np.array([4.0, 2.0, 1.0, 0.5])
        state = SketchState(s=u, u=u, lam=lam, q=0.9, t=1, retained=4)
        g = rng(37).generator().standard_normal(12)
        _, r = gram_schmidt_qr(u * lam + np.outer(g, g @ u))
        norms = np.sort(np.linalg.norm(r, axis=0))[::-1]
        assert np.allclose(update_sketch(state, g, rng(38)).lam, norms, rtol=1e-12)

    @pytest.mark.parametrize("q", (0.5, 0.8, 0.9, 0.99))
    def test_retained_count_is_minimal(self, q):
        state = init_sketch(20, 6, q, rng(39))
        for step in range(8):
            state = update_sketch(state, rng(40, step).generator().standard_normal(20), rng(41, step))
        energy = np.cumsum(state.lam**2)
        r = state.retained
        assert 1 <= r <= 6
        assert energy[r - 1] >= q * energy[-1]
        if r > 1:
            assert energy[r - 2] < q * energy[-1]
