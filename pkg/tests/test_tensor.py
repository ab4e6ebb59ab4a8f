import numpy as np
import pytest

from conftest import assert_grad_matches, tape_gradient
from hybridse import tensor as T
from hybridse.tensor import (
    ComplexTensor,
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    clamp,
    concat,
    div,
    elementwise,
    finite_difference_grad,
    frame_signal,
    hypot_,
    log10_,
    magnitude,
    matmul,
    mean_all,
    mul,
    overlap_add,
    reshape4,
    scale,
    slice_axis,
    sqrt_,
    sub,
    sum_all,
)


class TestCreation:
    def test_left_pads_to_four_axes(self):
        t = Tensor([1.0, 2.0, 3.0])
        assert t.shape == (1, 1, 1, 3)

    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf])

    def test_rejects_rank_5(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_data_is_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 5.0

    def test_debug_check_catches_overflowing_op(self):
        big = Tensor(np.full((1, 1, 1, 2), 1e308))
        with pytest.raises(FloatingPointError):
            mul(big, big)


class TestElementwise:
    def test_add(self):
        out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data.ravel(), [4.0, 6.0])

    def test_mul_by_zero_and_its_gradient(self):
        x = np.array([1.5, -2.0, 3.0])
        out = mul(Tensor(x), 0.0)
        assert np.all(out.data == 0.0)
        g = tape_gradient(lambda t: sum_all(mul(t, 0.0)), x)
        assert np.all(g == 0.0)

    def test_square_derivative_at_3(self):
        g = tape_gradient(lambda t: sum_all(mul(t, t)), np.array([3.0]))
        assert abs(g.ravel()[0] - 6.0) < 1e-12

    def test_div_rejects_zero_denominator(self):
        with pytest.raises(ZeroDivisionError):
            div(Tensor([1.0]), Tensor([0.0]))

    def test_log10_rejects_non_positive(self):
        with pytest.raises(ValueError):
            log10_(Tensor([0.0]))
        with pytest.raises(ValueError):
            log10_(Tensor([-1.0]))

    def test_sqrt_rejects_negative(self):
        with pytest.raises(ValueError):
            sqrt_(Tensor([-1.0]))

    def test_clamp_values_and_gradient_mask(self):
        x = np.array([-2.0, 0.5, 3.0])
        out = clamp(Tensor(x), 0.0, 1.0)
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.5, 1.0])
        g = tape_gradient(lambda t: sum_all(clamp(t, 0.0, 1.0)), x)
        np.testing.assert_array_equal(g.ravel(), [0.0, 1.0, 0.0])

    def test_abs_subgradient_zero_at_origin(self):
        g = tape_gradient(lambda t: sum_all(T.abs_(t)), np.array([0.0, -2.0, 2.0]))
        np.testing.assert_array_equal(g.ravel(), [0.0, -1.0, 1.0])

    def test_hypot_subgradient_zero_at_joint_origin(self):
        a = np.array([0.0, 3.0])
        g = tape_gradient(
            lambda t: sum_all(hypot_(t, Tensor(np.array([0.0, 4.0])))), a
        )
        np.testing.assert_allclose(g.ravel(), [0.0, 0.6])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((1, 1, 2, 3))), Tensor(np.zeros((1, 1, 3, 2))))

    def test_dispatcher_covers_the_op_set(self):
        x = Tensor([4.0])
        assert elementwise("sqrt", x).item() == 2.0
        assert elementwise("scale", x, 0.5).item() == 2.0
        assert elementwise("clamp", x, (0.0, 1.0)).item() == 1.0
        assert elementwise("add", x, x).item() == 8.0
        with pytest.raises(ValueError):
            elementwise("pow", x, x)


class TestBroadcast:
    @pytest.mark.parametrize("seed", range(20))
    def test_broadcast_equals_materialized_tile(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(1, 3, 1, 5))
        tiled = np.broadcast_to(b, a.shape).copy()
        for op in (add, sub, mul):
            lhs = op(Tensor(a), Tensor(b)).data
            rhs = op(Tensor(a), Tensor(tiled)).data
            np.testing.assert_array_equal(lhs, rhs)

    @pytest.mark.parametrize("seed", range(10))
    def test_broadcast_gradients(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 1, 3, 1))
        b = rng.normal(size=(1, 2, 3, 4))
        assert_grad_matches(lambda t: sum_all(mul(t, Tensor(b))), a)
        assert_grad_matches(lambda t: sum_all(add(mul(t, t), Tensor(b))), a)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(m))
        np.testing.assert_array_equal(out.data[0, 0], m)

    def test_row_times_column(self):
        out = matmul(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[2.0], [3.0]])))
        assert out.data.ravel().tolist() == [2.0]

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        g = tape_gradient(lambda t: sum_all(matmul(t, Tensor(b))), a)
        expected = np.ones((3, 5)) @ b.T
        np.testing.assert_allclose(g[0, 0], expected, atol=1e-12)
        assert_grad_matches(lambda t: sum_all(matmul(t, Tensor(b))), a)

    @pytest.mark.parametrize("seed", range(5))
    def test_batched_broadcast_grad(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(1, 1, 3, 4))
        b = rng.normal(size=(2, 2, 4, 2))
        assert_grad_matches(lambda t: sum_all(matmul(t, Tensor(b))), a)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        g = tape_gradient(lambda t: sum_all(t), np.zeros((2, 1, 3, 2)))
        assert np.all(g == 1.0)

    def test_untracked_root_gives_empty_map(self):
        assert backward(Tensor([1.0])) == {}

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.zeros((1, 1, 2, 1)))
        with pytest.raises(GradientError):
            tape.backward(x)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(1, 1, 4, 4)))
        y = sum_all(mul(T.tanh_(matmul(x, x)), x))
        g1 = tape.backward(y)[x.node].data
        g2 = tape.backward(y)[x.node].data
        assert np.array_equal(g1, g2)

    def test_mixing_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf([1.0])
        b = t2.leaf([2.0])
        with pytest.raises(ValueError):
            add(a, b)

    def test_gradients_cover_intermediates(self):
        tape = Tape()
        x = tape.leaf([2.0])
        y = mul(x, x)
        z = sum_all(mul(y, x))
        grads = tape.backward(z)
        assert grads[y.node].item() == pytest.approx(2.0)
        assert grads[x.node].item() == pytest.approx(12.0)


class TestStructureOps:
    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(1, 1, 3, 2))
        b = rng.normal(size=(1, 1, 5, 2))
        cat = concat([Tensor(a), Tensor(b)], 2)
        np.testing.assert_array_equal(slice_axis(cat, 2, 0, 3).data, a)
        np.testing.assert_array_equal(slice_axis(cat, 2, 3, 8).data, b)

    def test_concat_gradient(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(1, 1, 3, 2))
        other = Tensor(rng.normal(size=(1, 1, 4, 2)))
        w = Tensor(rng.normal(size=(1, 1, 7, 2)))
        assert_grad_matches(lambda t: sum_all(mul(concat([t, other], 2), w)), a)

    def test_slice_gradient_scatters(self):
        x = np.arange(6.0).reshape(1, 1, 6, 1)
        g = tape_gradient(lambda t: sum_all(slice_axis(t, 2, 2, 4)), x)
        np.testing.assert_array_equal(g.ravel(), [0, 0, 1, 1, 0, 0])

    def test_reshape_preserves_order_and_grad(self):
        x = np.arange(12.0).reshape(1, 1, 3, 4)
        out = reshape4(Tensor(x), (1, 3, 4, 1))
        np.testing.assert_array_equal(out.data.ravel(), x.ravel())
        assert_grad_matches(
            lambda t: sum_all(mul(reshape4(t, (1, 3, 4, 1)), reshape4(t, (1, 3, 4, 1)))), x
        )

    def test_frame_overlap_add_are_adjoint(self):
        rng = np.random.default_rng(5)
        n, size, hop = 40, 8, 4
        t_frames = 1 + (n - size) // hop
        x = rng.normal(size=n)
        y = rng.normal(size=(1, 1, size, t_frames))
        fx = frame_signal(Tensor(x.reshape(1, 1, 1, n)), size, hop)
        oy = overlap_add(Tensor(y), hop, length=n)
        lhs = float((fx.data * y).sum())
        rhs = float((x * oy.data.ravel()).sum())
        assert abs(lhs - rhs) < 1e-12

    def test_frame_too_short(self):
        with pytest.raises(ShapeError):
            frame_signal(Tensor(np.zeros((1, 1, 1, 4))), 8, 4)


class TestFiniteDifferences:
    def test_square_at_3(self):
        fd = finite_difference_grad(lambda t: sum_all(mul(t, t)), Tensor([3.0]), eps=1e-4)
        assert abs(fd.item() - 6.0) < 1e-6

    def test_constant_function_gives_zeros(self):
        fd = finite_difference_grad(lambda t: 1.25, Tensor(np.zeros((1, 1, 2, 2))))
        assert np.all(fd.data == 0.0)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_difference_grad(lambda t: 0.0, Tensor([1.0]), eps=0.0)


def _random_case(seed):
    rng = np.random.default_rng(seed)
    return rng, rng.uniform(-2.0, 2.0, size=(1, 2, 3, 2))


@pytest.mark.parametrize("seed", range(100))
def test_gradient_suite_over_primitives(seed):
    """Every differentiable primitive agrees with central differences."""
    rng, x = _random_case(seed)
    w = Tensor(rng.normal(size=(1, 2, 3, 2)))
    pos = np.abs(x) + 0.5

    assert_grad_matches(lambda t: sum_all(mul(add(t, w), sub(t, w))), x)
    assert_grad_matches(lambda t: sum_all(div(t, Tensor(pos))), x)
    assert_grad_matches(lambda t: sum_all(sqrt_(add(mul(t, t), 0.3))), x)
    assert_grad_matches(lambda t: sum_all(log10_(add(mul(t, t), 0.5))), x)
    assert_grad_matches(lambda t: sum_all(T.exp10_(scale(t, 0.3))), x)
    assert_grad_matches(lambda t: sum_all(T.tanh_(t)), x)
    assert_grad_matches(lambda t: sum_all(T.sigmoid(t)), x)
    # keep coordinates away from the ReLU kink, central differences straddle it
    x_off = x + 0.1 * np.sign(x)
    assert_grad_matches(lambda t: sum_all(mul(T.relu(t), w)), x_off)
    assert_grad_matches(lambda t: sum_all(hypot_(t, w)), x)
    assert_grad_matches(lambda t: mean_all(mul(t, mul(t, t))), x)


class TestComplexPairs:
    def test_shape_agreement_enforced(self):
        with pytest.raises(ShapeError):
            ComplexTensor(Tensor(np.zeros((1, 1, 2, 1))), Tensor(np.zeros((1, 1, 3, 1))))

    def test_magnitude_pythagorean(self):
        z = ComplexTensor(Tensor([3.0]), Tensor([4.0]))
        assert magnitude(z).item() == pytest.approx(5.0)

    def test_cmul_matches_numpy(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 1, 4, 3)) + 1j * rng.normal(size=(1, 1, 4, 3))
        b = rng.normal(size=(1, 1, 4, 3)) + 1j * rng.normal(size=(1, 1, 4, 3))
        za, zb = T.complex_from_numpy(a), T.complex_from_numpy(b)
        np.testing.assert_allclose(T.cmul(za, zb).to_numpy(), a * b, atol=1e-12)
