import numpy as np
import pytest

from conftest import assert_grad_matches
from hybridse import backend
from hybridse.layers import (
    ComplexLayer,
    LayerParams,
    complex_activation,
    complex_gru_forward,
    complex_lift,
    complex_param_count,
    conv_f_forward,
    conv_out_extent,
    convT_f_forward,
    crelu,
    ctanh,
    gru_forward,
    layer_forward,
    linear_forward,
    make_complex,
    make_conv_f,
    make_convT_f,
    make_gru,
    make_linear,
    param_count,
    real_activation,
    stored_scalars,
)
from hybridse.tensor import (
    ComplexTensor,
    ShapeError,
    Tape,
    Tensor,
    complex_from_numpy,
    finite_difference_grad,
    magnitude,
    mul,
    sum_all,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _loss(y):
    return sum_all(mul(y, y))


def _grad_check_layer(p, x, fwd, check_params=True):
    """Gradient check w.r.t. the input and every parameter array."""
    base = {name: Tensor(a) for name, a in p.arrays.items()}
    assert_grad_matches(lambda t: _loss(fwd(p, t, base)), x)
    if not check_params:
        return
    for name in p.arrays:
        x_t = Tensor(x)

        def f(t, name=name):
            pt = dict(base)
            pt[name] = t
            return _loss(fwd(p, x_t, pt))

        arr = base[name].data

        def tape_f(arr_in, name=name):
            tape = Tape()
            leaf = tape.leaf(arr_in)
            pt = dict(base)
            pt[name] = leaf
            val = _loss(fwd(p, x_t, pt))
            return tape.backward(val)[leaf.node].data

        ana = tape_f(arr)
        fd = finite_difference_grad(f, Tensor(arr)).data
        big = np.abs(fd) >= 1e-2
        if np.any(big):
            rel = np.abs(ana[big] - fd[big]) / np.abs(fd[big])
            assert rel.max() < 1e-4, f"{name}: rel {rel.max():.2e}"
        if np.any(~big):
            assert np.abs(ana[~big] - fd[~big]).max() < 1e-6, name


class TestLinear:
    def test_identity_weight(self):
        p = make_linear(3, 3, _rng())
        p.arrays["weight"] = np.eye(3)
        p.arrays["bias"] = np.zeros(3)
        x = _rng(1).normal(size=(2, 1, 3, 4))
        out = linear_forward(p, Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_zero_weight_gives_bias(self):
        p = make_linear(3, 2, _rng())
        p.arrays["weight"] = np.zeros((2, 3))
        p.arrays["bias"] = np.array([0.5, -1.5])
        out = linear_forward(p, Tensor(np.ones((1, 1, 3, 5))))
        assert np.all(out.data[0, 0, 0] == 0.5)
        assert np.all(out.data[0, 0, 1] == -1.5)

    def test_shape_mismatch(self):
        p = make_linear(3, 2, _rng())
        with pytest.raises(ShapeError):
            linear_forward(p, Tensor(np.zeros((1, 1, 4, 2))))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        p = make_linear(3, 4, _rng(seed))
        x = _rng(seed + 100).normal(size=(2, 1, 3, 2))
        _grad_check_layer(p, x, linear_forward)


@pytest.fixture(params=sorted(backend.available()))
def kernel_backend(request):
    with backend.use(request.param):
        yield request.param


class TestConvF:
    def test_pointwise_identity(self, kernel_backend):
        p = make_conv_f(1, 1, 1, 1, 0, _rng())
        p.arrays["weight"] = np.ones((1, 1, 1))
        p.arrays["bias"] = np.zeros(1)
        x = _rng(2).normal(size=(1, 1, 6, 3))
        np.testing.assert_allclose(conv_f_forward(p, Tensor(x)).data, x, atol=1e-15)

    def test_hand_convolution(self, kernel_backend):
        p = make_conv_f(1, 1, 3, 1, 0, _rng())
        p.arrays["weight"] = np.ones((1, 1, 3))
        p.arrays["bias"] = np.zeros(1)
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1)
        out = conv_f_forward(p, Tensor(x))
        np.testing.assert_allclose(out.data.ravel(), [6.0, 9.0])

    def test_shape_law_over_all_extents(self):
        # stride 2 with the shipped kernel geometry halves every even extent
        k, s, pad = 8, 2, 3
        for f in range(4, 261):
            try:
                fo = conv_out_extent(f, k, s, pad)
            except ShapeError:
                assert f + 2 * pad < k
                continue
            assert fo == (f + 2 * pad - k) // s + 1
            if f % 2 == 0:
                assert fo == f // 2
        p = make_conv_f(2, 3, k, s, pad, _rng())
        x = _rng(0).normal(size=(1, 2, 20, 2))
        assert conv_f_forward(p, Tensor(x)).shape == (1, 3, 10, 2)

    def test_too_small_extent_rejected(self):
        p = make_conv_f(1, 1, 8, 2, 0, _rng())
        with pytest.raises(ShapeError):
            conv_f_forward(p, Tensor(np.zeros((1, 1, 4, 1))))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, kernel_backend, seed):
        p = make_conv_f(2, 3, 3, 2, 1, _rng(seed))
        x = _rng(seed + 50).normal(size=(2, 2, 7, 2))
        _grad_check_layer(p, x, conv_f_forward)


class TestConvTF:
    def test_pointwise_identity(self, kernel_backend):
        p = make_convT_f(1, 1, 1, 1, 0, 0, _rng())
        p.arrays["weight"] = np.ones((1, 1, 1))
        p.arrays["bias"] = np.zeros(1)
        x = _rng(3).normal(size=(1, 1, 6, 3))
        np.testing.assert_allclose(convT_f_forward(p, Tensor(x)).data, x, atol=1e-15)

    @pytest.mark.parametrize("seed", range(8))
    def test_adjoint_of_conv(self, kernel_backend, seed):
        rng = _rng(seed)
        k, s, pad = rng.choice([3, 5, 8]), rng.choice([1, 2]), rng.choice([0, 1, 3])
        ci, co, f = 2, 3, 16
        fo = conv_out_extent(f, k, s, pad)
        w = rng.normal(size=(co, ci, k))
        x = rng.normal(size=(1, ci, f, 1))
        y = rng.normal(size=(1, co, fo, 1))

        conv = make_conv_f(ci, co, int(k), int(s), int(pad), rng)
        conv.arrays["weight"] = w
        conv.arrays["bias"] = np.zeros(co)
        out_pad = f - ((fo - 1) * s - 2 * pad + k)
        convt = make_convT_f(co, ci, int(k), int(s), int(pad), int(out_pad), rng)
        convt.arrays["weight"] = w
        convt.arrays["bias"] = np.zeros(ci)

        lhs = float((conv_f_forward(conv, Tensor(x)).data * y).sum())
        rhs = float((x * convT_f_forward(convt, Tensor(y)).data).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_encoder_decoder_restores_extent(self, kernel_backend):
        k, s, pad = 8, 2, 3
        for f0 in (258, 129, 33):
            chain = [f0]
            for _ in range(4):
                chain.append(conv_out_extent(chain[-1], k, s, pad))
            f = chain[-1]
            x = Tensor(_rng(0).normal(size=(1, 1, f, 2)))
            for target in reversed(chain[:-1]):
                base = (f - 1) * s - 2 * pad + k
                p = make_convT_f(1, 1, k, s, pad, target - base, _rng(1))
                x = convT_f_forward(p, x)
                f = x.shape[2]
                assert f == target
            assert f == f0

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, kernel_backend, seed):
        p = make_convT_f(3, 2, 3, 2, 1, 1, _rng(seed))
        x = _rng(seed + 60).normal(size=(2, 3, 4, 2))
        _grad_check_layer(p, x, convT_f_forward)


class TestGRU:
    def test_zero_weights_give_zero_output(self):
        p = make_gru(3, 4, _rng())
        for name in p.arrays:
            p.arrays[name] = np.zeros_like(p.arrays[name])
        out = gru_forward(p, Tensor(_rng(1).normal(size=(2, 1, 3, 5))))
        assert np.all(out.data == 0.0)

    def test_sequence_of_one_equals_single_cell(self):
        p = make_gru(3, 4, _rng(5))
        x = _rng(6).normal(size=(1, 1, 3, 4))
        full = gru_forward(p, Tensor(x))
        first = gru_forward(p, Tensor(x[:, :, :, :1]))
        np.testing.assert_allclose(full.data[..., :1], first.data, atol=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_over_three_steps(self, seed):
        p = make_gru(2, 3, _rng(seed))
        x = _rng(seed + 70).normal(size=(1, 1, 2, 3))
        _grad_check_layer(p, x, gru_forward)


class TestComplexLift:
    def test_scalar_complex_multiply(self):
        rng = _rng(0)
        l1 = make_linear(1, 1, rng)
        l1.arrays["weight"] = np.array([[2.0]])
        l1.arrays["bias"] = np.zeros(1)
        l2 = make_linear(1, 1, rng)
        l2.arrays["weight"] = np.array([[3.0]])
        l2.arrays["bias"] = np.zeros(1)
        z = ComplexTensor(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1))))
        out = complex_lift(ComplexLayer(l1, l2), z)
        assert out.re.item() == pytest.approx(-1.0)
        assert out.im.item() == pytest.approx(5.0)

    def test_zero_second_half_acts_elementwise(self):
        rng = _rng(1)
        l1 = make_linear(4, 4, rng)
        l2 = make_linear(4, 4, rng)
        l2.arrays["weight"] = np.zeros((4, 4))
        l2.arrays["bias"] = np.zeros(4)
        z = complex_from_numpy(rng.normal(size=(1, 1, 4, 2)) + 1j * rng.normal(size=(1, 1, 4, 2)))
        out = complex_lift(ComplexLayer(l1, l2), z)
        np.testing.assert_allclose(out.re.data, linear_forward(l1, z.re).data, atol=1e-14)
        np.testing.assert_allclose(out.im.data, linear_forward(l1, z.im).data, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_complex_matrix_product(self, seed):
        rng = _rng(seed)
        l1 = make_linear(8, 8, rng)
        l1.arrays["bias"] = np.zeros(8)
        l2 = make_linear(8, 8, rng)
        l2.arrays["bias"] = np.zeros(8)
        z_np = rng.normal(size=(1, 1, 8, 8)) + 1j * rng.normal(size=(1, 1, 8, 8))
        out = complex_lift(ComplexLayer(l1, l2), complex_from_numpy(z_np))
        w_c = l1.arrays["weight"] + 1j * l2.arrays["weight"]
        expected = np.einsum("ok,bckn->bcon", w_c, z_np)
        assert np.abs(out.to_numpy() - expected).max() < 1e-10

    def test_mismatched_halves_rejected(self):
        with pytest.raises(ShapeError):
            ComplexLayer(make_linear(3, 4, _rng()), make_linear(4, 3, _rng()))
        with pytest.raises(ShapeError):
            ComplexLayer(make_linear(3, 4, _rng()), make_gru(3, 4, _rng()))


class TestComplexGRU:
    def test_zero_weights_give_zero_output(self):
        cl = make_complex(make_gru, 3, 4, rng=_rng(0))
        for half in (cl.l1, cl.l2):
            for name in half.arrays:
                half.arrays[name] = np.zeros_like(half.arrays[name])
        rng = _rng(1)
        z = complex_from_numpy(rng.normal(size=(1, 1, 3, 4)) + 1j * rng.normal(size=(1, 1, 3, 4)))
        out = complex_gru_forward(cl, z)
        assert np.all(out.re.data == 0.0)
        assert np.all(out.im.data == 0.0)

    @pytest.mark.parametrize("seed", range(2))
    def test_gradients_wrt_both_parts(self, seed):
        cl = make_complex(make_gru, 2, 3, rng=_rng(seed))
        rng = _rng(seed + 10)
        re = rng.normal(size=(1, 1, 2, 2))
        im = rng.normal(size=(1, 1, 2, 2))

        def f_re(t):
            out = complex_gru_forward(cl, ComplexTensor(t, Tensor(im)))
            return sum_all(mul(out.re, out.re)) if seed % 2 == 0 else sum_all(mul(out.im, out.im))

        def f_im(t):
            out = complex_gru_forward(cl, ComplexTensor(Tensor(re), t))
            return sum_all(mul(out.re, out.re))

        assert_grad_matches(f_re, re)
        assert_grad_matches(f_im, im)


class TestActivations:
    def test_real_values(self):
        x = Tensor([-1.0, 2.0, 0.0, 1.0])
        np.testing.assert_array_equal(
            real_activation("relu", x).data.ravel(), [0.0, 2.0, 0.0, 1.0]
        )
        assert real_activation("sigmoid", Tensor([0.0])).item() == pytest.approx(0.5)
        assert real_activation("tanh", Tensor([1.0])).item() == pytest.approx(0.76159, abs=1e-5)

    def test_crelu_at_zero_and_at_100(self):
        z0 = ComplexTensor(Tensor([0.0]), Tensor([0.0]))
        out = crelu(z0)
        assert out.re.item() == 0.0 and out.im.item() == 0.0
        z = ComplexTensor(Tensor([100.0]), Tensor([0.0]))
        assert crelu(z).re.item() == pytest.approx(50.0 * (1.0 + 1.0 / 100.01), rel=1e-12)

    def test_crelu_bound_and_asymptote(self):
        mags = np.logspace(-3, 3, 400)
        phases = np.linspace(0.0, 2 * np.pi, 7)
        for ph in phases:
            z = ComplexTensor(
                Tensor(mags * np.cos(ph)), Tensor(mags * np.sin(ph))
            )
            out_mag = magnitude(crelu(z)).data.ravel()
            assert np.all(out_mag <= mags / 2.0 * (1.0 + 1.0 / 0.01) + 1e-12)
        big = ComplexTensor(Tensor([1e6]), Tensor([0.0]))
        assert magnitude(crelu(big)).item() / 1e6 == pytest.approx(0.5, abs=1e-4)

    def test_crelu_corrected_matches_relu_on_reals(self):
        x = np.linspace(-5.0, 5.0, 101)
        z = ComplexTensor(Tensor(x), Tensor(np.zeros_like(x)))
        out = crelu(z, variant="corrected").re.data.ravel()
        relu_x = np.maximum(x, 0.0)
        assert np.abs(out - relu_x).max() < 0.26  # 0.01-softened kink

    def test_ctanh_values_and_bound(self):
        z0 = ComplexTensor(Tensor([0.0]), Tensor([0.0]))
        assert ctanh(z0).re.item() == 0.0
        z1 = ComplexTensor(Tensor([1.0]), Tensor([0.0]))
        assert ctanh(z1).re.item() == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-12)
        rng = _rng(4)
        z = complex_from_numpy(
            rng.normal(scale=10.0, size=(1, 1, 50, 2))
            + 1j * rng.normal(scale=10.0, size=(1, 1, 50, 2))
        )
        assert np.all(magnitude(ctanh(z)).data < 1.0)

    def test_ctanh_tracks_tanh_on_reals(self):
        x = np.arange(-10.0, 10.0, 1e-3)
        approx = x / np.sqrt(x * x + 1.0)
        gap = np.abs(approx - np.tanh(x)).max()
        assert gap < 0.08  # grid-scan bound, frozen

    def test_at_most_linear_growth(self):
        rng = _rng(9)
        mags = np.concatenate([np.logspace(0.01, 3, 200)])
        z = ComplexTensor(
            Tensor(mags * np.cos(1.3)), Tensor(mags * np.sin(1.3))
        )
        for out in (crelu(z), crelu(z, "corrected"), ctanh(z)):
            assert np.all(magnitude(out).data.ravel() <= mags + 1.0)

    def test_complex_activation_dispatch(self):
        z = ComplexTensor(Tensor([1.0]), Tensor([1.0]))
        assert complex_activation("none", z) is z
        with pytest.raises(ValueError):
            complex_activation("relu", z)

    @pytest.mark.parametrize("seed", range(5))
    def test_activation_gradients(self, seed):
        rng = _rng(seed)
        re = rng.uniform(-2.0, 2.0, size=(1, 1, 3, 2))
        im = rng.uniform(-2.0, 2.0, size=(1, 1, 3, 2))

        def make_f(act, part):
            def f(t):
                z = ComplexTensor(t, Tensor(im)) if part == "re" else ComplexTensor(Tensor(re), t)
                out = act(z)
                return sum_all(mul(out.re, out.re)) if part == "re" else sum_all(mul(out.im, out.im))

            return f

        for act in (lambda z: crelu(z), lambda z: crelu(z, "corrected"), ctanh):
            assert_grad_matches(make_f(act, "re"), re)
            assert_grad_matches(make_f(act, "im"), im)

    def test_ctanh_backward_matches_fd_oracle(self):
        rng = _rng(11)
        x = rng.uniform(-2.0, 2.0, size=(1, 1, 4, 3))
        im = Tensor(rng.uniform(-2.0, 2.0, size=(1, 1, 4, 3)))
        assert_grad_matches(lambda t: sum_all(ctanh(ComplexTensor(t, im)).re), x)


class TestParamCounts:
    @pytest.mark.parametrize(
        "factory,args,expected",
        [
            (make_linear, (10, 20), 10 * 20 + 20),
            (make_conv_f, (3, 5, 7, 2, 3), 3 * 5 * 7 + 5),
            (make_convT_f, (5, 3, 7, 2, 3, 1), 5 * 3 * 7 + 3),
            (make_gru, (6, 4), 3 * (6 * 4 + 4 * 4 + 2 * 4)),
        ],
    )
    def test_formula_matches_stored_scalars(self, factory, args, expected):
        p = factory(*args, _rng(0))
        assert param_count(p) == expected
        assert stored_scalars(p) == expected

    def test_complex_layer_doubles(self):
        cl = make_complex(make_linear, 10, 20, rng=_rng(0))
        assert complex_param_count(cl) == 2 * (10 * 20 + 20)
        assert stored_scalars(cl.l1) + stored_scalars(cl.l2) == complex_param_count(cl)
