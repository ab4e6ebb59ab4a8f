"""Neural network layers: Linear, frequency-axis Conv2D and its transpose,
GRU, their complex counterparts, and the activation set.

A complex layer is always a pair of equally shaped real layers combined by
the complex-multiplication pattern

    out = l1(re) - l2(im) + i * (l1(im) + l2(re)),

which costs four real applications and twice the parameters of one real
layer. Convolutions act on the frequency axis only (kernel time extent 1),
keeping every layer time-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import backend, counting
from .tensor import (
    ComplexTensor,
    ShapeError,
    Tensor,
    add,
    apply_op,
    cadd,
    cmul,
    concat,
    cscale,
    div,
    hypot_,
    matmul,
    mul,
    relu as relu_op,
    reshape4,
    scale,
    sigmoid as sigmoid_op,
    slice_axis,
    sqrt_,
    sub,
    tanh_ as tanh_op,
)

KINDS = ("linear", "conv_f", "convT_f", "gru")


@dataclass
class LayerParams:
    """One real layer: kind, parameter arrays, and geometry hyperparameters."""

    kind: str
    arrays: dict
    in_size: int
    out_size: int
    kernel_f: int = 0
    stride_f: int = 1
    pad_f: int = 0
    out_pad_f: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "convT_f" and self.out_pad_f > self.pad_f:
            raise ShapeError("transposed conv needs out_pad <= pad")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def make_linear(in_dim: int, out_dim: int, rng: np.random.Generator) -> LayerParams:
    arrays = {
        "weight": _uniform(rng, (out_dim, in_dim), in_dim),
        "bias": _uniform(rng, (out_dim,), in_dim),
    }
    return LayerParams("linear", arrays, in_dim, out_dim)


def make_conv_f(
    in_ch: int,
    out_ch: int,
    kernel_f: int,
    stride_f: int,
    pad_f: int,
    rng: np.random.Generator,
) -> LayerParams:
    fan = in_ch * kernel_f
    arrays = {
        "weight": _uniform(rng, (out_ch, in_ch, kernel_f), fan),
        "bias": _uniform(rng, (out_ch,), fan),
    }
    return LayerParams("conv_f", arrays, in_ch, out_ch, kernel_f, stride_f, pad_f)


def make_convT_f(
    in_ch: int,
    out_ch: int,
    kernel_f: int,
    stride_f: int,
    pad_f: int,
    out_pad_f: int,
    rng: np.random.Generator,
) -> LayerParams:
    fan = in_ch * kernel_f
    arrays = {
        "weight": _uniform(rng, (in_ch, out_ch, kernel_f), fan),
        "bias": _uniform(rng, (out_ch,), fan),
    }
    return LayerParams(
        "convT_f", arrays, in_ch, out_ch, kernel_f, stride_f, pad_f, out_pad_f
    )


def make_gru(in_dim: int, hidden: int, rng: np.random.Generator) -> LayerParams:
    arrays = {
        "w_ih": _uniform(rng, (3 * hidden, in_dim), in_dim),
        "w_hh": _uniform(rng, (3 * hidden, hidden), hidden),
        "b_ih": _uniform(rng, (3 * hidden,), in_dim),
        "b_hh": _uniform(rng, (3 * hidden,), hidden),
    }
    return LayerParams("gru", arrays, in_dim, hidden)


def param_count(p: LayerParams) -> int:
    """Analytic parameter count; must equal the number of stored scalars."""
    if p.kind == "linear":
        return p.in_size * p.out_size + p.out_size
    if p.kind in ("conv_f", "convT_f"):
        return p.in_size * p.out_size * p.kernel_f + p.out_size
    if p.kind == "gru":
        h = p.out_size
        return 3 * (p.in_size * h + h * h + 2 * h)
    raise ValueError(p.kind)


def stored_scalars(p: LayerParams) -> int:
    return sum(int(a.size) for a in p.arrays.values())


@dataclass
class ComplexLayer:
    """Pair of equally shaped real layers implementing one complex layer."""

    l1: LayerParams
    l2: LayerParams

    def __post_init__(self):
        if self.l1.kind != self.l2.kind:
            raise ShapeError("complex layer halves must share one kind")
        for name, a in self.l1.arrays.items():
            if name not in self.l2.arrays or self.l2.arrays[name].shape != a.shape:
                raise ShapeError(f"complex layer halves disagree on {name!r}")


def complex_param_count(cl: ComplexLayer) -> int:
    # one complex parameter == two real parameters
    return 2 * param_count(cl.l1)


def make_complex(factory, *args, rng: np.random.Generator, **kwargs) -> ComplexLayer:
    return ComplexLayer(factory(*args, rng=rng, **kwargs), factory(*args, rng=rng, **kwargs))


# ---------------------------------------------------------------------------
# forward passes


def _tensors(p: LayerParams, params: Optional[Mapping[str, Tensor]]) -> dict:
    if params is not None:
        return dict(params)
    return {name: Tensor(a) for name, a in p.arrays.items()}


def linear_forward(
    p: LayerParams, x: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Tensor:
    """y = W x + b over the frequency axis; time columns are independent frames."""
    pt = _tensors(p, params)
    if x.shape[1] != 1 or x.shape[2] != p.in_size:
        raise ShapeError(
            f"linear expects (B,1,{p.in_size},T), got {x.shape}"
        )
    w = reshape4(pt["weight"], (1, 1, p.out_size, p.in_size))
    y = matmul(w, x)
    b = reshape4(pt["bias"], (1, 1, p.out_size, 1))
    return add(y, b)


def conv_out_extent(f: int, kernel: int, stride: int, pad: int) -> int:
    fp = f + 2 * pad
    if fp < kernel:
        raise ShapeError(f"frequency extent {f} (+2*{pad} pad) smaller than kernel {kernel}")
    return (fp - kernel) // stride + 1


def convT_out_extent(f: int, kernel: int, stride: int, pad: int, out_pad: int) -> int:
    out = (f - 1) * stride - 2 * pad + kernel + out_pad
    if out < 1:
        raise ShapeError("transposed conv output extent < 1")
    return out


def conv_freq(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    """Strided frequency-axis correlation with zero padding (one tape node)."""
    b_, ci, f, t = x.shape
    _, co, ci_w, k = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv expects {ci_w} input channels, got {ci}")
    fo = conv_out_extent(f, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    w3 = w.data.reshape(co, ci, k)
    y = backend.corr_fwd(xp, w3, stride)
    counting.bump(b_ * co * ci * k * fo * t)

    def backward_fn(g, needs, xp=xp, w3=w3, stride=stride, pad=pad, f=f):
        gx = gw = None
        if needs[0]:
            gfull = backend.corr_grad_input(g, w3, stride, xp.shape[2])
            gx = gfull[:, :, pad : pad + f, :] if pad else gfull
        if needs[1]:
            gw = backend.corr_grad_weight(xp, g, stride).reshape(1, *w3.shape)
        return (gx, gw)

    return apply_op("conv_f", y, (x, w), backward_fn)


def conv_freq_transpose(
    x: Tensor, w: Tensor, stride: int, pad: int, out_pad: int
) -> Tensor:
    """Exact adjoint of :func:`conv_freq` with the same kernel and geometry."""
    b_, cin, f, t = x.shape
    _, cin_w, cout, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"transposed conv expects {cin_w} input channels, got {cin}")
    if out_pad > pad:
        raise ShapeError("transposed conv needs out_pad <= pad")
    f_out = convT_out_extent(f, k, stride, pad, out_pad)
    f_full = (f - 1) * stride + k
    w3 = w.data.reshape(cin, cout, k)
    z_full = backend.corr_grad_input(x.data, w3, stride, f_full)
    y = np.ascontiguousarray(z_full[:, :, pad : pad + f_out, :])
    counting.bump(b_ * cin * cout * k * f * t)

    def backward_fn(
        g, needs, w3=w3, stride=stride, pad=pad, f_full=f_full, f_out=f_out, xd=x.data
    ):
        gx = gw = None
        g_full = np.zeros((g.shape[0], g.shape[1], f_full, g.shape[3]))
        g_full[:, :, pad : pad + f_out, :] = g
        if needs[0]:
            gx = backend.corr_fwd(g_full, w3, stride)
        if needs[1]:
            gw = backend.corr_grad_weight(g_full, xd, stride).reshape(
                1, *w3.shape
            )
        return (gx, gw)

    return apply_op("convT_f", y, (x, w), backward_fn)


def _bias_col(pt: Mapping[str, Tensor], channels: int) -> Tensor:
    return reshape4(pt["bias"], (1, channels, 1, 1))


def conv_f_forward(
    p: LayerParams, x: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Tensor:
    pt = _tensors(p, params)
    y = conv_freq(x, pt["weight"], p.stride_f, p.pad_f)
    return add(y, _bias_col(pt, p.out_size))


def convT_f_forward(
    p: LayerParams, x: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Tensor:
    pt = _tensors(p, params)
    y = conv_freq_transpose(x, pt["weight"], p.stride_f, p.pad_f, p.out_pad_f)
    return add(y, _bias_col(pt, p.out_size))


def gru_forward(
    p: LayerParams, x: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Tensor:
    """Unidirectional GRU over the time axis, zero initial state.

    Gate order is (reset, update, candidate); both the input-side and the
    hidden-side affine maps carry a bias, and the hidden-side candidate bias
    sits inside the reset product, so all 2h bias rows per gate are live.
    """
    pt = _tensors(p, params)
    h = p.out_size
    if x.shape[1] != 1 or x.shape[2] != p.in_size:
        raise ShapeError(f"gru expects (B,1,{p.in_size},T), got {x.shape}")
    batch, _, _, t_steps = x.shape

    w_ih = reshape4(pt["w_ih"], (1, 1, 3 * h, p.in_size))
    w_hh = reshape4(pt["w_hh"], (1, 1, 3 * h, h))
    b_ih = reshape4(pt["b_ih"], (1, 1, 3 * h, 1))
    b_hh = reshape4(pt["b_hh"], (1, 1, 3 * h, 1))

    gx_all = add(matmul(w_ih, x), b_ih)
    h_prev = Tensor(np.zeros((batch, 1, h, 1)))
    outputs = []
    for t in range(t_steps):
        gx = slice_axis(gx_all, 3, t, t + 1)
        gh = add(matmul(w_hh, h_prev), b_hh)
        r = sigmoid_op(add(slice_axis(gx, 2, 0, h), slice_axis(gh, 2, 0, h)))
        z = sigmoid_op(add(slice_axis(gx, 2, h, 2 * h), slice_axis(gh, 2, h, 2 * h)))
        n = tanh_op(
            add(
                slice_axis(gx, 2, 2 * h, 3 * h),
                mul(r, slice_axis(gh, 2, 2 * h, 3 * h)),
            )
        )
        h_prev = add(mul(sub(1.0, z), n), mul(z, h_prev))
        outputs.append(h_prev)
    return concat(outputs, 3) if t_steps > 1 else outputs[0]


_FORWARD = {
    "linear": linear_forward,
    "conv_f": conv_f_forward,
    "convT_f": convT_f_forward,
    "gru": gru_forward,
}


def layer_forward(
    p: LayerParams, x: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Tensor:
    return _FORWARD[p.kind](p, x, params)


def complex_lift(
    cl: ComplexLayer,
    z: ComplexTensor,
    params1: Optional[Mapping[str, Tensor]] = None,
    params2: Optional[Mapping[str, Tensor]] = None,
) -> ComplexTensor:
    """Apply the layer pair as one complex layer (four real applications)."""
    fwd = _FORWARD[cl.l1.kind]
    a = fwd(cl.l1, z.re, params1)
    b = fwd(cl.l2, z.im, params2)
    c = fwd(cl.l1, z.im, params1)
    d = fwd(cl.l2, z.re, params2)
    return ComplexTensor(sub(a, b), add(c, d))


# ---------------------------------------------------------------------------
# complex GRU cell: affine maps lifted in pairs, gates through the bounded
# complex nonlinearities (the recorded gate convention)


def _affine_c_pair(w1, w2, b1, b2, z: ComplexTensor) -> ComplexTensor:
    a1_re = add(matmul(w1, z.re), b1)
    a1_im = add(matmul(w1, z.im), b1)
    a2_re = add(matmul(w2, z.re), b2)
    a2_im = add(matmul(w2, z.im), b2)
    return ComplexTensor(sub(a1_re, a2_im), add(a1_im, a2_re))


def _cslice(z: ComplexTensor, axis: int, start: int, stop: int) -> ComplexTensor:
    return ComplexTensor(
        slice_axis(z.re, axis, start, stop), slice_axis(z.im, axis, start, stop)
    )


def _ctanh_raw(z: ComplexTensor) -> ComplexTensor:
    m2 = add(mul(z.re, z.re), mul(z.im, z.im))
    return cscale(z, div(1.0, sqrt_(add(m2, 1.0))))


def _sigma_c(z: ComplexTensor) -> ComplexTensor:
    """Complex sigmoid analogue (1 + ctanh(z/2)) / 2."""
    ct = _ctanh_raw(cscale(z, 0.5))
    return ComplexTensor(scale(add(ct.re, 1.0), 0.5), scale(ct.im, 0.5))


def _one_minus(z: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(sub(1.0, z.re), scale(z.im, -1.0))


def complex_gru_forward(
    cl: ComplexLayer,
    z: ComplexTensor,
    params1: Optional[Mapping[str, Tensor]] = None,
    params2: Optional[Mapping[str, Tensor]] = None,
) -> ComplexTensor:
    if cl.l1.kind != "gru":
        raise ValueError("complex_gru_forward needs a GRU layer pair")
    p1, p2 = cl.l1, cl.l2
    pt1, pt2 = _tensors(p1, params1), _tensors(p2, params2)
    h = p1.out_size
    if z.re.shape[1] != 1 or z.re.shape[2] != p1.in_size:
        raise ShapeError(f"complex gru expects (B,1,{p1.in_size},T), got {z.shape}")
    batch, _, _, t_steps = z.re.shape

    def cols(pt):
        return (
            reshape4(pt["w_ih"], (1, 1, 3 * h, p1.in_size)),
            reshape4(pt["w_hh"], (1, 1, 3 * h, h)),
            reshape4(pt["b_ih"], (1, 1, 3 * h, 1)),
            reshape4(pt["b_hh"], (1, 1, 3 * h, 1)),
        )

    w_ih1, w_hh1, b_ih1, b_hh1 = cols(pt1)
    w_ih2, w_hh2, b_ih2, b_hh2 = cols(pt2)

    gx_all = _affine_c_pair(w_ih1, w_ih2, b_ih1, b_ih2, z)
    zero = Tensor(np.zeros((batch, 1, h, 1)))
    h_prev = ComplexTensor(zero, zero)
    outs_re, outs_im = [], []
    for t in range(t_steps):
        gx = _cslice(gx_all, 3, t, t + 1)
        gh = _affine_c_pair(w_hh1, w_hh2, b_hh1, b_hh2, h_prev)
        r = _sigma_c(cadd(_cslice(gx, 2, 0, h), _cslice(gh, 2, 0, h)))
        zg = _sigma_c(cadd(_cslice(gx, 2, h, 2 * h), _cslice(gh, 2, h, 2 * h)))
        n = _ctanh_raw(
            cadd(
                _cslice(gx, 2, 2 * h, 3 * h),
                cmul(r, _cslice(gh, 2, 2 * h, 3 * h)),
            )
        )
        h_prev = cadd(cmul(_one_minus(zg), n), cmul(zg, h_prev))
        outs_re.append(h_prev.re)
        outs_im.append(h_prev.im)
    if t_steps == 1:
        return h_prev
    return ComplexTensor(concat(outs_re, 3), concat(outs_im, 3))


# ---------------------------------------------------------------------------
# activations


def real_activation(kind: str, x: Tensor) -> Tensor:
    if kind == "none":
        return x
    counting.bump_act(kind, x.numel)
    if kind == "relu":
        return relu_op(x)
    if kind == "tanh":
        return tanh_op(x)
    if kind == "sigmoid":
        return sigmoid_op(x)
    raise ValueError(f"unknown real activation {kind!r}")


def crelu(z: ComplexTensor, variant: str = "printed") -> ComplexTensor:
    """Bounded complex ReLU; see module notes for the two published forms.

    The default form scales z by (1 + 1/(|z| + 0.01))/2, which tends to z/2
    for large inputs. The ``corrected`` variant multiplies z by
    (1 + z/(|z| + 0.01))/2 instead, which restricted to the real line matches
    ReLU up to the 0.01 softening.
    """
    counting.bump_act("crelu", z.re.numel)
    m = hypot_(z.re, z.im)
    denom = add(m, 0.01)
    if variant == "printed":
        s = scale(add(div(1.0, denom), 1.0), 0.5)
        return cscale(z, s)
    if variant == "corrected":
        u = ComplexTensor(div(z.re, denom), div(z.im, denom))
        w = ComplexTensor(add(u.re, 1.0), u.im)
        return cscale(cmul(z, w), 0.5)
    raise ValueError(f"unknown crelu variant {variant!r}")


def ctanh(z: ComplexTensor) -> ComplexTensor:
    """z / sqrt(|z|^2 + 1): bounded below 1 in magnitude, at most linear."""
    counting.bump_act("ctanh", z.re.numel)
    return _ctanh_raw(z)


def complex_activation(kind: str, z: ComplexTensor, variant: str = "printed") -> ComplexTensor:
    if kind == "none":
        return z
    if kind == "crelu":
        return crelu(z, variant)
    if kind == "ctanh":
        return ctanh(z)
    raise ValueError(f"unknown complex activation {kind!r}")
