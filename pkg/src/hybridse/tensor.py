"""Dense tensors on a fixed 4-axis layout with reverse-mode autodiff.

Every value lives on the (batch, channel, frequency, time) layout; data of
lower rank is stored with extent-1 axes on the left. Complex data is a pair
of real tensors, so every gradient in the system is a plain real array.

Differentiable operations record nodes on a :class:`Tape` whenever at least
one input is tracked. A tape is an append-only list, which makes creation
order a topological order; ``Tape.backward`` walks it once in reverse.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import counting

LN10 = math.log(10.0)

_DEBUG_CHECKS = os.environ.get("HYBRIDSE_DEBUG_CHECKS", "0") == "1"


def set_debug_checks(enabled: bool) -> None:
    """Toggle the finite-value check that runs after every operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ShapeError(ValueError):
    pass


class GradientError(ValueError):
    pass


def _as4d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > 4:
        raise ShapeError(f"at most 4 axes supported, got shape {arr.shape}")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


class Tensor:
    """Immutable real-valued array on the (batch, channel, frequency, time) layout."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        arr = _as4d(np.array(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor rejects non-finite values at creation")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.numel != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


def _wrap(arr: np.ndarray, tape=None, node=None) -> Tensor:
    """Internal constructor for freshly computed results (no copy)."""
    t = Tensor.__new__(Tensor)
    arr = _as4d(np.ascontiguousarray(arr, dtype=np.float64))
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by an operation")
    arr.flags.writeable = False
    t.data = arr
    t.tape = tape
    t.node = node
    return t


@dataclass
class _Node:
    op: str
    parents: tuple
    backward: Optional[Callable]


class Tape:
    """Append-only record of tracked operations; single-writer."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data) -> Tensor:
        """Create a tracked leaf tensor (copies and validates ``data``)."""
        t = Tensor(data)
        return self.watch(t)

    def watch(self, t: Tensor) -> Tensor:
        """Return a tracked view of ``t`` registered on this tape."""
        if t.tape is self:
            return t
        if t.tape is not None:
            raise ValueError("tensor already belongs to another tape")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        return _wrap(t.data, self, nid)

    def backward(self, root: Tensor) -> dict:
        """Reverse sweep from a tracked scalar; returns node id -> gradient.

        Visits each node at most once, in reverse creation order, so two
        passes over the same graph produce bit-identical gradients.
        """
        if root.tape is not self or root.node is None:
            raise GradientError("root is not tracked on this tape")
        if root.numel != 1:
            raise GradientError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones((1, 1, 1, 1))}
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            needs = tuple(p >= 0 for p in node.parents)
            pgrads = node.backward(g, needs)
            for pid, pg in zip(node.parents, pgrads):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return {nid: _wrap(g) for nid, g in grads.items()}


def backward(root: Tensor) -> dict:
    """Backward pass from ``root`` on its own tape (see :meth:`Tape.backward`)."""
    if root.tape is None:
        return {}
    return root.tape.backward(root)


def apply_op(op: str, out_data: np.ndarray, parents: Sequence, backward_fn) -> Tensor:
    """Record one operation; ``backward_fn(g, needs) -> per-parent gradients``."""
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise ValueError("operation mixes tensors from different tapes")
    if tape is None:
        return _wrap(out_data)
    ids = tuple(
        p.node if isinstance(p, Tensor) and p.tape is tape else -1 for p in parents
    )
    nid = len(tape.nodes)
    tape.nodes.append(_Node(op, ids, backward_fn))
    return _wrap(out_data, tape, nid)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    for ax in range(4):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _binary(op: str, a, b, fwd, bwd) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} not broadcastable") from exc

    def backward_fn(g, needs, a=a, b=b):
        ga, gb = bwd(g, a.data, b.data)
        if needs[0] and ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if needs[1] and gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return (ga if needs[0] else None, gb if needs[1] else None)

    return apply_op(op, out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    b_t = _coerce(b)
    if np.any(b_t.data == 0.0):
        raise ZeroDivisionError("div: denominator contains zeros")
    return _binary(
        "div", a, b_t, lambda x, y: x / y, lambda g, x, y: (g / y, -g * x / (y * y))
    )


def scale(x, s: float) -> Tensor:
    x = _coerce(x)
    s = float(s)
    return apply_op(
        "scale", x.data * s, (x,), lambda g, needs, s=s: (g * s if needs[0] else None,)
    )


def neg(x) -> Tensor:
    return scale(x, -1.0)


def sqrt_(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data < 0.0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(x.data)

    def backward_fn(g, needs, y=y):
        if not needs[0]:
            return (None,)
        # subgradient 0 at the origin for stability
        return (np.where(y > 0.0, 0.5 / np.where(y > 0.0, y, 1.0), 0.0) * g,)

    return apply_op("sqrt", y, (x,), backward_fn)


def log10_(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log10 of non-positive value; add an explicit guard first")
    y = np.log10(x.data)
    return apply_op(
        "log10",
        y,
        (x,),
        lambda g, needs, xd=x.data: (g / (xd * LN10) if needs[0] else None,),
    )


def exp10_(x) -> Tensor:
    x = _coerce(x)
    y = np.power(10.0, x.data)
    return apply_op(
        "exp10", y, (x,), lambda g, needs, y=y: (g * y * LN10 if needs[0] else None,)
    )


def abs_(x) -> Tensor:
    x = _coerce(x)
    return apply_op(
        "abs",
        np.abs(x.data),
        (x,),
        # sign(0) = 0: subgradient 0 at the origin
        lambda g, needs, xd=x.data: (g * np.sign(xd) if needs[0] else None,),
    )


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _coerce(x)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    y = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return apply_op(
        "clamp", y, (x,), lambda g, needs, m=mask: (g * m if needs[0] else None,)
    )


def hypot_(a, b) -> Tensor:
    """Elementwise sqrt(a^2 + b^2) with subgradient 0 at the joint origin."""
    a, b = _coerce(a), _coerce(b)
    h = np.hypot(a.data, b.data)

    def backward_fn(g, needs, a=a, b=b, h=h):
        safe = np.where(h > 0.0, h, 1.0)
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.where(h > 0.0, a.data / safe, 0.0) * g, a.shape)
        if needs[1]:
            gb = _unbroadcast(np.where(h > 0.0, b.data / safe, 0.0) * g, b.shape)
        return (ga, gb)

    return apply_op("hypot", h, (a, b), backward_fn)


def relu(x) -> Tensor:
    x = _coerce(x)
    return apply_op(
        "relu",
        np.maximum(x.data, 0.0),
        (x,),
        lambda g, needs, xd=x.data: (g * (xd > 0.0) if needs[0] else None,),
    )


def tanh_(x) -> Tensor:
    x = _coerce(x)
    y = np.tanh(x.data)
    return apply_op(
        "tanh", y, (x,), lambda g, needs, y=y: (g * (1.0 - y * y) if needs[0] else None,)
    )


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return apply_op(
        "sigmoid",
        y,
        (x,),
        lambda g, needs, y=y: (g * y * (1.0 - y) if needs[0] else None,),
    )


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sqrt": lambda a, b=None: sqrt_(a),
    "log10": lambda a, b=None: log10_(a),
    "abs": lambda a, b=None: abs_(a),
    "clamp": lambda a, b: clamp(a, *b),
    "scale": scale,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name over the elementwise primitive set."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    return fn(a) if b is None and op in ("sqrt", "log10", "abs") else fn(a, b)


# ---------------------------------------------------------------------------
# contractions, reductions, structure


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting over (batch, channel)."""
    a, b = _coerce(a), _coerce(b)
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    counting.bump(out.shape[0] * out.shape[1] * out.shape[2] * out.shape[3] * a.shape[3])

    def backward_fn(g, needs, a=a, b=b):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, 2, 3)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, 2, 3), g), b.shape)
        return (ga, gb)

    return apply_op("matmul", out, (a, b), backward_fn)


def sum_all(x) -> Tensor:
    x = _coerce(x)
    out = np.array(x.data.sum()).reshape(1, 1, 1, 1)
    return apply_op(
        "sum",
        out,
        (x,),
        lambda g, needs, shape=x.shape: (
            np.broadcast_to(g.reshape(()), shape).copy() if needs[0] else None,
        ),
    )


def mean_all(x) -> Tensor:
    x = _coerce(x)
    return scale(sum_all(x), 1.0 / x.numel)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes on axis {axis}") from exc
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g, needs, axis=axis, offsets=offsets):
        outs = []
        for i in range(len(needs)):
            if not needs[i]:
                outs.append(None)
                continue
            sl = [slice(None)] * 4
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return apply_op("concat", out, parts, backward_fn)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range on axis {axis} of {x.shape}")
    sl = [slice(None)] * 4
    sl[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.data[tuple(sl)])

    def backward_fn(g, needs, shape=x.shape, sl=tuple(sl)):
        if not needs[0]:
            return (None,)
        gx = np.zeros(shape)
        gx[sl] = g
        return (gx,)

    return apply_op("slice", out, (x,), backward_fn)


def reshape4(x, shape: tuple) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or int(np.prod(shape)) != x.numel:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return apply_op(
        "reshape",
        x.data.reshape(shape),
        (x,),
        lambda g, needs, old=x.shape: (g.reshape(old) if needs[0] else None,),
    )


def frame_signal(x, size: int, hop: int) -> Tensor:
    """Slice (1, 1, 1, N) samples into (1, 1, size, T) frames; adjoint of overlap-add."""
    x = _coerce(x)
    if x.shape[:3] != (1, 1, 1):
        raise ShapeError(f"frame_signal expects (1,1,1,N), got {x.shape}")
    n = x.shape[3]
    if n < size:
        raise ShapeError(f"signal of {n} samples shorter than one frame ({size})")
    t_frames = 1 + (n - size) // hop
    samples = x.data.reshape(-1)
    out = np.empty((1, 1, size, t_frames))
    for t in range(t_frames):
        out[0, 0, :, t] = samples[t * hop : t * hop + size]

    def backward_fn(g, needs, n=n, size=size, hop=hop, t_frames=t_frames):
        if not needs[0]:
            return (None,)
        gx = np.zeros(n)
        for t in range(t_frames):
            gx[t * hop : t * hop + size] += g[0, 0, :, t]
        return (gx.reshape(1, 1, 1, n),)

    return apply_op("frame", out, (x,), backward_fn)


def overlap_add(frames, hop: int, length: Optional[int] = None) -> Tensor:
    """Sum (1, 1, size, T) frames into (1, 1, 1, N) samples; adjoint of framing."""
    frames = _coerce(frames)
    if frames.shape[0] != 1 or frames.shape[1] != 1:
        raise ShapeError(f"overlap_add expects (1,1,size,T), got {frames.shape}")
    size, t_frames = frames.shape[2], frames.shape[3]
    n = (t_frames - 1) * hop + size if length is None else int(length)
    out = np.zeros(n)
    for t in range(t_frames):
        out[t * hop : t * hop + size] += frames.data[0, 0, :, t]

    def backward_fn(g, needs, size=size, hop=hop, t_frames=t_frames):
        if not needs[0]:
            return (None,)
        gs = g.reshape(-1)
        gf = np.empty((1, 1, size, t_frames))
        for t in range(t_frames):
            gf[0, 0, :, t] = gs[t * hop : t * hop + size]
        return (gf,)

    return apply_op("overlap_add", out.reshape(1, 1, 1, n), (frames,), backward_fn)


# ---------------------------------------------------------------------------
# complex pairs


@dataclass(frozen=True)
class ComplexTensor:
    """Complex values stored as a (real part, imaginary part) pair."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(
                f"re/im shapes differ: {self.re.shape} vs {self.im.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def to_numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def complex_from_numpy(z: np.ndarray) -> ComplexTensor:
    z = np.asarray(z)
    return ComplexTensor(Tensor(np.real(z).copy()), Tensor(np.imag(z).copy()))


def cadd(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(add(a.re, b.re), add(a.im, b.im))


def csub(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(sub(a.re, b.re), sub(a.im, b.im))


def cmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Complex Hadamard product."""
    return ComplexTensor(
        sub(mul(a.re, b.re), mul(a.im, b.im)),
        add(mul(a.re, b.im), mul(a.im, b.re)),
    )


def cscale(z: ComplexTensor, s) -> ComplexTensor:
    """Multiply both parts by a real scalar field (tensor or number)."""
    if isinstance(s, Tensor):
        return ComplexTensor(mul(z.re, s), mul(z.im, s))
    return ComplexTensor(scale(z.re, s), scale(z.im, s))


def magnitude(z: ComplexTensor) -> Tensor:
    """Elementwise |z|, always >= 0; subgradient 0 at the origin."""
    return hypot_(z.re, z.im)


# ---------------------------------------------------------------------------
# finite differences (test oracle)


def finite_difference_grad(f, x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function over every coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = _eval_scalar(f, base)
        flat[i] = saved - eps
        fm = _eval_scalar(f, base)
        flat[i] = saved
        out[i] = (fp - fm) / (2.0 * eps)
    return _wrap(out.reshape(x.shape))


def finite_difference_grad_at(f, x: Tensor, coords, eps: float = 1e-4) -> np.ndarray:
    """Central differences at selected flat coordinates only."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        saved = flat[i]
        flat[i] = saved + eps
        fp = _eval_scalar(f, base)
        flat[i] = saved - eps
        fm = _eval_scalar(f, base)
        flat[i] = saved
        out[j] = (fp - fm) / (2.0 * eps)
    return out


def _eval_scalar(f, arr: np.ndarray) -> float:
    val = f(Tensor(arr))
    if isinstance(val, Tensor):
        return val.item()
    return float(val)
