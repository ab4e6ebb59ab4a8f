"""Parameter-free conversions between real and complex branch tensors.

Conversions follow the Cartesian convention: a real tensor turns complex by
reading the first half of its frequency axis as the real part and the second
half as the imaginary part; the inverse concatenates the two parts along
frequency. ``fold_freq_to_channel`` moves a factor of two between the channel
and frequency axes (a pure reshape, bit-exact invertible) so bottleneck
concatenation can happen along the channel axis without disturbing spatial
geometry.
"""

from __future__ import annotations

from . import counting
from .tensor import ComplexTensor, ShapeError, Tensor, concat, magnitude, reshape4, slice_axis


def mag_convert(z: ComplexTensor) -> Tensor:
    """Elementwise magnitude; drops phase for the real branch input."""
    counting.bump_act("mag", z.re.numel)
    return magnitude(z)


def cart_r2c(r: Tensor) -> ComplexTensor:
    """Frequency halves -> (real part, imaginary part); needs an even extent."""
    f = r.shape[2]
    if f % 2 != 0:
        raise ShapeError(f"real->complex conversion needs an even frequency extent, got {f}")
    half = f // 2
    return ComplexTensor(slice_axis(r, 2, 0, half), slice_axis(r, 2, half, f))


def cart_c2r(z: ComplexTensor) -> Tensor:
    """Concatenate (real part, imaginary part) along frequency; extent doubles."""
    return concat([z.re, z.im], 2)


def fold_freq_to_channel(x: Tensor, factor) -> Tensor:
    """Move a factor of 2 between frequency and channel without reordering
    scalars inside a (channel, frequency) block.

    factor == 0.5 : (B, C, 2F, T) -> (B, 2C, F, T)
    factor == 2   : (B, C, F, T) -> (B, C/2, 2F, T)
    """
    b, c, f, t = x.shape
    if factor == 0.5:
        if f % 2 != 0:
            raise ShapeError(f"frequency extent {f} not divisible by 2")
        return reshape4(x, (b, 2 * c, f // 2, t))
    if factor == 2:
        if c % 2 != 0:
            raise ShapeError(f"channel extent {c} not divisible by 2")
        return reshape4(x, (b, c // 2, 2 * f, t))
    raise ValueError("factor must be 2 or 0.5")
