"""Declarative model specs, builders, the hybridization transform, forward
composition, and mask/correction output application.

Two families are supported: a convolutional autoencoder (``cdae``) and a
convolutional-recurrent network (``crn``, encoder convs + GRUs + one linear
layer that restores the flattened conv geometry). Each family exists in a
real, complex, and hybrid domain. Real models consume the real/imaginary
concatenation of the input spectrogram along frequency and emit a complex
mask through the inverse concatenation; complex models work on the complex
input directly; hybrid models run a magnitude-driven real branch and a
complex branch in parallel, exchange information at the bottleneck through
Cartesian conversions with a channel fold, and emit a sigmoid magnitude mask
plus an additive complex correction.

Recurrent and linear layers count as encoder; only transposed convolutions
form the decoder. Hybridization follows the budget split: the hybrid real
encoder/decoder each carry half of the real baseline's encoder/decoder
parameters, and the complex encoder/decoder carry a quarter in complex
units (half in real units).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import counting
from .convert import cart_c2r, cart_r2c, fold_freq_to_channel, mag_convert
from .layers import (
    ComplexLayer,
    LayerParams,
    complex_activation,
    complex_gru_forward,
    complex_lift,
    conv_out_extent,
    convT_out_extent,
    layer_forward,
    make_conv_f,
    make_convT_f,
    make_gru,
    make_linear,
    real_activation,
)
from .tensor import (
    ComplexTensor,
    ShapeError,
    Tensor,
    add,
    cadd,
    clamp,
    cmul,
    concat,
    cscale,
    div,
    exp10_,
    magnitude,
    mul,
    reshape4,
    scale,
    sub,
)

FAMILIES = ("cdae", "crn")
DOMAINS = ("real", "complex", "hybrid")


class SpecError(ValueError):
    """Invalid model specification or config document."""


class GeometryError(ValueError):
    """Input geometry does not match the model."""


class BudgetError(ValueError):
    def __init__(self, message, closest=None):
        super().__init__(message)
        self.closest = closest


@dataclass(frozen=True)
class LayerDef:
    kind: str  # conv | convT | gru | linear
    out_size: int


@dataclass(frozen=True)
class BranchSpec:
    encoder: tuple
    decoder: tuple


@dataclass(frozen=True)
class ModelSpec:
    family: str
    domain: str
    n_bins: int = 129
    kernel_f: int = 8
    stride_f: int = 2
    pad_f: int = 3
    crelu_variant: str = "printed"
    input_mode: str = "warped"
    bottleneck_concat: str = "channel_fold"
    real: Optional[BranchSpec] = None
    cplx: Optional[BranchSpec] = None


# ---------------------------------------------------------------------------
# validation and geometry


def _check_branch(branch: BranchSpec, family: str, where: str) -> None:
    if not branch.encoder:
        raise SpecError(f"{where}: empty encoder")
    if not branch.decoder:
        raise SpecError(f"{where}: empty decoder")
    kinds = [l.kind for l in branch.encoder]
    convs = [k for k in kinds if k == "conv"]
    if not convs or kinds[: len(convs)] != convs:
        raise SpecError(f"{where}: encoder must start with conv layers")
    tail = kinds[len(convs) :]
    if family == "cdae":
        if tail:
            raise SpecError(f"{where}: cdae encoder is conv-only, got {tail}")
    else:
        if not tail or tail[-1] != "linear" or any(k != "gru" for k in tail[:-1]) or len(tail) < 2:
            raise SpecError(f"{where}: crn encoder needs conv*, gru+, linear")
    if any(l.kind != "convT" for l in branch.decoder):
        raise SpecError(f"{where}: decoder must contain only convT layers")
    if branch.decoder[-1].out_size != 1:
        raise SpecError(f"{where}: last decoder layer must emit 1 channel")
    if any(l.out_size < 1 for l in branch.encoder + branch.decoder):
        raise SpecError(f"{where}: layer widths must be positive")


def validate_spec(spec: ModelSpec) -> None:
    if spec.family not in FAMILIES:
        raise SpecError(f"unknown family {spec.family!r}")
    if spec.domain not in DOMAINS:
        raise SpecError(f"unknown domain {spec.domain!r}")
    if spec.crelu_variant not in ("printed", "corrected"):
        raise SpecError(f"unknown crelu variant {spec.crelu_variant!r}")
    if spec.input_mode not in ("warped", "raw_complex"):
        raise SpecError(f"unknown input mode {spec.input_mode!r}")
    if spec.bottleneck_concat != "channel_fold":
        raise SpecError(f"unknown bottleneck concatenation {spec.bottleneck_concat!r}")
    if spec.domain == "real" and (spec.real is None or spec.cplx is not None):
        raise SpecError("real domain needs exactly the real branch")
    if spec.domain == "complex" and (spec.cplx is None or spec.real is not None):
        raise SpecError("complex domain needs exactly the complex branch")
    if spec.domain == "hybrid" and (spec.real is None or spec.cplx is None):
        raise SpecError("hybrid domain needs both branches")
    if spec.real is not None:
        _check_branch(spec.real, spec.family, "real branch")
    if spec.cplx is not None:
        _check_branch(spec.cplx, spec.family, "complex branch")
    if spec.domain == "hybrid":
        conv_r = [l for l in spec.real.encoder if l.kind == "conv"]
        if conv_r[-1].out_size % 2 != 0:
            raise SpecError(
                "hybrid real encoder must end on an even channel count "
                "(required by the channel fold before the real->complex conversion)"
            )
    layer_table(spec)  # raises on infeasible geometry


def branch_input_bins(spec: ModelSpec, branch: str) -> int:
    """Frequency extent entering a branch's first conv layer."""
    if spec.domain == "real" and branch == "real":
        return 2 * spec.n_bins  # re/im concatenated along frequency
    return spec.n_bins


@dataclass
class LayerRow:
    name: str
    branch: str  # real | complex
    kind: str  # conv | convT | gru | linear
    is_complex: bool
    in_size: int
    out_size: int
    f_in: int = 0
    f_out: int = 0
    out_pad: int = 0
    activation: str = "none"


def _encoder_rows(spec: ModelSpec, branch: BranchSpec, bname: str, is_complex: bool):
    rows = []
    f = branch_input_bins(spec, bname)
    ch = 1
    enc = branch.encoder
    n_layers = len(enc)
    conv_idx = 0
    gru_idx = 0
    for i, ld in enumerate(enc):
        last = i == n_layers - 1
        if ld.kind == "conv":
            f_out = conv_out_extent(f, spec.kernel_f, spec.stride_f, spec.pad_f)
            act = "tanh" if last else "relu"
            if is_complex:
                act = {"tanh": "ctanh", "relu": "crelu"}[act]
            rows.append(
                LayerRow(
                    f"{bname}.enc{conv_idx}", bname, "conv", is_complex,
                    ch, ld.out_size, f, f_out, activation=act,
                )
            )
            ch, f = ld.out_size, f_out
            conv_idx += 1
        elif ld.kind == "gru":
            in_size = ch * f if gru_idx == 0 else rows[-1].out_size
            rows.append(
                LayerRow(
                    f"{bname}.gru{gru_idx}", bname, "gru", is_complex,
                    in_size, ld.out_size,
                )
            )
            gru_idx += 1
        elif ld.kind == "linear":
            feat = ch * f
            if ld.out_size != feat:
                raise SpecError(
                    f"{bname} linear must restore the flattened conv geometry "
                    f"({ch} channels x {f} bins = {feat}), got {ld.out_size}"
                )
            act = "ctanh" if is_complex else "tanh"
            rows.append(
                LayerRow(
                    f"{bname}.linear", bname, "linear", is_complex,
                    rows[-1].out_size, feat, activation=act,
                )
            )
        else:
            raise SpecError(f"unexpected encoder layer kind {ld.kind!r}")
    return rows, ch, f


def _decoder_rows(spec, branch, bname, is_complex, in_ch, enc_chain, final_act):
    rows = []
    chain = list(reversed(enc_chain))  # [f_enc_out, ..., input_bins]
    if len(branch.decoder) != len(chain) - 1:
        raise SpecError(
            f"{bname}: decoder depth {len(branch.decoder)} must mirror the "
            f"{len(chain) - 1} encoder conv layers"
        )
    ch = in_ch
    for i, ld in enumerate(branch.decoder):
        f_in, f_target = chain[i], chain[i + 1]
        base = convT_out_extent(f_in, spec.kernel_f, spec.stride_f, spec.pad_f, 0)
        out_pad = f_target - base
        if not 0 <= out_pad <= spec.pad_f:
            raise SpecError(
                f"{bname} decoder stage {i} cannot reach {f_target} bins from "
                f"{f_in} (needs output padding {out_pad})"
            )
        last = i == len(branch.decoder) - 1
        act = final_act if last else ("crelu" if is_complex else "relu")
        rows.append(
            LayerRow(
                f"{bname}.dec{i}", bname, "convT", is_complex,
                ch, ld.out_size, f_in, f_target, out_pad, act,
            )
        )
        ch = ld.out_size
    return rows


def _conv_chain(spec: ModelSpec, branch: BranchSpec, bname: str):
    f = branch_input_bins(spec, bname)
    chain = [f]
    for ld in branch.encoder:
        if ld.kind != "conv":
            break
        chain.append(conv_out_extent(chain[-1], spec.kernel_f, spec.stride_f, spec.pad_f))
    return chain


def layer_table(spec: ModelSpec):
    """Resolved per-layer geometry for building, counting, and forwarding."""
    rows = []
    if spec.domain == "real":
        enc, ch, f = _encoder_rows(spec, spec.real, "real", False)
        dec = _decoder_rows(
            spec, spec.real, "real", False, ch, _conv_chain(spec, spec.real, "real"), "none"
        )
        rows = enc + dec
    elif spec.domain == "complex":
        enc, ch, f = _encoder_rows(spec, spec.cplx, "complex", True)
        dec = _decoder_rows(
            spec, spec.cplx, "complex", True, ch, _conv_chain(spec, spec.cplx, "complex"), "none"
        )
        rows = enc + dec
    else:
        enc_r, ch_r, f_r = _encoder_rows(spec, spec.real, "real", False)
        enc_c, ch_c, f_c = _encoder_rows(spec, spec.cplx, "complex", True)
        if f_r != f_c:
            raise SpecError("hybrid branches disagree on bottleneck geometry")
        dec_r = _decoder_rows(
            spec, spec.real, "real", False, ch_r + 2 * ch_c,
            _conv_chain(spec, spec.real, "real"), "sigmoid",
        )
        dec_c = _decoder_rows(
            spec, spec.cplx, "complex", True, ch_c + ch_r // 2,
            _conv_chain(spec, spec.cplx, "complex"), "none",
        )
        rows = enc_r + enc_c + dec_r + dec_c
    return rows


def row_params(row: LayerRow, spec: ModelSpec) -> int:
    if row.kind in ("conv", "convT"):
        base = row.in_size * row.out_size * spec.kernel_f + row.out_size
    elif row.kind == "gru":
        h = row.out_size
        base = 3 * (row.in_size * h + h * h + 2 * h)
    elif row.kind == "linear":
        base = row.in_size * row.out_size + row.out_size
    else:
        raise ValueError(row.kind)
    return 2 * base if row.is_complex else base


def branch_param_split(spec: ModelSpec) -> dict:
    """Encoder/decoder parameter totals per branch, in real-equivalent units."""
    out = {"real_enc": 0, "real_dec": 0, "complex_enc": 0, "complex_dec": 0}
    for row in layer_table(spec):
        part = "dec" if row.kind == "convT" else "enc"
        out[f"{row.branch}_{part}"] += row_params(row, spec)
    return out


# ---------------------------------------------------------------------------
# built models


@dataclass
class MaskOutput:
    """Either a complex mask, or a magnitude mask plus complex correction
    (the correction is expressed in the scale of the raw spectrogram)."""

    mask: Optional[ComplexTensor] = None
    mag_mask: Optional[Tensor] = None
    correction: Optional[ComplexTensor] = None

    def __post_init__(self):
        hybrid = self.mag_mask is not None and self.correction is not None
        if (self.mask is None) == (not hybrid):
            raise ValueError("MaskOutput needs a mask or a (mag_mask, correction) pair")


class Model:
    """Instantiated parameters plus the forward composition for one spec."""

    def __init__(self, spec: ModelSpec, rows, layers):
        self.spec = spec
        self.rows = rows
        self.layers = layers  # name -> LayerParams | ComplexLayer

    def arrays(self) -> dict:
        flat: dict = {}
        for name, layer in self.layers.items():
            if isinstance(layer, ComplexLayer):
                for suffix, half in (("1", layer.l1), ("2", layer.l2)):
                    for pname, arr in half.arrays.items():
                        flat[f"{name}.{suffix}.{pname}"] = arr
            else:
                for pname, arr in layer.arrays.items():
                    flat[f"{name}.{pname}"] = arr
        return flat

    def load_arrays(self, flat: dict) -> None:
        current = self.arrays()
        if set(flat) != set(current):
            missing = set(current) - set(flat)
            extra = set(flat) - set(current)
            raise SpecError(f"checkpoint mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, layer in self.layers.items():
            if isinstance(layer, ComplexLayer):
                for suffix, half in (("1", layer.l1), ("2", layer.l2)):
                    for pname in half.arrays:
                        arr = np.asarray(flat[f"{name}.{suffix}.{pname}"], dtype=np.float64)
                        if arr.shape != half.arrays[pname].shape:
                            raise SpecError(f"shape mismatch for {name}.{suffix}.{pname}")
                        half.arrays[pname] = arr
            else:
                for pname in layer.arrays:
                    arr = np.asarray(flat[f"{name}.{pname}"], dtype=np.float64)
                    if arr.shape != layer.arrays[pname].shape:
                        raise SpecError(f"shape mismatch for {name}.{pname}")
                    layer.arrays[pname] = arr

    def param_count(self) -> int:
        return sum(row_params(r, self.spec) for r in self.rows)

    # -- forward ------------------------------------------------------------

    def _wrap(self, tape):
        """Parameter tensors per layer plus the flat leaf map for training."""
        per_layer: dict = {}
        flat: dict = {}
        for name, layer in self.layers.items():
            if isinstance(layer, ComplexLayer):
                entry = []
                for suffix, half in (("1", layer.l1), ("2", layer.l2)):
                    pt = {}
                    for pname, arr in half.arrays.items():
                        t = tape.leaf(arr) if tape is not None else Tensor(arr)
                        pt[pname] = t
                        flat[f"{name}.{suffix}.{pname}"] = t
                    entry.append(pt)
                per_layer[name] = tuple(entry)
            else:
                pt = {}
                for pname, arr in layer.arrays.items():
                    t = tape.leaf(arr) if tape is not None else Tensor(arr)
                    pt[pname] = t
                    flat[f"{name}.{pname}"] = t
                per_layer[name] = pt
        return per_layer, flat

    def _run_real_rows(self, rows, x, pl):
        spec = self.spec
        crn_shape = None
        for row in rows:
            layer = self.layers[row.name]
            if row.kind == "gru" and crn_shape is None:
                b, c, f, t = x.shape
                crn_shape = (b, c, f, t)
                x = reshape4(x, (b, 1, c * f, t))
            x = layer_forward(layer, x, pl[row.name])
            x = real_activation(row.activation, x)
            if row.kind == "linear":
                b = x.shape[0]
                x = reshape4(x, (b, crn_shape[1], crn_shape[2], x.shape[3]))
        return x

    def _run_complex_rows(self, rows, z, pl):
        spec = self.spec
        crn_shape = None
        for row in rows:
            layer = self.layers[row.name]
            if row.kind == "gru" and crn_shape is None:
                b, c, f, t = z.shape
                crn_shape = (b, c, f, t)
                z = ComplexTensor(
                    reshape4(z.re, (b, 1, c * f, t)), reshape4(z.im, (b, 1, c * f, t))
                )
            p1, p2 = pl[row.name]
            if row.kind == "gru":
                z = complex_gru_forward(layer, z, p1, p2)
            else:
                z = complex_lift(layer, z, p1, p2)
            z = complex_activation(row.activation, z, spec.crelu_variant)
            if row.kind == "linear":
                b = z.re.shape[0]
                shape = (b, crn_shape[1], crn_shape[2], z.re.shape[3])
                z = ComplexTensor(reshape4(z.re, shape), reshape4(z.im, shape))
        return z

    def forward(self, yn: ComplexTensor, tape=None):
        """Run the model on a prepared input spectrogram tensor.

        Returns (MaskOutput, flat parameter-leaf map). Real models see the
        frequency concatenation of the two parts and merge their output back
        into a complex mask; hybrid models return the magnitude mask and the
        correction rescaled to the raw spectrogram scale.
        """
        spec = self.spec
        if yn.shape[2] != spec.n_bins:
            raise GeometryError(
                f"model expects {spec.n_bins} frequency bins, got {yn.shape[2]}"
            )
        pl, flat = self._wrap(tape)
        enc_r = [r for r in self.rows if r.branch == "real" and r.kind != "convT"]
        dec_r = [r for r in self.rows if r.branch == "real" and r.kind == "convT"]
        enc_c = [r for r in self.rows if r.branch == "complex" and r.kind != "convT"]
        dec_c = [r for r in self.rows if r.branch == "complex" and r.kind == "convT"]

        if spec.domain == "real":
            with counting.domain("real"):
                x = cart_c2r(yn)
                x = self._run_real_rows(enc_r, x, pl)
                x = self._run_real_rows(dec_r, x, pl)
                mask = cart_r2c(x)
            return MaskOutput(mask=mask), flat

        if spec.domain == "complex":
            with counting.domain("complex"):
                z = self._run_complex_rows(enc_c, yn, pl)
                z = self._run_complex_rows(dec_c, z, pl)
            return MaskOutput(mask=z), flat

        # hybrid
        with counting.domain("real"):
            r = mag_convert(yn)
            r = self._run_real_rows(enc_r, r, pl)
        with counting.domain("complex"):
            z = self._run_complex_rows(enc_c, yn, pl)
        with counting.domain("real"):
            to_real = fold_freq_to_channel(cart_c2r(z), 0.5)
            r_in = concat([r, to_real], 1)
            r_out = self._run_real_rows(dec_r, r_in, pl)
        with counting.domain("complex"):
            to_cplx = cart_r2c(fold_freq_to_channel(r, 2))
            z_in = ComplexTensor(
                concat([z.re, to_cplx.re], 1), concat([z.im, to_cplx.im], 1)
            )
            z_out = self._run_complex_rows(dec_c, z_in, pl)
            correction = self._correction_to_raw(z_out)
        return MaskOutput(mag_mask=r_out, correction=correction), flat

    def _correction_to_raw(self, z: ComplexTensor) -> ComplexTensor:
        """Map the complex branch output onto the raw spectrogram scale.

        Under warped input the output magnitude lives on the warped [0, 1]
        scale, so it is pushed through the inverse warping as a scalar field;
        under raw input the correction passes through unchanged.
        """
        if self.spec.input_mode == "raw_complex":
            return z
        from .audio import FLOOR_DB, REF_DB, WARP_EPS

        m = magnitude(z)
        m01 = clamp(m, 0.0, 1.0)
        x_db = add(scale(m01, REF_DB - FLOOR_DB), FLOOR_DB)
        lin = sub(exp10_(scale(x_db, 1.0 / 20.0)), WARP_EPS)
        s_field = div(lin, add(m, WARP_EPS))
        return cscale(z, s_field)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate parameters (uniform +/- 1/sqrt(fan_in)) for a valid spec."""
    validate_spec(spec)
    rows = layer_table(spec)
    rng = np.random.default_rng(seed)
    layers: dict = {}
    for row in rows:
        def make_one():
            if row.kind == "conv":
                return make_conv_f(
                    row.in_size, row.out_size, spec.kernel_f, spec.stride_f, spec.pad_f, rng
                )
            if row.kind == "convT":
                return make_convT_f(
                    row.in_size, row.out_size, spec.kernel_f, spec.stride_f,
                    spec.pad_f, row.out_pad, rng,
                )
            if row.kind == "gru":
                return make_gru(row.in_size, row.out_size, rng)
            return make_linear(row.in_size, row.out_size, rng)

        layers[row.name] = ComplexLayer(make_one(), make_one()) if row.is_complex else make_one()
    return Model(spec, rows, layers)


def apply_output(out: MaskOutput, y: ComplexTensor) -> ComplexTensor:
    """Apply a model output to the raw spectrogram: mask product, or
    magnitude mask plus additive complex correction."""
    if out.mask is not None:
        if out.mask.shape != y.shape:
            raise ShapeError(f"mask shape {out.mask.shape} != spectrogram {y.shape}")
        return cmul(out.mask, y)
    if out.mag_mask.shape != y.shape or out.correction.shape != y.shape:
        raise ShapeError("hybrid output shapes do not match the spectrogram")
    return cadd(cscale(y, out.mag_mask), out.correction)


# ---------------------------------------------------------------------------
# width fitting, hybridization, complex derivation


def _round_even(x: float) -> int:
    return max(2, int(round(x / 2.0)) * 2)


def _fit_widths(count_fn, widths0, target: float, tol: float):
    """Scale all widths by one factor (rounded to even), then adjust single
    layers greedily (+/-2) until the parameter total is within tol of target."""

    def dev(ws):
        return abs(count_fn(ws) - target)

    lo, hi = 1e-3, 1.0
    while count_fn([_round_even(w * hi) for w in widths0]) < target and hi < 64:
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if count_fn([_round_even(w * mid) for w in widths0]) < target:
            lo = mid
        else:
            hi = mid
    candidates = [
        [_round_even(w * s) for w in widths0] for s in (lo, 0.5 * (lo + hi), hi)
    ]
    widths = min(candidates, key=dev)
    best = dev(widths)
    for _ in range(800):
        if best <= tol * target:
            break
        improved = None
        for i in range(len(widths)):
            for step in (2, -2):
                cand = list(widths)
                cand[i] += step
                if cand[i] < 2:
                    continue
                d = dev(cand)
                if d < best - 1e-9:
                    if improved is None or d < improved[0]:
                        improved = (d, cand)
        if improved is None:
            break
        best, widths = improved[0], improved[1]
    return widths, best


def _seed_or_fit(count_fn, template, target, tol, seed_widths, label):
    if seed_widths is not None:
        if len(seed_widths) != len(template):
            raise SpecError(f"{label}: seed width count mismatch")
        if abs(count_fn(list(seed_widths)) - target) <= tol * target:
            return list(seed_widths), abs(count_fn(list(seed_widths)) - target)
        widths, best = _fit_widths(count_fn, list(seed_widths), target, tol)
    else:
        widths, best = _fit_widths(count_fn, list(template), target, tol)
    if best > tol * target:
        raise BudgetError(
            f"{label}: cannot reach {target:.0f} params within {tol:.1%} "
            f"(closest {count_fn(widths):.0f} with widths {widths})",
            closest=widths,
        )
    return widths, best


def _branch_spec_from_widths(family, conv_widths, gru_widths, linear_out, dec_widths):
    enc = [LayerDef("conv", int(w)) for w in conv_widths]
    if family == "crn":
        enc += [LayerDef("gru", int(h)) for h in gru_widths]
        enc.append(LayerDef("linear", int(linear_out)))
    dec = [LayerDef("convT", int(w)) for w in dec_widths] + [LayerDef("convT", 1)]
    return BranchSpec(tuple(enc), tuple(dec))


def _enc_count_fn(spec, family, in_bins, is_complex, n_conv):
    """Parameter total of an encoder as a function of its free widths.

    Free widths: conv channel list, then GRU hidden sizes (crn). The linear
    output is fixed by geometry (last conv channels x final extent)."""
    mult = 2 if is_complex else 1

    def chain_extent(_):
        f = in_bins
        for _ in range(n_conv):
            f = conv_out_extent(f, spec.kernel_f, spec.stride_f, spec.pad_f)
        return f

    f_last = chain_extent(None)

    def count(ws):
        convs = ws[:n_conv]
        grus = ws[n_conv:]
        total = 0
        cin = 1
        for c in convs:
            total += cin * c * spec.kernel_f + c
            cin = c
        if family == "crn":
            feat = convs[-1] * f_last
            prev = feat
            for h in grus:
                total += 3 * (prev * h + h * h + 2 * h)
                prev = h
            total += prev * feat + feat
        return mult * total

    return count


def _dec_count_fn(spec, in_ch, is_complex):
    mult = 2 if is_complex else 1

    def count(ws):
        total = 0
        cin = in_ch
        for c in list(ws) + [1]:
            total += cin * c * spec.kernel_f + c
            cin = c
        return mult * total

    return count


def _split_template(branch: BranchSpec):
    convs = [l.out_size for l in branch.encoder if l.kind == "conv"]
    grus = [l.out_size for l in branch.encoder if l.kind == "gru"]
    decs = [l.out_size for l in branch.decoder[:-1]]
    return convs, grus, decs


def _encoder_geometry(spec: ModelSpec, in_bins: int, n_conv: int) -> int:
    f = in_bins
    for _ in range(n_conv):
        f = conv_out_extent(f, spec.kernel_f, spec.stride_f, spec.pad_f)
    return f


def hybridize(real_spec: ModelSpec, tol: float = 0.02, seeds: Optional[dict] = None) -> ModelSpec:
    """Derive the hybrid counterpart of a real-domain spec.

    The hybrid real encoder/decoder target half of the baseline encoder and
    decoder budgets; the complex encoder/decoder target a quarter of those
    budgets in complex parameters (half in real-equivalent units). The first
    decoder layer of each branch is widened for the concatenated bottleneck
    input while its branch stays on budget. Widths are found by common-factor
    scaling (rounded to even) plus greedy single-layer adjustment; optional
    seeds are adopted verbatim when already within tolerance.
    """
    validate_spec(real_spec)
    if real_spec.domain != "real":
        raise SpecError("hybridize needs a real-domain spec")
    seeds = seeds or {}
    split = branch_param_split(real_spec)
    n_f, n_g = split["real_enc"], split["real_dec"]
    convs, grus, decs = _split_template(real_spec.real)
    n_conv = len(convs)
    family = real_spec.family

    enc_fn_r = _enc_count_fn(real_spec, family, real_spec.n_bins, False, n_conv)
    enc_r, _ = _seed_or_fit(
        enc_fn_r, convs + grus, n_f / 2.0, tol,
        seeds.get("real_encoder"), "hybrid real encoder",
    )
    enc_fn_c = _enc_count_fn(real_spec, family, real_spec.n_bins, True, n_conv)
    enc_c, _ = _seed_or_fit(
        enc_fn_c, [max(2, w // 2) for w in convs + grus], n_f / 2.0, tol,
        seeds.get("complex_encoder"), "hybrid complex encoder",
    )
    ch_r, ch_c = enc_r[n_conv - 1], enc_c[n_conv - 1]
    dec_fn_r = _dec_count_fn(real_spec, ch_r + 2 * ch_c, False)
    dec_r, _ = _seed_or_fit(
        dec_fn_r, decs, n_g / 2.0, tol, seeds.get("real_decoder"), "hybrid real decoder"
    )
    dec_fn_c = _dec_count_fn(real_spec, ch_c + ch_r // 2, True)
    dec_c, _ = _seed_or_fit(
        dec_fn_c, [max(2, w // 2) for w in decs], n_g / 2.0, tol,
        seeds.get("complex_decoder"), "hybrid complex decoder",
    )

    f_last = _encoder_geometry(real_spec, real_spec.n_bins, n_conv)
    real_branch = _branch_spec_from_widths(
        family, enc_r[:n_conv], enc_r[n_conv:], enc_r[n_conv - 1] * f_last, dec_r
    )
    cplx_branch = _branch_spec_from_widths(
        family, enc_c[:n_conv], enc_c[n_conv:], enc_c[n_conv - 1] * f_last, dec_c
    )
    out = replace(real_spec, domain="hybrid", real=real_branch, cplx=cplx_branch)
    validate_spec(out)
    return out


def derive_complex(real_spec: ModelSpec, tol: float = 0.02, seeds: Optional[dict] = None) -> ModelSpec:
    """Derive the complex-domain baseline of a real-domain spec.

    Encoder and decoder keep the real baseline's budgets in real-equivalent
    units, i.e. half of them counted in complex parameters, which keeps the
    model total on par with the baseline."""
    validate_spec(real_spec)
    if real_spec.domain != "real":
        raise SpecError("derive_complex needs a real-domain spec")
    seeds = seeds or {}
    split = branch_param_split(real_spec)
    n_f, n_g = split["real_enc"], split["real_dec"]
    convs, grus, decs = _split_template(real_spec.real)
    n_conv = len(convs)
    family = real_spec.family

    enc_fn = _enc_count_fn(real_spec, family, real_spec.n_bins, True, n_conv)
    enc, _ = _seed_or_fit(
        enc_fn, [max(2, int(round(w / np.sqrt(2.0)))) for w in convs + grus],
        float(n_f), tol, seeds.get("complex_encoder"), "complex encoder",
    )
    dec_fn = _dec_count_fn(real_spec, enc[n_conv - 1], True)
    dec, _ = _seed_or_fit(
        dec_fn, [max(2, int(round(w / np.sqrt(2.0)))) for w in decs],
        float(n_g), tol, seeds.get("complex_decoder"), "complex decoder",
    )
    f_last = _encoder_geometry(real_spec, real_spec.n_bins, n_conv)
    branch = _branch_spec_from_widths(
        family, enc[:n_conv], enc[n_conv:], enc[n_conv - 1] * f_last, dec
    )
    out = replace(real_spec, domain="complex", real=None, cplx=branch)
    validate_spec(out)
    return out


def budget_report(real_spec: ModelSpec, derived: ModelSpec) -> dict:
    """Deviations of a derived spec from the §-free budget laws, as fractions."""
    base = branch_param_split(real_spec)
    n_f, n_g = base["real_enc"], base["real_dec"]
    got = branch_param_split(derived)
    if derived.domain == "hybrid":
        targets = {
            "real_enc": n_f / 2.0,
            "real_dec": n_g / 2.0,
            "complex_enc": n_f / 2.0,
            "complex_dec": n_g / 2.0,
        }
    else:
        targets = {"complex_enc": float(n_f), "complex_dec": float(n_g)}
    return {
        key: (got[key], targets[key], abs(got[key] - targets[key]) / targets[key])
        for key in targets
    }


# ---------------------------------------------------------------------------
# config documents


CONFIG_VERSION = 1
_SCALAR_KEYS = {
    "version": int,
    "family": str,
    "domain": str,
    "bins": int,
    "kernel_f": int,
    "stride_f": int,
    "pad_f": int,
    "crelu_variant": str,
    "input_mode": str,
    "bottleneck_concat": str,
}
_BRANCH_KEYS = ("real_encoder", "real_decoder", "complex_encoder", "complex_decoder")


def _layers_to_text(layers) -> str:
    names = {"conv": "conv", "convT": "convT", "gru": "gru", "linear": "linear"}
    return ", ".join(f"{names[l.kind]}:{l.out_size}" for l in layers)


def _layers_from_text(text: str, key: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise SpecError(f"{key}: layer entry {item!r} needs kind:width")
        kind, width = item.split(":", 1)
        if kind not in ("conv", "convT", "gru", "linear"):
            raise SpecError(f"{key}: unknown layer kind {kind!r}")
        try:
            w = int(width)
        except ValueError as exc:
            raise SpecError(f"{key}: bad width {width!r}") from exc
        out.append(LayerDef(kind, w))
    if not out:
        raise SpecError(f"{key}: empty layer list")
    return tuple(out)


def to_config_text(spec: ModelSpec) -> str:
    lines = [
        f"version = {CONFIG_VERSION}",
        f"family = {spec.family}",
        f"domain = {spec.domain}",
        f"bins = {spec.n_bins}",
        f"kernel_f = {spec.kernel_f}",
        f"stride_f = {spec.stride_f}",
        f"pad_f = {spec.pad_f}",
        f"crelu_variant = {spec.crelu_variant}",
        f"input_mode = {spec.input_mode}",
        f"bottleneck_concat = {spec.bottleneck_concat}",
    ]
    if spec.real is not None:
        lines.append(f"real_encoder = {_layers_to_text(spec.real.encoder)}")
        lines.append(f"real_decoder = {_layers_to_text(spec.real.decoder)}")
    if spec.cplx is not None:
        lines.append(f"complex_encoder = {_layers_to_text(spec.cplx.encoder)}")
        lines.append(f"complex_decoder = {_layers_to_text(spec.cplx.decoder)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> ModelSpec:
    """Strict key/value parser; unknown keys are errors."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _SCALAR_KEYS and key not in _BRANCH_KEYS:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    for required in ("version", "family", "domain"):
        if required not in values:
            raise SpecError(f"missing key {required!r}")
    if int(values["version"]) != CONFIG_VERSION:
        raise SpecError(f"unsupported config version {values['version']}")

    branches = {}
    for key in _BRANCH_KEYS:
        if key in values:
            branches[key] = _layers_from_text(values.pop(key), key)
    scalars = {}
    for key, conv in _SCALAR_KEYS.items():
        if key in values:
            try:
                scalars[key] = conv(values.pop(key))
            except ValueError as exc:
                raise SpecError(f"bad value for {key!r}") from exc

    real = None
    if "real_encoder" in branches or "real_decoder" in branches:
        if not ("real_encoder" in branches and "real_decoder" in branches):
            raise SpecError("real branch needs both encoder and decoder")
        real = BranchSpec(branches["real_encoder"], branches["real_decoder"])
    cplx = None
    if "complex_encoder" in branches or "complex_decoder" in branches:
        if not ("complex_encoder" in branches and "complex_decoder" in branches):
            raise SpecError("complex branch needs both encoder and decoder")
        cplx = BranchSpec(branches["complex_encoder"], branches["complex_decoder"])

    spec = ModelSpec(
        family=scalars["family"],
        domain=scalars["domain"],
        n_bins=scalars.get("bins", 129),
        kernel_f=scalars.get("kernel_f", 8),
        stride_f=scalars.get("stride_f", 2),
        pad_f=scalars.get("pad_f", 3),
        crelu_variant=scalars.get("crelu_variant", "printed"),
        input_mode=scalars.get("input_mode", "warped"),
        bottleneck_concat=scalars.get("bottleneck_concat", "channel_fold"),
        real=real,
        cplx=cplx,
    )
    validate_spec(spec)
    return spec


def spec_hash(spec: ModelSpec) -> str:
    return hashlib.sha256(to_config_text(spec).encode("utf-8")).hexdigest()


def load_config(path) -> ModelSpec:
    if not os.path.exists(path):
        raise SpecError(f"no such config: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


BUILTIN_NAMES = ("rcdae", "ccdae", "hcdae", "rcrn", "ccrn", "hcrn")


def builtin_config(name: str) -> ModelSpec:
    if name not in BUILTIN_NAMES:
        raise SpecError(f"unknown builtin config {name!r}; have {BUILTIN_NAMES}")
    from importlib import resources

    text = resources.files("hybridse").joinpath(f"configs/{name}.cfg").read_text()
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HSECKPT1"


def save_checkpoint(path, spec: ModelSpec, arrays: dict, meta: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, uint64 header length, JSON header (version,
    spec hash and text, metadata, ordered entry names/shapes), then the raw
    little-endian float64 buffers in entry order."""
    names = sorted(arrays)
    header = {
        "version": 1,
        "spec_hash": spec_hash(spec),
        "spec_text": to_config_text(spec),
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (spec, arrays, meta)."""
    if not os.path.exists(path):
        raise SpecError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise SpecError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        spec = parse_config_text(header["spec_text"])
        if spec_hash(spec) != header["spec_hash"]:
            raise SpecError("checkpoint spec hash mismatch")
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            n_items = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n_items)
            if len(buf) != 8 * n_items:
                raise SpecError("truncated checkpoint")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return spec, arrays, header["meta"]
