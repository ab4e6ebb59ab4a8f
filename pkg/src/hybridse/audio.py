"""Audio pipeline: WAV I/O, STFT/ISTFT, magnitude warping, SNR mixing, fades.

Geometry is fixed at a 16 kHz rate with 256-sample periodic Hann analysis
windows and 50% overlap (129 frequency bins). The ISTFT is weighted
overlap-add: inverse-DFT frames are summed and divided by the analysis
window envelope, which equals one everywhere except the first and last
half-frame, so reconstruction is exact on the interior and the outermost
frame on each side is treated as warm-up.

Both transform directions are built from tape primitives (framing, matrix
products against fixed DFT bases, overlap-add), which keeps the path from a
modified spectrogram down to time-domain samples differentiable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .tensor import (
    ComplexTensor,
    ShapeError,
    Tensor,
    add,
    frame_signal,
    matmul,
    mul,
    overlap_add,
    reshape4,
)

SAMPLE_RATE = 16000
WIN = 256
HOP = 128
N_BINS = WIN // 2 + 1
FLOOR_DB = -80.0
REF_DB = 0.0
WARP_EPS = 1e-8
EDGE_TRIM = WIN  # one warm-up frame per side, trimmed before losses/metrics


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    """Mono samples at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("clip contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"clips are {SAMPLE_RATE} Hz after ingestion")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Complex STFT bins with fixed frame metadata."""

    bins: ComplexTensor  # (1, 1, N_BINS, T)
    n_samples: int
    sample_rate: int = SAMPLE_RATE
    window: str = "hann256"
    hop: int = HOP

    def __post_init__(self):
        if self.bins.shape[2] != N_BINS:
            raise ShapeError(f"spectrogram needs {N_BINS} bins, got {self.bins.shape[2]}")


@dataclass
class NormalizedSpec:
    """Warped magnitude in [0, 1] plus the unit-modulus phase factors."""

    mag01: Tensor
    phase: ComplexTensor
    n_samples: int
    floor_db: float = FLOOR_DB
    ref_db: float = REF_DB


# ---------------------------------------------------------------------------
# WAV I/O


def wav_read(path) -> AudioClip:
    """Read PCM16/PCM32/float WAV; downmix stereo; resample to 16 kHz."""
    if not os.path.exists(path):
        raise AudioError(f"no such file: {path}")
    if os.path.getsize(path) == 0:
        raise AudioError(f"empty file: {path}")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise AudioError(f"malformed WAV {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"no samples in {path}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 127.0
    else:
        raise AudioError(f"unsupported sample format {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != SAMPLE_RATE:
        frac = Fraction(SAMPLE_RATE, int(rate)).limit_denominator(1000)
        x = resample_poly(x, frac.numerator, frac.denominator)
    return AudioClip(x)


def wav_write(path, clip: AudioClip, fmt: str = "pcm16") -> None:
    if fmt == "pcm16":
        q = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, clip.sample_rate, q)
    elif fmt == "float32":
        wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    else:
        raise AudioError(f"unsupported output format {fmt!r}")


# ---------------------------------------------------------------------------
# STFT / ISTFT


def hann_window(n: int = WIN) -> np.ndarray:
    # periodic variant: shifted copies at 50% overlap sum to exactly one
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


_BASES: dict = {}


def _dft_bases():
    if "fwd" not in _BASES:
        n = np.arange(WIN)
        f = np.arange(N_BINS).reshape(-1, 1)
        ang = 2.0 * np.pi * f * n / WIN
        _BASES["fwd"] = (np.cos(ang), -np.sin(ang))
        weights = np.full(N_BINS, 2.0)
        weights[0] = 1.0
        weights[-1] = 1.0
        inv_re = (np.cos(ang) * weights.reshape(-1, 1)).T / WIN
        inv_im = (-np.sin(ang) * weights.reshape(-1, 1)).T / WIN
        _BASES["inv"] = (inv_re, inv_im)
    return _BASES


def stft_tensor(x: Tensor) -> ComplexTensor:
    """Differentiable STFT of (1, 1, 1, N) samples -> (1, 1, N_BINS, T) bins."""
    if x.shape[3] < WIN:
        raise AudioError(f"need at least {WIN} samples, got {x.shape[3]}")
    bases = _dft_bases()
    frames = frame_signal(x, WIN, HOP)
    win = Tensor(hann_window().reshape(1, 1, WIN, 1))
    fw = mul(frames, win)
    c_re = Tensor(bases["fwd"][0])
    c_im = Tensor(bases["fwd"][1])
    return ComplexTensor(matmul(c_re, fw), matmul(c_im, fw))


def istft_tensor(z: ComplexTensor, length: Optional[int] = None) -> Tensor:
    """Differentiable ISTFT; returns (1, 1, 1, N) samples."""
    bases = _dft_bases()
    inv_re = Tensor(bases["inv"][0])
    inv_im = Tensor(bases["inv"][1])
    frames = add(matmul(inv_re, z.re), matmul(inv_im, z.im))
    t_frames = z.shape[3]
    n = (t_frames - 1) * HOP + WIN
    raw = overlap_add(frames, HOP, length=n)
    env = np.zeros(n)
    w = hann_window()
    for t in range(t_frames):
        env[t * HOP : t * HOP + WIN] += w
    inv_env = Tensor((1.0 / np.maximum(env, 1e-2)).reshape(1, 1, 1, n))
    out = mul(raw, inv_env)
    if length is not None and length != n:
        if length > n:
            raise AudioError(f"cannot extend ISTFT output {n} to {length}")
        from .tensor import slice_axis

        out = slice_axis(out, 3, 0, length)
    return out


def stft(clip: AudioClip) -> Spectrogram:
    x = Tensor(clip.samples.reshape(1, 1, 1, -1))
    return Spectrogram(stft_tensor(x), n_samples=clip.samples.size)


def istft(spec: Spectrogram) -> AudioClip:
    grid = (spec.bins.shape[3] - 1) * HOP + WIN
    out = istft_tensor(spec.bins, length=min(spec.n_samples, grid))
    return AudioClip(out.data.reshape(-1))


def spectral_energy(spec: Spectrogram) -> float:
    """Time-domain energy estimate from the spectrogram.

    Per-frame Parseval (bin weights 1, 2, ..., 2, 1 over the half spectrum,
    divided by the DFT length) recovers the windowed-frame energy; dividing
    by sum(w^2)/hop = 0.75 undoes the average Hann energy loss.
    """
    z = spec.bins.to_numpy()[0, 0]
    weights = np.full(N_BINS, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    frame_energy = (weights.reshape(-1, 1) * np.abs(z) ** 2).sum() / WIN
    w = hann_window()
    return float(frame_energy / ((w * w).sum() / HOP))


# ---------------------------------------------------------------------------
# magnitude warping


def normalize(spec: Spectrogram) -> NormalizedSpec:
    """20 log10(|Y| + 1e-8), mapped so -80 dB -> 0 and 0 dB -> 1, clamped."""
    z = spec.bins.to_numpy()
    mag = np.abs(z)
    x_db = 20.0 * np.log10(mag + WARP_EPS)
    mag01 = np.clip((x_db - FLOOR_DB) / (REF_DB - FLOOR_DB), 0.0, 1.0)
    safe = np.where(mag > 0.0, mag, 1.0)
    ph = np.where(mag > 0.0, z / safe, 0.0)
    return NormalizedSpec(
        Tensor(mag01),
        ComplexTensor(Tensor(ph.real.copy()), Tensor(ph.imag.copy())),
        n_samples=spec.n_samples,
    )


def denormalize(n: NormalizedSpec) -> Spectrogram:
    """Invert the warping; exact wherever the clamp was inactive."""
    x_db = n.mag01.data * (REF_DB - FLOOR_DB) + FLOOR_DB
    mag = np.maximum(np.power(10.0, x_db / 20.0) - WARP_EPS, 0.0)
    re = mag * n.phase.re.data
    im = mag * n.phase.im.data
    return Spectrogram(ComplexTensor(Tensor(re), Tensor(im)), n_samples=n.n_samples)


def prepare_input(spec: Spectrogram, mode: str = "warped") -> ComplexTensor:
    """Model input: warped magnitude recombined with the original phase, or
    the raw STFT when mode == 'raw_complex'."""
    if mode == "raw_complex":
        return spec.bins
    if mode != "warped":
        raise ValueError(f"unknown input mode {mode!r}")
    n = normalize(spec)
    return ComplexTensor(mul(n.mag01, n.phase.re), mul(n.mag01, n.phase.im))


# ---------------------------------------------------------------------------
# mixing and augmentation


def measure_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(speech: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """speech + g * noise with g chosen so the realized SNR equals snr_db."""
    if speech.samples.size != noise.samples.size:
        raise AudioError("mix_at_snr needs equal lengths")
    p_s = measure_power(speech.samples)
    p_v = measure_power(noise.samples)
    if p_v <= 0.0:
        raise AudioError("noise is silent")
    if p_s <= 0.0:
        raise AudioError("speech is silent")
    g = np.sqrt(p_s / (p_v * 10.0 ** (snr_db / 10.0)))
    return AudioClip(speech.samples + g * noise.samples)


def apply_fade(clip: AudioClip, dur_s: float) -> AudioClip:
    """Raised-cosine fade-in and fade-out of the given duration."""
    ramp = int(round(dur_s * clip.sample_rate))
    if 2 * ramp >= clip.samples.size:
        raise AudioError(f"clip of {clip.duration:.3f}s too short for {dur_s:.3f}s fades")
    env = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
    out = clip.samples.copy()
    out[:ramp] *= env
    out[-ramp:] *= env[::-1]
    return AudioClip(out)


PAIR_SECONDS = 10.0
PAIR_SAMPLES = int(PAIR_SECONDS * SAMPLE_RATE)
SNR_RANGE = (-5.0, 20.0)
FADE_RANGE = (0.2, 0.3)

ClipSource = Callable[[np.random.Generator], AudioClip]


def _gather(source: ClipSource, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Draw, fade, and concatenate clips until n_samples are available."""
    chunks = []
    total = 0
    for _ in range(1000):
        clip = source(rng)
        faded = apply_fade(clip, rng.uniform(*FADE_RANGE))
        chunks.append(faded.samples)
        total += faded.samples.size
        if total >= n_samples:
            return np.concatenate(chunks)[:n_samples]
    raise AudioError("source did not yield enough audio")


def make_training_pair(
    speech_source: ClipSource, noise_source: ClipSource, rng_seed: int
) -> tuple:
    """One (noisy, clean) 10 s pair; bit-deterministic under the seed."""
    rng = np.random.default_rng(rng_seed)
    clean = AudioClip(_gather(speech_source, rng, PAIR_SAMPLES))
    noise = AudioClip(_gather(noise_source, rng, PAIR_SAMPLES))
    snr = rng.uniform(*SNR_RANGE)
    noisy = mix_at_snr(clean, noise, snr)
    return noisy, clean


# ---------------------------------------------------------------------------
# synthetic sources and dataset manifests


def synth_speech(rng: np.random.Generator, seconds: float = 4.0) -> AudioClip:
    """Speech-shaped test signal: drifting harmonic stack under syllabic gating."""
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 180.0) * (1.0 + 0.15 * np.sin(2.0 * np.pi * rng.uniform(0.2, 0.5) * t))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    x = np.zeros(n)
    for k in range(1, 9):
        x += (1.0 / k) * np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi))
    syllable = 0.55 + 0.45 * np.sin(2.0 * np.pi * rng.uniform(2.5, 4.5) * t + rng.uniform(0, 6.28))
    x *= np.square(syllable)
    x += 0.01 * rng.standard_normal(n)
    x *= 0.1 / np.sqrt(measure_power(x))
    return AudioClip(x)


def synth_noise(rng: np.random.Generator, seconds: float = 10.0) -> AudioClip:
    """Low-pass shaped noise."""
    n = int(seconds * SAMPLE_RATE)
    white = rng.standard_normal(n)
    shaped = np.empty(n)
    acc = 0.0
    alpha = 0.85
    for i in range(n):
        acc = alpha * acc + (1.0 - alpha) * white[i]
        shaped[i] = acc
    shaped += 0.1 * white
    shaped *= 0.1 / np.sqrt(measure_power(shaped))
    return AudioClip(shaped)


@dataclass
class Manifest:
    speech: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    synthetic: bool = False


def parse_manifest(path) -> Manifest:
    """Plain text: `[speech]` / `[noise]` path sections, or `[synthetic]`."""
    if not os.path.exists(path):
        raise AudioError(f"no such manifest: {path}")
    m = Manifest()
    section = None
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                if line not in ("[speech]", "[noise]", "[synthetic]"):
                    raise AudioError(f"unknown manifest section {line}")
                section = line
                if line == "[synthetic]":
                    m.synthetic = True
                continue
            if section == "[speech]":
                m.speech.append(os.path.join(base, line))
            elif section == "[noise]":
                m.noise.append(os.path.join(base, line))
            else:
                raise AudioError(f"manifest entry outside a section: {line}")
    if not m.synthetic and (not m.speech or not m.noise):
        raise AudioError("manifest needs both [speech] and [noise] entries")
    return m


def manifest_sources(m: Manifest) -> tuple:
    """(speech_source, noise_source) drawing functions for a manifest."""
    if m.synthetic:
        return synth_speech, synth_noise

    def draw(paths):
        def source(rng):
            return wav_read(paths[int(rng.integers(len(paths)))])

        return source

    return draw(m.speech), draw(m.noise)
