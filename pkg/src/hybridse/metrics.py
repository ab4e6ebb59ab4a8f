"""Quality metrics: SI-SDR (metric and differentiable loss form), STOI, SNR.

SI-SDR projects the estimate onto the reference before forming the
distortion ratio, so it is invariant to global scaling of the estimate. The
reported metric is capped at +/-100 dB; the loss form replaces the caps with
a relative epsilon so it stays smooth for the optimizer.

STOI follows the original short-time objective intelligibility definition:
10 kHz rate, 256-sample Hann frames at 50% overlap with a 512-point DFT,
15 one-third-octave bands from 150 Hz, 384 ms analysis segments, reference
driven silent-frame removal at a 40 dB dynamic range, per-band normalization
with -15 dB clipping, and averaged intra-segment correlations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from .audio import AudioClip
from .tensor import Tensor, add, div, log10_, mul, scale, sub, sum_all

SENTINEL_DB = 100.0

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG = 30  # frames per 384 ms analysis segment
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def _as_samples(x) -> np.ndarray:
    if isinstance(x, AudioClip):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------------------
# SI-SDR


def si_sdr(estimate, reference) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +/-100."""
    est, ref = _as_samples(estimate), _as_samples(reference)
    if est.size != ref.size:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ss = float(ref @ ref)
    if ss == 0.0:
        raise ValueError("reference is identically zero")
    alpha = float(est @ ref) / ss
    target = alpha * ref
    err = est - target
    num = float(target @ target)
    den = float(err @ err)
    if num == 0.0:
        return -SENTINEL_DB
    if den == 0.0 or num / den >= 1e10:
        return SENTINEL_DB
    if num / den <= 1e-10:
        return -SENTINEL_DB
    return float(10.0 * np.log10(num / den))


def si_sdr_loss(estimate: Tensor, reference: np.ndarray) -> Tensor:
    """Negative SI-SDR as a differentiable scalar.

    A relative epsilon of 1e-10 on both energies reproduces the +/-100 dB
    caps of the metric while keeping the expression smooth.
    """
    ref = np.asarray(reference, dtype=np.float64).reshape(1, 1, 1, -1)
    if estimate.numel != ref.size:
        raise ValueError("length mismatch between estimate and reference")
    ref_t = Tensor(ref)
    ss = float((ref * ref).sum())
    if ss == 0.0:
        raise ValueError("reference is identically zero")
    dot = sum_all(mul(estimate, ref_t))
    alpha = scale(dot, 1.0 / ss)
    num = mul(mul(alpha, alpha), Tensor([[[[ss]]]]))
    err = sub(estimate, mul(alpha, ref_t))
    den = sum_all(mul(err, err))
    eps = add(scale(add(num, den), 1e-10), 1e-300)
    ratio = div(add(num, eps), add(den, eps))
    return scale(log10_(ratio), -10.0)


def measure_snr(signal, noise) -> float:
    sig, nse = _as_samples(signal), _as_samples(noise)
    p_v = float(np.mean(nse * nse))
    if p_v <= 0.0:
        raise ValueError("noise power is zero")
    p_s = float(np.mean(sig * sig))
    if p_s <= 0.0:
        raise ValueError("signal power is zero")
    return float(10.0 * np.log10(p_s / p_v))


# ---------------------------------------------------------------------------
# STOI


def _stoi_band_matrix() -> np.ndarray:
    freqs = np.arange(STOI_NFFT // 2 + 1) * STOI_FS / STOI_NFFT
    k = np.arange(STOI_BANDS)
    cf = STOI_MIN_FREQ * 2.0 ** (k / 3.0)
    lo = STOI_MIN_FREQ * 2.0 ** ((2.0 * k - 1.0) / 6.0)
    hi = STOI_MIN_FREQ * 2.0 ** ((2.0 * k + 1.0) / 6.0)
    obm = np.zeros((STOI_BANDS, freqs.size))
    for j in range(STOI_BANDS):
        lo_bin = int(np.argmin(np.abs(freqs - lo[j])))
        hi_bin = int(np.argmin(np.abs(freqs - hi[j])))
        obm[j, lo_bin:hi_bin] = 1.0
    return obm


def _frames(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = (x.size - STOI_FRAME) // STOI_HOP + 1
    if n < 1:
        raise ValueError("signal too short for STOI framing")
    out = np.empty((n, STOI_FRAME))
    for i in range(n):
        out[i] = w * x[i * STOI_HOP : i * STOI_HOP + STOI_FRAME]
    return out


def _remove_silent_frames(ref: np.ndarray, est: np.ndarray):
    w = np.hanning(STOI_FRAME + 2)[1:-1]
    rf = _frames(ref, w)
    ef = _frames(est, w)
    energies = 20.0 * np.log10(np.linalg.norm(rf, axis=1) + _EPS)
    mask = energies > energies.max() - STOI_DYN_RANGE_DB
    rf, ef = rf[mask], ef[mask]
    n_out = (rf.shape[0] - 1) * STOI_HOP + STOI_FRAME if rf.shape[0] else 0
    ref_out = np.zeros(n_out)
    est_out = np.zeros(n_out)
    for i in range(rf.shape[0]):
        ref_out[i * STOI_HOP : i * STOI_HOP + STOI_FRAME] += rf[i]
        est_out[i * STOI_HOP : i * STOI_HOP + STOI_FRAME] += ef[i]
    return ref_out, est_out


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = np.hanning(STOI_FRAME + 2)[1:-1]
    fr = _frames(x, w)
    spec = np.fft.rfft(fr, STOI_NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ obm.T).T  # (bands, frames)


def stoi(estimate, reference, sample_rate: int = 16000) -> float:
    """Short-time objective intelligibility of ``estimate`` given clean
    ``reference``; both at 16 kHz, at least 3 s of speech-active signal."""
    est, ref = _as_samples(estimate), _as_samples(reference)
    if est.size != ref.size:
        raise ValueError("length mismatch")
    if sample_rate != 16000:
        raise ValueError("inputs must be at 16 kHz")
    if est.size < 3 * sample_rate:
        raise ValueError("STOI needs at least 3 s of signal")
    ref10 = resample_poly(ref, STOI_FS, sample_rate)
    est10 = resample_poly(est, STOI_FS, sample_rate)
    ref10, est10 = _remove_silent_frames(ref10, est10)
    if ref10.size < STOI_FRAME + STOI_HOP * (STOI_SEG - 1):
        raise ValueError("fewer than 384 ms of speech-active signal after trimming")
    obm = _stoi_band_matrix()
    x = _band_envelopes(ref10, obm)
    y = _band_envelopes(est10, obm)
    n_frames = x.shape[1]
    if n_frames < STOI_SEG:
        raise ValueError("too few frames for one STOI segment")
    clip_gain = 10.0 ** (-STOI_BETA_DB / 20.0)
    total = 0.0
    count = 0
    for m in range(STOI_SEG, n_frames + 1):
        xs = x[:, m - STOI_SEG : m]
        ys = y[:, m - STOI_SEG : m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + _EPS
        )
        ys_n = np.minimum(alpha * ys, xs * (1.0 + clip_gain))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys_n - ys_n.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + _EPS
        total += float(((xc * yc).sum(axis=1) / denom).sum())
        count += STOI_BANDS
    return total / count


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-clip metric rows plus bucket means; NaN clips excluded but counted."""

    rows: list = field(default_factory=list)  # (clip_id, snr_bucket, si_sdr, stoi)
    nan_clips: int = 0

    def add(self, clip_id: str, snr_bucket: float, si_sdr_db: float, stoi_val: float):
        if np.isnan(si_sdr_db) or np.isnan(stoi_val):
            self.nan_clips += 1
            return
        self.rows.append((clip_id, snr_bucket, float(si_sdr_db), float(stoi_val)))

    def bucket_means(self) -> dict:
        out: dict = {}
        for _, bucket, sdr, st in self.rows:
            out.setdefault(bucket, []).append((sdr, st))
        return {
            b: (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
            for b, vals in sorted(out.items())
        }

    def write(self, txt_path, csv_path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip_id", "snr_bucket", "si_sdr", "stoi"])
            for row in self.rows:
                writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])
        lines = ["clip_id          snr   si_sdr    stoi"]
        for cid, bucket, sdr, st in self.rows:
            lines.append(f"{cid:<16} {bucket:>4g} {sdr:>8.3f} {st:>7.4f}")
        lines.append("")
        lines.append("bucket means:")
        for b, (sdr, st) in self.bucket_means().items():
            lines.append(f"  snr {b:>4g} dB: si_sdr {sdr:8.3f}  stoi {st:6.4f}")
        if self.nan_clips:
            lines.append(f"excluded NaN clips: {self.nan_clips}")
        with open(txt_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
