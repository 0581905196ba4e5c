"""Waveform container, energy/projection math, and the two evaluation metrics.

All audio in this project is mono 16 kHz. Metrics are reported in dB; degenerate
numerators/denominators are floored at EPS and the resulting values capped at
+/-60 dB so that perfect reconstruction and pure silence never produce
infinities in reports.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptySignal,
    LengthMismatch,
    SampleRateMismatch,
    SilentReference,
    ZeroEnergySource,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
EPS = 1e-8
DB_CAP = 60.0


@dataclass
class Waveform:
    """Mono sampled audio. Samples are dimensionless amplitudes, nominally [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN/Inf samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MetricValue:
    """A single dB-valued metric, with a flag for when an epsilon floor/cap fired."""

    value: float
    kind: str  # one of: si_snr, power, sdr_loss, sa_sdr_loss, sadl_loss
    floored: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.kind} metric is non-finite: {self.value}")


def _check_pair(estimate: Waveform, reference: Waveform) -> None:
    if estimate.sample_rate != reference.sample_rate:
        raise SampleRateMismatch(
            f"{estimate.sample_rate} Hz vs {reference.sample_rate} Hz"
        )
    if len(estimate) != len(reference):
        raise LengthMismatch(f"{len(estimate)} vs {len(reference)} samples")


def si_snr(estimate: Waveform, reference: Waveform) -> MetricValue:
    """Scale-invariant SNR of `estimate` against `reference`, in dB.

    Projects the estimate onto the reference (alpha = <est, ref> / ||ref||^2)
    and returns 10*log10(||alpha*ref||^2 / ||est - alpha*ref||^2). Both norms
    are squared. Raises SilentReference when the reference is silent; such
    clips are scored by `power` instead.
    """
    _check_pair(estimate, reference)
    s = reference.samples
    s_hat = estimate.samples
    ref_energy = float(np.dot(s, s))
    if ref_energy < EPS:
        raise SilentReference("reference energy below epsilon; use power()")
    alpha = float(np.dot(s_hat, s)) / ref_energy
    target = alpha * s
    target_energy = float(np.dot(target, target))
    if target_energy < EPS:
        # Estimate has no component along the reference (e.g. orthogonal or zero).
        return MetricValue(-DB_CAP, "si_snr", floored=True)
    error = s_hat - target
    error_energy = float(np.dot(error, error))
    if error_energy < EPS:
        return MetricValue(DB_CAP, "si_snr", floored=True)
    value = 10.0 * np.log10(target_energy / error_energy)
    value = float(np.clip(value, -DB_CAP, DB_CAP))
    floored = value in (-DB_CAP, DB_CAP)
    return MetricValue(value, "si_snr", floored=floored)


def power(estimate: Waveform) -> MetricValue:
    """Energy per second of `estimate` in dB: 10*log10(||s||^2 / T_s).

    The per-second energy is floored at eps, so silence reads -80 dB for any
    clip duration.
    """
    if len(estimate) == 0:
        raise EmptySignal("power() of a zero-length waveform")
    energy = float(np.dot(estimate.samples, estimate.samples))
    ratio = energy / estimate.duration_s
    floored = ratio < EPS
    value = 10.0 * np.log10(max(ratio, EPS))
    return MetricValue(float(value), "power", floored=floored)


def active_power(wav: Waveform, mask: np.ndarray | None = None) -> float:
    """Mean square amplitude over active samples.

    `mask` marks the active samples; when omitted, every nonzero sample counts
    as active (clip-internal silence is digital zero in this project).
    """
    x = wav.samples
    if mask is None:
        active = x != 0.0
    else:
        mask = np.asarray(mask)
        if len(mask) != len(x):
            raise LengthMismatch(f"mask {len(mask)} vs samples {len(x)}")
        active = mask.astype(bool)
    n = int(np.count_nonzero(active))
    if n == 0:
        raise ZeroEnergySource("no active samples")
    p = float(np.dot(x[active], x[active])) / n
    if p < EPS:
        raise ZeroEnergySource("active region has (near-)zero energy")
    return p


def mix_at_snr(
    target: Waveform,
    interferer: Waveform,
    snr_db: float,
    target_mask: np.ndarray | None = None,
    interferer_mask: np.ndarray | None = None,
) -> tuple[Waveform, float]:
    """Mix `interferer` into `target` so the active-region SNR equals `snr_db`.

    Powers are measured over each signal's active samples only; sparsely placed
    sources would otherwise have their SNR diluted by silence. Returns the
    mixture and the scale applied to the interferer, for manifest reproducibility.
    """
    _check_pair(target, interferer)
    p_t = active_power(target, target_mask)
    p_i = active_power(interferer, interferer_mask)
    scale = float(np.sqrt(p_t / p_i) * 10.0 ** (-snr_db / 20.0))
    mixture = Waveform(target.samples + scale * interferer.samples, target.sample_rate)
    return mixture, scale


# --- WAV I/O: PCM signed 16-bit little-endian, mono, 16 kHz ---

_PCM_SCALE = 32768.0


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16 kHz PCM16 WAV file; samples normalized to [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise SampleRateMismatch(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise SampleRateMismatch(f"{path}: expected PCM16, got width {f.getsampwidth()}")
        if f.getframerate() != SAMPLE_RATE:
            raise SampleRateMismatch(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()}")
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    return Waveform(samples, SAMPLE_RATE)


def write_wav(path: str | Path, wav: Waveform) -> int:
    """Write as mono PCM16. Out-of-range samples are clipped; returns the clip count."""
    if wav.sample_rate != SAMPLE_RATE:
        raise SampleRateMismatch(f"refusing to write {wav.sample_rate} Hz audio")
    x = wav.samples
    hi = 32767.0 / _PCM_SCALE
    clipped = int(np.count_nonzero((x < -1.0) | (x > hi)))
    if clipped:
        logger.warning("write_wav(%s): clipped %d samples", path, clipped)
    pcm = np.round(np.clip(x, -1.0, hi) * _PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
    return clipped
