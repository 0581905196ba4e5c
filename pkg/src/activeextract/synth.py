"""Synthetic source material: harmonic speakers and lip-aperture visual streams.

Speakers are harmonic-plus-modulation sources with distinct fundamentals and a
4-8 Hz syllabic amplitude envelope. The visual stream is a 25 FPS lip-aperture
proxy: during speech each frame encodes the downsampled speech envelope along a
fixed basis direction plus noise; during silence frames are closed-mouth noise
around zero aperture. This preserves the speech-lip synchronization cue that an
audio-visual front-end exploits, at negligible cost compared to rendered video.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, Waveform
from .errors import LengthMismatch
from .scenario import ActivityMask

VISUAL_FPS = 25
VISUAL_DIM_DEFAULT = 20
VISUAL_CUE_SNR_DB = 10.0
CLOSED_MOUTH_SIGMA = 0.05

# Active-region RMS all utterances are normalized to. Keeps mixtures inside
# [-1, 1) even at the +10 dB end of the interferer scaling range.
UTTERANCE_RMS = 0.05

MIN_FUNDAMENTAL_SEPARATION_HZ = 20.0


@dataclass
class SyntheticSpeaker:
    """A reproducible harmonic voice: fundamental, formant bumps, modulation seed."""

    speaker_id: str
    fundamental_hz: float
    formant_profile: list[tuple[float, float]]  # (center_hz, bandwidth_hz)
    modulation_seed: int


@dataclass
class VisualStream:
    """25 FPS lip-aperture feature frames for one speaker."""

    frames: np.ndarray  # (n_frames, dim)
    speaker_id: str = ""
    fps: int = VISUAL_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"visual frames must be 2-D, got {self.frames.shape}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.fps


def n_video_frames(n_samples: int, sample_rate: int = SAMPLE_RATE, fps: int = VISUAL_FPS) -> int:
    """Video frame count for an audio length; the single alignment rule project-wide."""
    return int(round(n_samples * fps / sample_rate))


def speaker_pool(n: int, seed: int) -> dict[str, SyntheticSpeaker]:
    """Deterministic pool of `n` speakers with fundamentals >= 20 Hz apart."""
    rng = np.random.default_rng(seed)
    pool: dict[str, SyntheticSpeaker] = {}
    for i in range(n):
        # 22 Hz spacing with +/-1 Hz jitter keeps any pair >= 20 Hz apart.
        f0 = 85.0 + 22.0 * i + rng.uniform(-1.0, 1.0)
        formants = [
            (rng.uniform(280.0, 850.0), rng.uniform(80.0, 160.0)),
            (rng.uniform(900.0, 2300.0), rng.uniform(100.0, 220.0)),
            (rng.uniform(2400.0, 3400.0), rng.uniform(120.0, 260.0)),
        ]
        sid = f"spk{i:02d}"
        pool[sid] = SyntheticSpeaker(sid, f0, formants, int(rng.integers(2**31)))
    return pool


def synth_speaker_utterance(
    speaker: SyntheticSpeaker, duration_s: float, seed: int
) -> tuple[Waveform, np.ndarray]:
    """Deterministic harmonic utterance plus its amplitude envelope.

    The envelope (sample rate, normalized to peak 1) is returned for
    visual-stream generation. Identical (speaker, duration, seed) inputs give
    bit-identical output.
    """
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), speaker.modulation_seed]))
    t = np.arange(n) / SAMPLE_RATE

    # Slowly vibrato'd fundamental, integrated to phase.
    vib_rate = rng.uniform(0.3, 1.2)
    vib_depth = rng.uniform(0.01, 0.04)
    f0 = speaker.fundamental_hz * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    n_harm = max(3, min(int(4000.0 / speaker.fundamental_hz), 14))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * speaker.fundamental_hz
        weight = 0.05
        for center, bw in speaker.formant_profile:
            weight += np.exp(-((fk - center) ** 2) / (2.0 * bw**2))
        x += (weight / k**0.3) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # 4-8 Hz syllabic modulation plus a slow loudness drift.
    syl_rate = rng.uniform(4.0, 8.0)
    syl = 0.5 * (1.0 + np.sin(2 * np.pi * syl_rate * t + rng.uniform(0, 2 * np.pi)))
    drift = 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    env = (0.25 + 0.75 * syl**1.3) * drift
    x *= env

    rms = float(np.sqrt(np.mean(x**2)))
    x *= UTTERANCE_RMS / max(rms, 1e-12)
    return Waveform(x), env / env.max()


def aperture_basis(dim: int = VISUAL_DIM_DEFAULT) -> np.ndarray:
    """Fixed unit vector along which the lip aperture is encoded."""
    rng = np.random.default_rng(1645)
    b = rng.normal(size=dim)
    b[0] = abs(b[0])
    return b / np.linalg.norm(b)


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])


def render_visual(
    envelope: np.ndarray,
    mask: ActivityMask,
    seed: int,
    dim: int = VISUAL_DIM_DEFAULT,
    cue_snr_db: float = VISUAL_CUE_SNR_DB,
    speaker_id: str = "",
) -> VisualStream:
    """Render the 25 FPS lip-aperture stream for one speaker's envelope/mask.

    Active frames (majority of their samples speaking) carry the frame-mean
    envelope along the aperture basis plus noise at `cue_snr_db`; inactive
    frames are closed-mouth noise around zero.
    """
    envelope = np.asarray(envelope, dtype=np.float64)
    if len(envelope) != len(mask):
        raise LengthMismatch(f"envelope {len(envelope)} vs mask {len(mask)}")
    hop = mask.sample_rate // VISUAL_FPS
    n_frames = n_video_frames(len(mask), mask.sample_rate)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))

    m = _fit_length(mask.frames.astype(np.float64), n_frames * hop).reshape(n_frames, hop)
    em = _fit_length(envelope * mask.frames, n_frames * hop).reshape(n_frames, hop)
    active_counts = m.sum(axis=1)
    apertures = em.sum(axis=1) / np.maximum(active_counts, 1.0)
    active = active_counts > hop / 2

    basis = aperture_basis(dim)
    frames = np.outer(np.where(active, apertures, 0.0), basis)
    if active.any():
        sigma_active = float(np.sqrt(np.mean(apertures[active] ** 2))) * 10.0 ** (-cue_snr_db / 20.0)
    else:
        sigma_active = CLOSED_MOUTH_SIGMA
    sigma = np.where(active, sigma_active, CLOSED_MOUTH_SIGMA)
    frames += rng.normal(size=(n_frames, dim)) * sigma[:, None]
    return VisualStream(frames=frames, speaker_id=speaker_id)


def aperture_track(stream: VisualStream) -> np.ndarray:
    """Recover the scalar aperture per frame by projecting onto the basis."""
    return stream.frames @ aperture_basis(stream.frames.shape[1])
