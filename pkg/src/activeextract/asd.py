"""Toy TalkNet-shape active speaker detection.

MFCC audio encoder and a 1-D conv visual encoder meet in a pair of
cross-attention blocks (audio injected into the visual stream gives P_v,
visual into audio gives P_a), a self-attention block over the fused sequence
gives the speaking-activity feature P_av, and a linear+sigmoid head emits
per-frame activity probabilities. P_v and P_av double as the extraction
reference for the separator. Everything runs at the 25 fps visual frame rate.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.fft
import torch
import torch.nn as nn

from .audio import SAMPLE_RATE, Waveform
from .errors import DurationMismatch, LabelLengthMismatch, TooShort
from .scenario import ActivityMask
from .synth import VISUAL_FPS, VisualStream, n_video_frames

MFCC_WINDOW = 400  # 25 ms analysis window
MFCC_NFFT = 512
MFCC_N_MELS = 26
MFCC_LOG_FLOOR = 1e-10
_PREEMPHASIS = 0.97

REFERENCE_MODES = ("both", "pv_only", "pav_only")


@dataclass
class AsdConfig:
    visual_dim_in: int
    mfcc_coeffs: int = 13
    mfcc_hop_ms: float = 10.0
    d_v: int = 128
    d_av: int = 256
    attention_heads: int = 8
    encoder_layers: int = 2

    def __post_init__(self):
        # P_v is 128-d and P_av 256-d by contract; the separator's reference
        # widths (128/256/384) are derived from them.
        if self.d_v != 128 or self.d_av != 256:
            raise ValueError(f"d_v/d_av are fixed at 128/256, got {self.d_v}/{self.d_av}")
        if self.d_av % self.attention_heads != 0:
            raise ValueError("attention_heads must divide d_av")

    @property
    def hop_samples(self) -> int:
        return int(round(self.mfcc_hop_ms * SAMPLE_RATE / 1000.0))

    @property
    def frames_per_video_frame(self) -> int:
        return int(round(SAMPLE_RATE / VISUAL_FPS)) // self.hop_samples

    @property
    def mfcc_dim(self) -> int:
        return self.mfcc_coeffs * self.frames_per_video_frame


@dataclass
class AsdFeatures:
    """Per-frame feature taps of one forward pass, all at visual frame rate."""

    F_a: torch.Tensor  # audio content feature, frames x d_v
    F_v: torch.Tensor  # lip dynamics feature, frames x d_v
    P_a: torch.Tensor  # attention audio feature, frames x d_v
    P_v: torch.Tensor  # attention visual feature, frames x 128
    P_av: torch.Tensor  # speaking activity feature, frames x 256
    activity_prob: torch.Tensor  # frames, in [0, 1]
    activity_logits: torch.Tensor = None


def _mel_filterbank(n_mels: int, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over the rfft bins, HTK mel scale."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_points = np.linspace(to_mel(0.0), to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = from_mel(mel_points)
    bins = np.floor((nfft + 1) * hz_points / sample_rate).astype(int)
    fb = np.zeros((n_mels, nfft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            fb[m - 1, k] = (k - left) / max(center - left, 1)
        for k in range(center, right):
            fb[m - 1, k] = (right - k) / max(right - center, 1)
    return fb


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def mfcc(audio: Waveform, config: AsdConfig) -> np.ndarray:
    """13-coefficient MFCCs at 100 fps, aggregated 4:1 to 25 fps.

    Each group of 4 consecutive 10 ms frames is concatenated into one
    52-dimensional vector, so the output length equals the clip's video frame
    count exactly; the audio tail is zero-padded to fill the last group.
    """
    x = audio.samples
    if len(x) < MFCC_WINDOW:
        raise TooShort(f"{len(x)} samples, need at least {MFCC_WINDOW}")
    hop = config.hop_samples
    group = config.frames_per_video_frame
    n_out = n_video_frames(len(x), audio.sample_rate)
    n_frames = group * n_out
    needed = (n_frames - 1) * hop + MFCC_WINDOW
    if needed > len(x):
        x = np.concatenate([x, np.zeros(needed - len(x))])
    x = np.concatenate([x[:1], x[1:] - _PREEMPHASIS * x[:-1]])

    idx = np.arange(MFCC_WINDOW)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(MFCC_WINDOW)
    spectrum = np.abs(np.fft.rfft(frames, n=MFCC_NFFT, axis=1)) ** 2

    key = (MFCC_N_MELS, MFCC_NFFT, audio.sample_rate)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = _mel_filterbank(*key)
    mel = np.log(np.maximum(spectrum @ _FILTERBANK_CACHE[key].T, MFCC_LOG_FLOOR))
    coeffs = scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, : config.mfcc_coeffs]
    return coeffs.reshape(n_out, group * config.mfcc_coeffs)


def downsample_mask_to_frames(mask: ActivityMask, n_frames: int | None = None) -> np.ndarray:
    """Per-frame {0,1} labels: a frame is active iff more than half its samples are."""
    samples = mask.frames
    if n_frames is None:
        n_frames = n_video_frames(len(samples), mask.sample_rate)
    hop = int(round(mask.sample_rate / VISUAL_FPS))
    labels = np.zeros(n_frames, dtype=np.uint8)
    for f in range(n_frames):
        chunk = samples[f * hop : min((f + 1) * hop, len(samples))]
        if len(chunk) and np.mean(chunk) > 0.5:
            labels[f] = 1
    return labels


class AttentionBlock(nn.Module):
    """Multi-head attention with residual and feed-forward, TalkNet style.

    forward(src, context): src supplies queries and the residual path,
    context supplies keys and values. Self-attention is src == context.
    """

    def __init__(self, d_model: int, nhead: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, nhead, dropout=0.0, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, d_model * 2), nn.ReLU(), nn.Linear(d_model * 2, d_model)
        )

    def forward(self, src: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attn(src, context, context, need_weights=False)
        x = self.norm1(src + attended)
        return self.norm2(x + self.ff(x))


def _conv_encoder(dim_in: int, dim_out: int, layers: int) -> nn.Sequential:
    blocks: list[nn.Module] = []
    d = dim_in
    for k in range(layers):
        blocks.append(nn.Conv1d(d, dim_out, kernel_size=3, padding=1))
        if k < layers - 1:
            blocks.append(nn.ReLU())
        d = dim_out
    return nn.Sequential(*blocks)


class AsdNet(nn.Module):
    """Audio/visual encoders, cross attention, self attention, activity head."""

    def __init__(self, config: AsdConfig):
        super().__init__()
        self.config = config
        d = config.d_v
        self.audio_encoder = _conv_encoder(config.mfcc_dim, d, config.encoder_layers)
        self.visual_encoder = _conv_encoder(config.visual_dim_in, d, config.encoder_layers)
        self.audio_norm = nn.LayerNorm(d)
        self.visual_norm = nn.LayerNorm(d)
        self.cross_a2v = AttentionBlock(d, config.attention_heads)
        self.cross_v2a = AttentionBlock(d, config.attention_heads)
        self.self_av = AttentionBlock(config.d_av, config.attention_heads)
        self.head = nn.Linear(config.d_av, 1)

    def forward(self, audio_feats: torch.Tensor, visual: torch.Tensor) -> AsdFeatures:
        """audio_feats: (B, frames, mfcc_dim); visual: (B, frames, visual_dim_in)."""
        if audio_feats.shape[1] != visual.shape[1]:
            raise DurationMismatch(
                f"{audio_feats.shape[1]} audio frames vs {visual.shape[1]} visual frames"
            )
        f_a = self.audio_norm(self.audio_encoder(audio_feats.transpose(1, 2)).transpose(1, 2))
        f_v = self.visual_norm(self.visual_encoder(visual.transpose(1, 2)).transpose(1, 2))
        p_v = self.cross_a2v(f_v, f_a)  # audio into the visual stream
        p_a = self.cross_v2a(f_a, f_v)
        p_av = self.self_av(torch.cat([p_a, p_v], dim=-1), torch.cat([p_a, p_v], dim=-1))
        logits = self.head(p_av).squeeze(-1)
        return AsdFeatures(
            F_a=f_a,
            F_v=f_v,
            P_a=p_a,
            P_v=p_v,
            P_av=p_av,
            activity_prob=torch.sigmoid(logits),
            activity_logits=logits,
        )


def asd_forward(net: AsdNet, audio: Waveform, visual: VisualStream) -> AsdFeatures:
    """Single-clip forward from raw inputs; sequences unbatched, (frames, dim).

    Audio and visual durations must agree within one video frame; a one-frame
    MFCC surplus or deficit (odd clip lengths) is trimmed or zero-padded.
    """
    feats = mfcc(audio, net.config)
    n_v = len(visual.frames)
    if abs(len(feats) - n_v) > 1:
        raise DurationMismatch(f"{len(feats)} audio frames vs {n_v} visual frames")
    if len(feats) > n_v:
        feats = feats[:n_v]
    elif len(feats) < n_v:
        feats = np.concatenate([feats, np.zeros((n_v - len(feats), feats.shape[1]))])
    a = torch.from_numpy(feats).to(torch.float32).unsqueeze(0)
    v = torch.from_numpy(np.asarray(visual.frames, dtype=np.float32)).unsqueeze(0)
    out = net(a, v)
    return AsdFeatures(
        F_a=out.F_a[0],
        F_v=out.F_v[0],
        P_a=out.P_a[0],
        P_v=out.P_v[0],
        P_av=out.P_av[0],
        activity_prob=out.activity_prob[0],
        activity_logits=out.activity_logits[0],
    )


def asd_train_step(
    net: AsdNet,
    audio_feats: torch.Tensor,
    visual: torch.Tensor,
    frame_labels: torch.Tensor,
    frame_mask: torch.Tensor | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> float:
    """One BCE step over a padded batch; returns the mean loss over real frames.

    frame_mask marks non-padding frames (all real when omitted). With an
    optimizer, runs backward and steps; without, just evaluates.
    """
    if frame_labels.shape != audio_feats.shape[:2]:
        raise LabelLengthMismatch(
            f"labels {tuple(frame_labels.shape)} vs frames {tuple(audio_feats.shape[:2])}"
        )
    out = net(audio_feats, visual)
    bce = nn.functional.binary_cross_entropy_with_logits(
        out.activity_logits, frame_labels.to(out.activity_logits.dtype), reduction="none"
    )
    if frame_mask is not None:
        bce = bce * frame_mask
        loss = bce.sum() / frame_mask.sum().clamp(min=1)
    else:
        loss = bce.mean()
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def reference_features(features: AsdFeatures, mode: str) -> torch.Tensor:
    """The extraction reference v: P_v and P_av concatenated, or either alone."""
    if mode == "both":
        return torch.cat([features.P_v, features.P_av], dim=-1)
    if mode == "pv_only":
        return features.P_v
    if mode == "pav_only":
        return features.P_av
    raise ValueError(f"unknown reference mode {mode!r}, expected one of {REFERENCE_MODES}")


def reference_dim(mode: str, config: AsdConfig) -> int:
    if mode == "both":
        return config.d_v + config.d_av
    if mode == "pv_only":
        return config.d_v
    if mode == "pav_only":
        return config.d_av
    raise ValueError(f"unknown reference mode {mode!r}, expected one of {REFERENCE_MODES}")


def save_asd_checkpoint(
    path, net: AsdNet, seed: int, extra: dict | None = None
) -> None:
    """Weights plus config, loadable without the extraction stack."""
    torch.save(
        {
            "kind": "asd",
            "state": net.state_dict(),
            "config": dataclasses.asdict(net.config),
            "seed": seed,
            "extra": extra or {},
        },
        path,
    )


def load_asd_checkpoint(path) -> tuple[AsdNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind", "asd") != "asd":
        raise ValueError(f"not an ASD checkpoint: kind={payload.get('kind')!r}")
    net = AsdNet(AsdConfig(**payload["config"]))
    net.load_state_dict(payload["state"])
    net.eval()
    return net, {"seed": payload["seed"], "extra": payload["extra"]}


def binary_activity(
    features: AsdFeatures, threshold: float = 0.5
) -> tuple[np.ndarray, bool]:
    """Per-frame activity decisions and the clip-level flag (any frame active).

    Frames exactly at threshold count as active.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    prob = features.activity_prob.detach().cpu().numpy()
    frames = (prob >= threshold).astype(np.uint8)
    return frames, bool(frames.any())
