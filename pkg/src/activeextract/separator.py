"""The extraction stack: waveform encoder/decoder, two separator backbones,
reference fusion, and assembly of the full model plus the gated baseline.

The mixture is encoded by a strided 1-D convolution into frames h', a backbone
conditioned on the reference sequence v predicts a sigmoid mask m, and the
decoder resynthesizes the estimate from m * h'. Backbones: a dual-path
recurrent network fusing an upsampled v at the input, and a chunked
transformer whose cross-modal layer attends to v at video rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .asd import (
    AsdConfig,
    AsdFeatures,
    AsdNet,
    asd_forward,
    binary_activity,
    mfcc,
    reference_dim,
    reference_features,
)
from .audio import Waveform
from .errors import ShapeMismatch, TooShort
from .synth import VisualStream, n_video_frames

BACKBONES = ("dprnn", "xmodal")
REFERENCE_SOURCES = ("asd", "visual")


@dataclass
class EncoderConfig:
    kernel_L: int
    channels_N: int

    def __post_init__(self):
        if self.kernel_L % 2 != 0:
            raise ValueError(f"kernel_L must be even, got {self.kernel_L}")

    @property
    def stride(self) -> int:
        return self.kernel_L // 2


@dataclass
class DprnnConfig:
    feature_B: int = 64
    chunk_K: int = 100
    repeats_R: int = 6
    hidden: int = 128

    def __post_init__(self):
        if min(self.feature_B, self.chunk_K, self.repeats_R, self.hidden) <= 0:
            raise ValueError("all DPRNN dimensions must be positive")


@dataclass
class XModalConfig:
    chunk_C: int = 160
    n_intra: int = 4
    n_inter: int = 4
    width_N: int = 256
    heads: int = 8
    d_ffn: int | None = None  # defaults to 4x width

    def __post_init__(self):
        if self.width_N % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width_N})")
        if self.d_ffn is None:
            self.d_ffn = 4 * self.width_N


def frame_count(n_samples: int, cfg: EncoderConfig) -> int:
    """Encoder frames for a given length: floor((T'-L)/stride)+1 on the padded T'."""
    if n_samples < cfg.kernel_L:
        raise TooShort(f"{n_samples} samples, need at least kernel_L={cfg.kernel_L}")
    return (n_samples - cfg.kernel_L + cfg.stride - 1) // cfg.stride + 1


class AudioEncoder(nn.Module):
    """Strided 1-D convolution with ReLU; right-pads to a whole frame."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(1, cfg.channels_N, cfg.kernel_L, stride=cfg.stride, bias=False)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, T) -> h': (B, frames, N)."""
        n = frame_count(wav.shape[-1], self.cfg)
        padded_len = self.cfg.kernel_L + self.cfg.stride * (n - 1)
        if padded_len > wav.shape[-1]:
            wav = nn.functional.pad(wav, (0, padded_len - wav.shape[-1]))
        return torch.relu(self.conv(wav.unsqueeze(1))).transpose(1, 2)


class AudioDecoder(nn.Module):
    """Transposed convolution back to waveform, trimmed to the mixture length."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.deconv = nn.ConvTranspose1d(
            cfg.channels_N, 1, cfg.kernel_L, stride=cfg.stride, bias=False
        )

    def forward(self, feat: torch.Tensor, length: int) -> torch.Tensor:
        """(B, frames, N) -> (B, length)."""
        out = self.deconv(feat.transpose(1, 2)).squeeze(1)
        if out.shape[-1] < length:
            out = nn.functional.pad(out, (0, length - out.shape[-1]))
        return out[..., :length]


def upsample_reference(v, target_frames: int):
    """Repeat each reference frame to reach target_frames, remainder on the last.

    Each frame is repeated ceil(target/len) times and the tail trimmed, so the
    final frame absorbs the remainder. Works on (frames, d) and (B, frames, d).
    """
    n = v.shape[-2]
    if target_frames < n:
        raise ShapeMismatch(f"cannot upsample {n} frames down to {target_frames}")
    r = -(-target_frames // n)
    if isinstance(v, np.ndarray):
        return np.repeat(v, r, axis=-2)[..., :target_frames, :]
    return torch.repeat_interleave(v, r, dim=-2)[..., :target_frames, :]


def chunk_sequence(x: torch.Tensor, chunk: int, hop: int) -> tuple[torch.Tensor, int]:
    """(B, F, C) -> ((B, S, chunk, C), padded_F) with hop-strided chunks."""
    n = x.shape[1]
    n_chunks = max(-(-max(n - chunk, 0) // hop), 0) + 1
    padded = chunk + hop * (n_chunks - 1)
    if padded > n:
        x = nn.functional.pad(x, (0, 0, 0, padded - n))
    stacked = x.unfold(1, chunk, hop)  # (B, S, C, chunk)
    return stacked.permute(0, 1, 3, 2), padded


def overlap_add_chunks(chunks: torch.Tensor, hop: int, n_frames: int) -> torch.Tensor:
    """Inverse of chunk_sequence: average overlapping contributions, trim padding."""
    b, s, k, c = chunks.shape
    padded = k + hop * (s - 1)
    out = chunks.new_zeros(b, padded, c)
    count = chunks.new_zeros(1, padded, 1)
    for i in range(s):
        out[:, i * hop : i * hop + k] += chunks[:, i]
        count[:, i * hop : i * hop + k] += 1.0
    return (out / count)[:, :n_frames]


class PositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int = 20000):
        super().__init__()
        pos = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div[: (d_model + 1) // 2])
        self.register_buffer("pe", pe, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[: x.shape[-2]]


class DprnnBackbone(nn.Module):
    """Dual-path BiLSTM mask estimator; the reference is fused at the input.

    Channel-concat (h' || v upsampled to frame rate) -> 1x1 projection to B ->
    repeats of intra-chunk and inter-chunk recurrent blocks over 50%-overlap
    chunks -> 1x1 projection to N -> sigmoid mask.
    """

    def __init__(self, cfg: DprnnConfig, channels_n: int, d_ref: int):
        super().__init__()
        self.cfg = cfg
        self.input_norm = nn.LayerNorm(channels_n)
        self.input_proj = nn.Linear(channels_n + d_ref, cfg.feature_B)
        self.intra_rnn = nn.ModuleList()
        self.intra_proj = nn.ModuleList()
        self.intra_norm = nn.ModuleList()
        self.inter_rnn = nn.ModuleList()
        self.inter_proj = nn.ModuleList()
        self.inter_norm = nn.ModuleList()
        for _ in range(cfg.repeats_R):
            self.intra_rnn.append(
                nn.LSTM(cfg.feature_B, cfg.hidden, batch_first=True, bidirectional=True)
            )
            self.intra_proj.append(nn.Linear(2 * cfg.hidden, cfg.feature_B))
            self.intra_norm.append(nn.LayerNorm(cfg.feature_B))
            self.inter_rnn.append(
                nn.LSTM(cfg.feature_B, cfg.hidden, batch_first=True, bidirectional=True)
            )
            self.inter_proj.append(nn.Linear(2 * cfg.hidden, cfg.feature_B))
            self.inter_norm.append(nn.LayerNorm(cfg.feature_B))
        self.out = nn.Sequential(nn.PReLU(), nn.Linear(cfg.feature_B, channels_n))

    def forward(self, h_prime: torch.Tensor, v_aligned: torch.Tensor) -> torch.Tensor:
        """h': (B, F, N); v_aligned: (B, F, d_ref) -> mask (B, F, N) in [0,1]."""
        if h_prime.shape[:2] != v_aligned.shape[:2]:
            raise ShapeMismatch(
                f"h' frames {tuple(h_prime.shape[:2])} vs reference {tuple(v_aligned.shape[:2])}"
            )
        n_frames = h_prime.shape[1]
        x = self.input_proj(torch.cat([self.input_norm(h_prime), v_aligned], dim=-1))
        hop = max(self.cfg.chunk_K // 2, 1)
        chunks, _ = chunk_sequence(x, self.cfg.chunk_K, hop)
        b, s, k, c = chunks.shape
        for layer in range(self.cfg.repeats_R):
            intra = chunks.reshape(b * s, k, c)
            intra, _ = self.intra_rnn[layer](intra)
            intra = self.intra_norm[layer](self.intra_proj[layer](intra)).reshape(b, s, k, c)
            chunks = chunks + intra
            inter = chunks.permute(0, 2, 1, 3).reshape(b * k, s, c)
            inter, _ = self.inter_rnn[layer](inter)
            inter = self.inter_norm[layer](self.inter_proj[layer](inter))
            chunks = chunks + inter.reshape(b, k, s, c).permute(0, 2, 1, 3)
        merged = overlap_add_chunks(chunks, hop, n_frames)
        return torch.sigmoid(self.out(merged))


class CrossModalLayer(nn.Module):
    """One attention layer where audio chunk frames query the reference sequence."""

    def __init__(self, d_model: int, heads: int, d_ffn: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, heads, dropout=0.0, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ffn), nn.ReLU(), nn.Linear(d_ffn, d_model))

    def forward(
        self, x: torch.Tensor, ref: torch.Tensor, need_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        attended, weights = self.attn(
            self.norm1(x), ref, ref, need_weights=need_weights, average_attn_weights=True
        )
        x = x + attended
        return x + self.ff(self.norm2(x)), weights


class XModalBackbone(nn.Module):
    """Chunked transformer mask estimator with a cross-modal reference layer.

    50%-overlap chunks -> intra self-attention within chunks -> one
    cross-modal layer attending every chunk frame to the reference at video
    rate -> inter self-attention across chunks -> overlap-add -> sigmoid mask.
    """

    def __init__(self, cfg: XModalConfig, channels_n: int, d_ref: int):
        super().__init__()
        self.cfg = cfg
        w = cfg.width_N
        self.input_norm = nn.LayerNorm(channels_n)
        self.input_proj = nn.Linear(channels_n, w)
        self.ref_proj = nn.Linear(d_ref, w)
        self.intra_pe = PositionalEncoding(w)
        self.ref_pe = PositionalEncoding(w)
        self.inter_pe = PositionalEncoding(w)

        def _layer():
            return nn.TransformerEncoderLayer(
                w, cfg.heads, dim_feedforward=cfg.d_ffn, dropout=0.0,
                batch_first=True, norm_first=True,
            )

        self.intra = nn.ModuleList(_layer() for _ in range(cfg.n_intra))
        self.cross = CrossModalLayer(w, cfg.heads, cfg.d_ffn)
        self.inter = nn.ModuleList(_layer() for _ in range(cfg.n_inter))
        self.out = nn.Sequential(nn.PReLU(), nn.Linear(w, channels_n))

    def forward(
        self, h_prime: torch.Tensor, v: torch.Tensor, return_attention: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """h': (B, F, N); v: (B, video_frames, d_ref) -> mask (B, F, N)."""
        if h_prime.shape[0] != v.shape[0]:
            raise ShapeMismatch(f"batch {h_prime.shape[0]} vs reference batch {v.shape[0]}")
        n_frames = h_prime.shape[1]
        x = self.input_proj(self.input_norm(h_prime))
        hop = max(self.cfg.chunk_C // 2, 1)
        chunks, _ = chunk_sequence(x, self.cfg.chunk_C, hop)
        b, s, k, c = chunks.shape
        flat = self.intra_pe(chunks.reshape(b * s, k, c))
        for layer in self.intra:
            flat = layer(flat)
        ref = self.ref_pe(self.ref_proj(v))
        n_ref = ref.shape[1]
        ref = ref.unsqueeze(1).expand(b, s, n_ref, c).reshape(b * s, n_ref, c)
        flat, attention = self.cross(flat, ref, need_weights=return_attention)
        chunks = flat.reshape(b, s, k, c)
        inter = self.inter_pe(chunks.permute(0, 2, 1, 3).reshape(b * k, s, c))
        for layer in self.inter:
            inter = layer(inter)
        chunks = inter.reshape(b, k, s, c).permute(0, 2, 1, 3)
        merged = overlap_add_chunks(chunks, hop, n_frames)
        mask = torch.sigmoid(self.out(merged))
        if return_attention:
            return mask, attention.reshape(b, s, k, -1)
        return mask


class VisualFrontend(nn.Module):
    """Conv encoder turning raw visual frames into the lipreading reference."""

    def __init__(self, dim_in: int, dim_out: int = 128, layers: int = 2):
        super().__init__()
        blocks: list[nn.Module] = []
        d = dim_in
        for k in range(layers):
            blocks.append(nn.Conv1d(d, dim_out, kernel_size=3, padding=1))
            if k < layers - 1:
                blocks.append(nn.ReLU())
            d = dim_out
        self.net = nn.Sequential(*blocks)
        self.norm = nn.LayerNorm(dim_out)
        self.dim_out = dim_out

    def forward(self, visual: torch.Tensor) -> torch.Tensor:
        """(B, frames, dim_in) -> (B, frames, dim_out)."""
        return self.norm(self.net(visual.transpose(1, 2)).transpose(1, 2))


@dataclass
class ExtractorConfig:
    encoder: EncoderConfig
    asd: AsdConfig
    backbone: str = "xmodal"
    mode: str = "both"  # which ASD features form the reference
    reference_source: str = "asd"  # "visual" is the lipreading-baseline shape
    dprnn: DprnnConfig | None = None
    xmodal: XModalConfig | None = None
    visual_ref_dim: int = 128  # reference width when reference_source == "visual"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.reference_source not in REFERENCE_SOURCES:
            raise ValueError(f"unknown reference source {self.reference_source!r}")
        if self.backbone == "dprnn" and self.dprnn is None:
            self.dprnn = DprnnConfig()
        if self.backbone == "xmodal" and self.xmodal is None:
            self.xmodal = XModalConfig()

    @property
    def d_ref(self) -> int:
        if self.reference_source == "visual":
            return self.visual_ref_dim
        return reference_dim(self.mode, self.asd)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExtractorConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["asd"] = AsdConfig(**d["asd"])
        if d.get("dprnn"):
            d["dprnn"] = DprnnConfig(**d["dprnn"])
        if d.get("xmodal"):
            d["xmodal"] = XModalConfig(**d["xmodal"])
        return ExtractorConfig(**d)


class ActiveExtract(nn.Module):
    """ASD-referenced target speaker extraction, end to end.

    forward() consumes batched tensors; active_extract_forward() wraps single
    clips. With reference_source == "visual" the same separator runs from a
    lipreading-style frontend instead of ASD features (the baseline shape);
    ASD features are then not computed and the returned features are None.
    """

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        self.encoder = AudioEncoder(config.encoder)
        self.decoder = AudioDecoder(config.encoder)
        if config.reference_source == "asd":
            self.asd_net = AsdNet(config.asd)
            self.visual_frontend = None
        else:
            self.asd_net = None
            self.visual_frontend = VisualFrontend(
                config.asd.visual_dim_in, config.visual_ref_dim
            )
        if config.backbone == "dprnn":
            self.backbone = DprnnBackbone(config.dprnn, config.encoder.channels_N, config.d_ref)
        else:
            self.backbone = XModalBackbone(config.xmodal, config.encoder.channels_N, config.d_ref)

    def forward(
        self,
        wav: torch.Tensor,
        visual: torch.Tensor,
        mfcc_feats: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, AsdFeatures | None]:
        """wav: (B, T); visual: (B, frames, D); mfcc_feats: (B, frames, mfcc_dim).

        mfcc_feats is required when the reference comes from the ASD.
        Returns (estimate (B, T), AsdFeatures or None).
        """
        h_prime = self.encoder(wav)
        if self.config.reference_source == "asd":
            if mfcc_feats is None:
                raise ShapeMismatch("ASD-referenced model needs mfcc_feats")
            features = self.asd_net(mfcc_feats, visual)
            v = reference_features(features, self.config.mode)
        else:
            features = None
            v = self.visual_frontend(visual)
        if self.config.backbone == "dprnn":
            v = upsample_reference(v, h_prime.shape[1])
        mask = self.backbone(h_prime, v)
        est = self.decoder(mask * h_prime, wav.shape[-1])
        return est, features


def _clip_tensors(
    model: ActiveExtract, y: Waveform, visual: VisualStream
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    n_v = len(visual.frames)
    wav = torch.from_numpy(y.samples).to(torch.float32).unsqueeze(0)
    vis = torch.from_numpy(np.asarray(visual.frames, dtype=np.float32)).unsqueeze(0)
    feats = None
    if model.config.reference_source == "asd":
        m = mfcc(y, model.config.asd)
        if abs(len(m) - n_v) > 1:
            raise ShapeMismatch(f"{len(m)} mfcc frames vs {n_v} visual frames")
        if len(m) > n_v:
            m = m[:n_v]
        elif len(m) < n_v:
            m = np.concatenate([m, np.zeros((n_v - len(m), m.shape[1]))])
        feats = torch.from_numpy(m).to(torch.float32).unsqueeze(0)
    return wav, vis, feats


def active_extract_forward(
    model: ActiveExtract, y: Waveform, visual: VisualStream
) -> tuple[Waveform, AsdFeatures | None]:
    """Single-clip inference: Waveform in, Waveform out, no gradients."""
    wav, vis, feats = _clip_tensors(model, y, visual)
    with torch.no_grad():
        est, features = model(wav, vis, feats)
    out = Waveform(est[0].to(torch.float64).numpy(), y.sample_rate)
    if features is None:
        return out, None
    return out, AsdFeatures(
        F_a=features.F_a[0], F_v=features.F_v[0], P_a=features.P_a[0],
        P_v=features.P_v[0], P_av=features.P_av[0],
        activity_prob=features.activity_prob[0],
        activity_logits=features.activity_logits[0],
    )


def gated_baseline_forward(
    asd_net: AsdNet,
    extractor: ActiveExtract,
    y: Waveform,
    visual: VisualStream,
    threshold: float = 0.5,
    force_gate: bool | None = None,
) -> Waveform:
    """Sequential ASD + extractor: zero output when the clip-level gate is off.

    force_gate overrides the ASD decision (used to corrupt the gate in
    robustness experiments); None means decide from the ASD.
    """
    if force_gate is None:
        feats = asd_forward(asd_net, y, visual)
        _, active = binary_activity(feats, threshold)
    else:
        active = force_gate
    if not active:
        return Waveform(np.zeros(len(y.samples)), y.sample_rate)
    est, _ = active_extract_forward(extractor, y, visual)
    return est


# --- presets ---


def paper_preset(
    mode: str = "both",
    backbone: str = "xmodal",
    visual_dim_in: int = 20,
    reference_source: str = "asd",
) -> ExtractorConfig:
    """Published hyperparameters; impractical on CPU, the reference point."""
    asd = AsdConfig(visual_dim_in=visual_dim_in)
    if backbone == "dprnn":
        return ExtractorConfig(
            encoder=EncoderConfig(kernel_L=40, channels_N=256),
            asd=asd, backbone="dprnn", mode=mode, reference_source=reference_source,
            dprnn=DprnnConfig(feature_B=64, chunk_K=100, repeats_R=6, hidden=128),
        )
    return ExtractorConfig(
        encoder=EncoderConfig(kernel_L=16, channels_N=256),
        asd=asd, backbone="xmodal", mode=mode, reference_source=reference_source,
        xmodal=XModalConfig(chunk_C=160, n_intra=4, n_inter=4, width_N=256, heads=8),
    )


def toy_preset(
    mode: str = "both",
    backbone: str = "xmodal",
    visual_dim_in: int = 20,
    reference_source: str = "asd",
    scale_factor: int = 4,
    kernel_L: int = 64,
) -> ExtractorConfig:
    """CPU-speed preset: paper widths divided by scale_factor, coarser frames.

    The ASD keeps its fixed 128/256 feature widths; only the separator
    shrinks. kernel_L (with the implied L/2 stride) sets the frame rate and is
    the main runtime lever.
    """
    asd = AsdConfig(visual_dim_in=visual_dim_in, encoder_layers=2)
    n = max(256 // scale_factor, 16)
    if backbone == "dprnn":
        return ExtractorConfig(
            encoder=EncoderConfig(kernel_L=kernel_L, channels_N=n),
            asd=asd, backbone="dprnn", mode=mode, reference_source=reference_source,
            dprnn=DprnnConfig(
                feature_B=max(64 // scale_factor, 16),
                chunk_K=max(100 // scale_factor, 10),
                repeats_R=max(6 // scale_factor, 1),
                hidden=max(128 // scale_factor, 16),
            ),
        )
    return ExtractorConfig(
        encoder=EncoderConfig(kernel_L=kernel_L, channels_N=n),
        asd=asd, backbone="xmodal", mode=mode, reference_source=reference_source,
        xmodal=XModalConfig(
            chunk_C=max(160 // scale_factor, 10),
            n_intra=max(4 // scale_factor, 1),
            n_inter=max(4 // scale_factor, 1),
            width_N=n,
            heads=max(8 // scale_factor, 2),
            d_ffn=2 * n,
        ),
    )


PRESET_BUILDERS = {"paper": paper_preset, "toy": toy_preset}


# --- checkpoints ---


def save_checkpoint(
    path: str | Path,
    model: ActiveExtract,
    stage_tag: str,
    seed: int,
    preset: str = "custom",
    extra: dict | None = None,
) -> None:
    """Bundle weights with the full config; write a model card alongside."""
    path = Path(path)
    payload = {
        "kind": "extractor",
        "state": model.state_dict(),
        "config": model.config.to_dict(),
        "stage_tag": stage_tag,
        "seed": seed,
        "preset": preset,
        "extra": extra or {},
    }
    torch.save(payload, path)
    card = (
        f"preset: {preset}\n"
        f"seed: {seed}\n"
        f"stage: {stage_tag}\n"
        f"backbone: {model.config.backbone}\n"
        f"mode: {model.config.mode}\n"
        f"reference_source: {model.config.reference_source}\n"
        f"parameters: {sum(p.numel() for p in model.parameters())}\n"
    )
    path.with_suffix(path.suffix + ".card.txt").write_text(card)


def load_checkpoint(path: str | Path) -> tuple[ActiveExtract, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind", "extractor") != "extractor":
        raise ValueError(f"not an extractor checkpoint: kind={payload.get('kind')!r}")
    model = ActiveExtract(ExtractorConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    meta = {k: payload[k] for k in ("stage_tag", "seed", "preset", "extra")}
    return model, meta
