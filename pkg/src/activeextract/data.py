"""Batch assembly for training and evaluation.

CorpusDataset serves clips from a generated corpus directory through its
manifest; DynamicMixSource synthesizes fresh fully-overlapped batches per
step. Collation zero-pads waveforms (padding counts as silence for both
speakers, extending the scenario segmentation with a QQ run) and pads the
frame-rate streams to the padded clip's video frame count.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .asd import AsdConfig, downsample_mask_to_frames, mfcc
from .audio import Waveform, read_wav
from .errors import EmptyManifest
from .mixer import Manifest, ManifestEntry, MixtureClip, dynamic_mix
from .scenario import LABELS, ActivityMask, ScenarioSegmentation, parse_segments
from .synth import SyntheticSpeaker, n_video_frames


@dataclass
class ClipExample:
    """One clip's tensors-to-be, still at natural length."""

    mixture: np.ndarray
    target: np.ndarray
    visual: np.ndarray
    target_mask: np.ndarray
    seg: ScenarioSegmentation
    mfcc_feats: np.ndarray
    clip_id: str
    category: str
    overlap_ratio: float | None
    snr_db: float


@dataclass
class ClipBatch:
    """Padded tensors for one optimizer step."""

    wav: torch.Tensor  # (B, T)
    target: torch.Tensor  # (B, T)
    visual: torch.Tensor  # (B, frames, D)
    mfcc_feats: torch.Tensor  # (B, frames, mfcc_dim)
    frame_labels: torch.Tensor  # (B, frames)
    frame_mask: torch.Tensor  # (B, frames), 1 on real frames
    segs: list[ScenarioSegmentation]  # extended over padding
    lengths: list[int]
    clip_ids: list[str]


def extend_segmentation(seg: ScenarioSegmentation, n_total: int) -> ScenarioSegmentation:
    """Cover [len(seg), n_total) with silence: padding is quiet for both speakers."""
    if n_total == len(seg):
        return seg
    if n_total < len(seg):
        raise ValueError(f"cannot shrink segmentation {len(seg)} to {n_total}")
    segments = list(seg.segments)
    if segments and segments[-1][2] == "QQ":
        s, _, lab = segments[-1]
        segments[-1] = (s, n_total, lab)
    else:
        segments.append((len(seg), n_total, "QQ"))
    labels = np.zeros(n_total, dtype=np.int64)
    for s, e, lab in segments:
        labels[s:e] = LABELS.index(lab)
    return ScenarioSegmentation(labels=labels, segments=segments, sample_rate=seg.sample_rate)


def example_from_clip(clip: MixtureClip, asd_cfg: AsdConfig) -> ClipExample:
    """Feature-extract a freshly synthesized clip (dynamic mixing path)."""
    return ClipExample(
        mixture=clip.mixture.samples,
        target=clip.target_clean.samples,
        visual=np.asarray(clip.target_visual.frames, dtype=np.float64),
        target_mask=clip.target_mask.frames,
        seg=clip.segmentation,
        mfcc_feats=mfcc(clip.mixture, asd_cfg),
        clip_id=clip.spec.clip_id,
        category=clip.category.kind,
        overlap_ratio=clip.category.overlap_ratio,
        snr_db=clip.spec.snr_db,
    )


class CorpusDataset:
    """Clips of one manifest split, feature-extracted lazily and cached in RAM.

    The cache holds float32 copies of everything a batch needs; a 500-clip
    corpus of 3-6 s clips is a few hundred MB, well within desk scale.
    """

    def __init__(
        self,
        root: str | Path,
        manifest: Manifest,
        asd_cfg: AsdConfig,
        split: str | None = None,
        cache: bool = True,
    ):
        self.root = Path(root)
        entries = manifest.entries if split is None else manifest.for_split(split).entries
        if not entries:
            raise EmptyManifest(f"no clips for split {split!r}")
        self.entries = entries
        self.asd_cfg = asd_cfg
        self.cache_enabled = cache
        self._cache: dict[int, ClipExample] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self, idx: int) -> ClipExample:
        e: ManifestEntry = self.entries[idx]
        mixture = read_wav(self.root / e.paths["mixture"])
        target = read_wav(self.root / e.paths["target"])
        visual = np.load(self.root / e.paths["visual"]).astype(np.float64)
        masks = np.load(self.root / e.paths["masks"])
        seg = parse_segments(e.segmentation)
        return ClipExample(
            mixture=mixture.samples,
            target=target.samples,
            visual=visual,
            target_mask=masks["target"],
            seg=seg,
            mfcc_feats=mfcc(mixture, self.asd_cfg),
            clip_id=e.clip_id,
            category=e.category,
            overlap_ratio=e.overlap_ratio,
            snr_db=e.snr_db,
        )

    def __getitem__(self, idx: int) -> ClipExample:
        if idx in self._cache:
            return self._cache[idx]
        ex = self._load(idx)
        if self.cache_enabled:
            self._cache[idx] = ex
        return ex

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield collated batches over one epoch; shuffled when given an rng."""
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for k in range(0, len(order), batch_size):
            yield collate([self[int(i)] for i in order[k : k + batch_size]])


class DynamicMixSource:
    """Fresh fully-overlapped batches, one per step, seeded per (seed, epoch)."""

    def __init__(
        self,
        pool: dict[str, SyntheticSpeaker],
        asd_cfg: AsdConfig,
        seed: int,
        duration_s: float = 4.0,
        visual_dim: int | None = None,
    ):
        self.pool = pool
        self.asd_cfg = asd_cfg
        self.seed = seed
        self.duration_s = duration_s
        self.visual_dim = visual_dim if visual_dim is not None else asd_cfg.visual_dim_in

    def batches(self, batch_size: int, steps: int, epoch: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        for _ in range(steps):
            clips = dynamic_mix(
                batch_size, rng, self.pool,
                duration_s=self.duration_s, visual_dim=self.visual_dim,
            )
            yield collate([example_from_clip(c, self.asd_cfg) for c in clips])


def collate(examples: list[ClipExample]) -> ClipBatch:
    """Zero-pad a list of clips into one batch.

    Padding is digital silence, so the padded span of each clip is QQ by
    definition; scenario segmentations are extended accordingly and the frame
    mask marks only real visual frames.
    """
    if not examples:
        raise EmptyManifest("empty batch")
    t_max = max(len(ex.mixture) for ex in examples)
    f_max = n_video_frames(t_max)
    b = len(examples)
    mfcc_dim = examples[0].mfcc_feats.shape[1]
    vis_dim = examples[0].visual.shape[1]
    wav = torch.zeros(b, t_max)
    target = torch.zeros(b, t_max)
    visual = torch.zeros(b, f_max, vis_dim)
    feats = torch.zeros(b, f_max, mfcc_dim)
    labels = torch.zeros(b, f_max)
    fmask = torch.zeros(b, f_max)
    segs, lengths, ids = [], [], []
    for k, ex in enumerate(examples):
        t = len(ex.mixture)
        wav[k, :t] = torch.from_numpy(ex.mixture).float()
        target[k, :t] = torch.from_numpy(ex.target).float()
        n_f = min(len(ex.visual), f_max)
        visual[k, :n_f] = torch.from_numpy(ex.visual[:n_f]).float()
        n_m = min(len(ex.mfcc_feats), f_max)
        feats[k, :n_m] = torch.from_numpy(ex.mfcc_feats[:n_m]).float()
        lab = downsample_mask_to_frames(ActivityMask(ex.target_mask))
        n_l = min(len(lab), f_max)
        labels[k, :n_l] = torch.from_numpy(lab[:n_l]).float()
        fmask[k, :n_f] = 1.0
        segs.append(extend_segmentation(ex.seg, t_max))
        lengths.append(t)
        ids.append(ex.clip_id)
    return ClipBatch(
        wav=wav, target=target, visual=visual, mfcc_feats=feats,
        frame_labels=labels, frame_mask=fmask,
        segs=segs, lengths=lengths, clip_ids=ids,
    )
