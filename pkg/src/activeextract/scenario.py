"""Per-sample activity masks, four-scenario segmentation, overlap ratio, buckets.

Scenario labels follow the (target, interference) activity truth table:
(0,0) -> QQ, (1,0) -> SQ, (0,1) -> QS, (1,1) -> SS. A clip is Target Absent (TA)
iff the target mask is all-zero, otherwise Target Present (TP) with an overlap
ratio SS / (SQ + QS + SS).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE
from .errors import AllSilent, LengthMismatch, OutOfRange

LABELS = ("QQ", "SQ", "QS", "SS")

# Overlap buckets of the evaluation table: exact zero stands apart, the rest
# are half-open (lo, hi] in percent.
ZERO_BUCKET = "0%"
OVERLAP_BUCKETS = (ZERO_BUCKET, "(0,20]%", "(20,40]%", "(40,60]%", "(60,80]%", "(80,100]%")
_BUCKET_EDGES = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ActivityMask:
    """Binary speaking-activity sequence at audio-sample resolution."""

    frames: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 1:
            raise ValueError(f"mask must be 1-D, got shape {self.frames.shape}")
        if not np.all((self.frames == 0) | (self.frames == 1)):
            raise ValueError("mask values must be 0 or 1")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def any_active(self) -> bool:
        return bool(self.frames.any())


@dataclass
class ScenarioSegmentation:
    """Per-sample scenario labels plus the merged contiguous-run view."""

    labels: np.ndarray  # per-sample indices into LABELS
    segments: list[tuple[int, int, str]]  # (start_sample, end_sample, label)
    sample_rate: int = SAMPLE_RATE
    durations: dict[str, float] = field(default_factory=dict)  # seconds per label

    def __post_init__(self):
        if not self.durations:
            counts = np.bincount(self.labels, minlength=4)
            self.durations = {
                lab: float(counts[i]) / self.sample_rate for i, lab in enumerate(LABELS)
            }

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ClipCategory:
    """Utterance-level category: TA (target silent throughout) or TP."""

    kind: str  # "TA" or "TP"
    overlap_ratio: float | None = None  # defined only for TP


def segment(target_mask: ActivityMask, interference_mask: ActivityMask) -> ScenarioSegmentation:
    """Label every sample by the activity truth table and merge contiguous runs."""
    if target_mask.sample_rate != interference_mask.sample_rate:
        raise LengthMismatch(
            f"rates differ: {target_mask.sample_rate} vs {interference_mask.sample_rate}"
        )
    if len(target_mask) != len(interference_mask):
        raise LengthMismatch(f"{len(target_mask)} vs {len(interference_mask)} samples")
    t = target_mask.frames.astype(np.int64)
    i = interference_mask.frames.astype(np.int64)
    labels = t + 2 * i  # 0=QQ, 1=SQ, 2=QS, 3=SS
    segments: list[tuple[int, int, str]] = []
    if len(labels):
        change = np.flatnonzero(np.diff(labels)) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [len(labels)]))
        segments = [(int(s), int(e), LABELS[labels[s]]) for s, e in zip(starts, ends)]
    return ScenarioSegmentation(labels=labels, segments=segments, sample_rate=target_mask.sample_rate)


def overlap_ratio(seg: ScenarioSegmentation) -> float:
    """duration(SS) / duration(SQ + QS + SS); raises AllSilent on speech-free clips."""
    speech = seg.durations["SQ"] + seg.durations["QS"] + seg.durations["SS"]
    if speech <= 0.0:
        raise AllSilent("clip contains no speech")
    return seg.durations["SS"] / speech


def classify(target_mask: ActivityMask, seg: ScenarioSegmentation) -> ClipCategory:
    """TA iff the target mask is all-zero, else TP with its overlap ratio."""
    if len(target_mask) != len(seg):
        raise LengthMismatch(f"{len(target_mask)} vs {len(seg)} samples")
    if not target_mask.any_active:
        return ClipCategory("TA")
    return ClipCategory("TP", overlap_ratio=overlap_ratio(seg))


def bucket(ratio: float) -> str:
    """Map an overlap ratio to its evaluation-table column.

    Exact zero gets its own bucket; everything else falls into half-open
    (lo, hi] buckets of 20% width.
    """
    if not (0.0 <= ratio <= 1.0):
        raise OutOfRange(f"overlap ratio {ratio} outside [0, 1]")
    if ratio == 0.0:
        return ZERO_BUCKET
    for edge, name in zip(_BUCKET_EDGES, OVERLAP_BUCKETS[1:]):
        if ratio <= edge:
            return name
    return OVERLAP_BUCKETS[-1]


def format_segments(seg: ScenarioSegmentation) -> str:
    """Compact run-length text form used inside manifests: `label:start:end;...`."""
    return ";".join(f"{lab}:{s}:{e}" for s, e, lab in seg.segments)


def parse_segments(text: str, sample_rate: int = SAMPLE_RATE) -> ScenarioSegmentation:
    """Inverse of format_segments."""
    segments: list[tuple[int, int, str]] = []
    if text:
        for item in text.split(";"):
            lab, s, e = item.split(":")
            if lab not in LABELS:
                raise ValueError(f"unknown scenario label {lab!r}")
            segments.append((int(s), int(e), lab))
    length = segments[-1][1] if segments else 0
    labels = np.zeros(length, dtype=np.int64)
    for s, e, lab in segments:
        labels[s:e] = LABELS.index(lab)
    return ScenarioSegmentation(labels=labels, segments=segments, sample_rate=sample_rate)


def masks_from_segments(seg: ScenarioSegmentation) -> tuple[ActivityMask, ActivityMask]:
    """Recover the (target, interference) activity masks from scenario labels."""
    t = ((seg.labels == 1) | (seg.labels == 3)).astype(np.uint8)
    i = ((seg.labels == 2) | (seg.labels == 3)).astype(np.uint8)
    return ActivityMask(t, seg.sample_rate), ActivityMask(i, seg.sample_rate)
