"""Deterministic synthesis of two-speaker mixtures and the desk-scale corpus.

Every clip is fully specified by a MixtureSpec (speakers, placements, SNR,
seeds); building a clip is a pure function of its spec and the speaker pool.
Synthesis happens in float64; clip-internal silence is digital zero. Corpus
generation writes PCM16 WAVs, visual streams, and mask files plus a
line-delimited JSON manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, mix_at_snr, write_wav
from .errors import PlacementOverflow, UnsatisfiableHistogram
from .scenario import (
    OVERLAP_BUCKETS,
    ZERO_BUCKET,
    ActivityMask,
    ClipCategory,
    ScenarioSegmentation,
    bucket,
    classify,
    format_segments,
    segment,
)
from .synth import (
    VISUAL_CUE_SNR_DB,
    VISUAL_DIM_DEFAULT,
    SyntheticSpeaker,
    VisualStream,
    render_visual,
    speaker_pool,
    synth_speaker_utterance,
)

SPLITS = ("train", "validation", "test")

SNR_RANGE = (-10.0, 10.0)
SPARSE_DURATION_RANGE = (3.0, 6.0)
OVERLAPPED_DURATION_S = 4.0

# Reference per-category clip counts of the 20k-clip corpus this synthesizer
# is scaled from: TA, then the six overlap buckets in table order.
REFERENCE_HISTOGRAM = {
    "TA": 758,
    "0%": 1459,
    "(0,20]%": 1578,
    "(20,40]%": 2597,
    "(40,60]%": 3886,
    "(60,80]%": 4229,
    "(80,100]%": 5493,
}

CATEGORY_KEYS = ("TA",) + OVERLAP_BUCKETS


@dataclass
class SourcePlan:
    """One speaker's utterance placements inside a clip."""

    speaker_id: str
    placements: list[tuple[float, float]]  # (onset_s, duration_s)
    utterance_seeds: list[int]

    def validate(self, total_duration_s: float) -> None:
        if len(self.placements) != len(self.utterance_seeds):
            raise ValueError("one utterance seed per placement required")
        spans = sorted((on, on + dur) for on, dur in self.placements)
        prev_end = 0.0
        for k, (start, end) in enumerate(spans):
            if start < 0.0 or end > total_duration_s + 1e-9:
                raise PlacementOverflow(
                    f"{self.speaker_id}: placement [{start:.3f},{end:.3f}) outside "
                    f"[0,{total_duration_s:.3f})"
                )
            if k > 0 and start < prev_end:
                raise PlacementOverflow(f"{self.speaker_id}: placements overlap")
            prev_end = end


@dataclass
class MixtureSpec:
    """A fully deterministic recipe for one mixture clip."""

    clip_id: str
    target: SourcePlan
    interferer: SourcePlan
    snr_db: float
    total_duration_s: float
    seed: int
    split: str = "train"

    def validate(self) -> None:
        if not SNR_RANGE[0] <= self.snr_db <= SNR_RANGE[1]:
            raise ValueError(f"snr_db {self.snr_db} outside {SNR_RANGE}")
        lo, hi = SPARSE_DURATION_RANGE
        if not lo <= self.total_duration_s <= hi:
            raise ValueError(f"duration {self.total_duration_s} outside [{lo},{hi}]")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.target.validate(self.total_duration_s)
        self.interferer.validate(self.total_duration_s)


@dataclass
class MixtureClip:
    """One rendered clip with its ground truth."""

    mixture: Waveform
    target_clean: Waveform  # zeros wherever the target is inactive
    interferer_scaled: Waveform
    target_mask: ActivityMask
    interference_mask: ActivityMask
    target_visual: VisualStream
    segmentation: ScenarioSegmentation
    category: ClipCategory
    spec: MixtureSpec


def _render_plan(
    plan: SourcePlan, speaker: SyntheticSpeaker, n_total: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Place a plan's utterances on a silent timeline; returns (signal, mask, envelope)."""
    signal = np.zeros(n_total)
    mask = np.zeros(n_total, dtype=np.uint8)
    envelope = np.zeros(n_total)
    for (onset_s, dur_s), utt_seed in zip(plan.placements, plan.utterance_seeds):
        start = int(round(onset_s * SAMPLE_RATE))
        length = int(round(dur_s * SAMPLE_RATE))
        end = start + length
        if start < 0 or end > n_total:
            raise PlacementOverflow(
                f"{plan.speaker_id}: samples [{start},{end}) outside [0,{n_total})"
            )
        utt, env = synth_speaker_utterance(speaker, dur_s, utt_seed)
        signal[start:end] = utt.samples
        envelope[start:end] = env
        mask[start:end] = 1
    return signal, mask, envelope


def build_clip(
    spec: MixtureSpec,
    pool: dict[str, SyntheticSpeaker],
    visual_dim: int = VISUAL_DIM_DEFAULT,
    visual_cue_snr_db: float = VISUAL_CUE_SNR_DB,
) -> MixtureClip:
    """Render one clip from its spec: place, scale to SNR, emit ground truth.

    target_clean is the target signal only, zeros elsewhere; supervision for
    TA/QS regions is exact silence. mixture == target_clean + interferer_scaled
    bit-exactly (float64, pre-quantization).
    """
    spec.validate()
    n_total = int(round(spec.total_duration_s * SAMPLE_RATE))
    t_sig, t_mask, t_env = _render_plan(spec.target, pool[spec.target.speaker_id], n_total)
    i_sig, i_mask, _ = _render_plan(spec.interferer, pool[spec.interferer.speaker_id], n_total)

    if t_mask.any() and i_mask.any():
        _, scale = mix_at_snr(
            Waveform(t_sig), Waveform(i_sig), spec.snr_db, t_mask, i_mask
        )
    else:
        scale = 1.0  # SNR undefined with a silent side; keep natural level
    interferer_scaled = scale * i_sig
    mixture = t_sig + interferer_scaled

    target_mask = ActivityMask(t_mask)
    interference_mask = ActivityMask(i_mask)
    seg = segment(target_mask, interference_mask)
    category = classify(target_mask, seg)
    visual = render_visual(
        t_env,
        target_mask,
        seed=spec.seed,
        dim=visual_dim,
        cue_snr_db=visual_cue_snr_db,
        speaker_id=spec.target.speaker_id,
    )
    return MixtureClip(
        mixture=Waveform(mixture),
        target_clean=Waveform(t_sig),
        interferer_scaled=Waveform(interferer_scaled),
        target_mask=target_mask,
        interference_mask=interference_mask,
        target_visual=visual,
        segmentation=seg,
        category=category,
        spec=spec,
    )


# --- manifest ---

_ENTRY_FIELDS = (
    "clip_id",
    "paths",
    "snr_db",
    "category",
    "overlap_ratio",
    "segmentation",
    "seed",
    "split",
)


@dataclass
class ManifestEntry:
    clip_id: str
    paths: dict[str, str]  # keys: mixture, target, visual, masks
    snr_db: float
    category: str  # "TA" or "TP"
    overlap_ratio: float | None  # None for TA
    segmentation: str  # run-length text form
    seed: int
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def for_split(self, split: str) -> "Manifest":
        return Manifest([e for e in self.entries if e.split == split])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                record = {name: getattr(e, name) for name in _ENTRY_FIELDS}
                f.write(json.dumps(record) + "\n")

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(ManifestEntry(**json.loads(line)))
        return Manifest(entries)


# --- corpus generation ---


@dataclass
class CorpusConfig:
    """Per-split category histograms plus the shared synthesis knobs."""

    splits: dict[str, dict[str, int]]
    seed: int = 0
    duration_range: tuple[float, float] = SPARSE_DURATION_RANGE
    snr_range: tuple[float, float] = SNR_RANGE
    n_speakers: int = 12
    visual_dim: int = VISUAL_DIM_DEFAULT
    visual_cue_snr_db: float = VISUAL_CUE_SNR_DB

    def validate(self) -> None:
        if not self.splits:
            raise UnsatisfiableHistogram("no splits requested")
        total = 0
        for split, hist in self.splits.items():
            if split not in SPLITS:
                raise UnsatisfiableHistogram(f"unknown split {split!r}")
            for key, count in hist.items():
                if key not in CATEGORY_KEYS:
                    raise UnsatisfiableHistogram(f"unknown category {key!r}")
                if count < 0:
                    raise UnsatisfiableHistogram(f"negative count for {key!r}")
                total += count
        if total == 0:
            raise UnsatisfiableHistogram("all requested counts are zero")
        if self.n_speakers < 2:
            raise UnsatisfiableHistogram("need at least two speakers to mix")
        lo, hi = self.duration_range
        if not (SPARSE_DURATION_RANGE[0] <= lo <= hi <= SPARSE_DURATION_RANGE[1]):
            raise UnsatisfiableHistogram(
                f"duration range [{lo},{hi}] outside {SPARSE_DURATION_RANGE}"
            )


def table_proportions(total: int) -> dict[str, int]:
    """Scale the reference corpus histogram down to `total` clips.

    Largest-remainder rounding so the counts sum to `total` exactly.
    """
    ref_total = sum(REFERENCE_HISTOGRAM.values())
    raw = {k: total * v / ref_total for k, v in REFERENCE_HISTOGRAM.items()}
    counts = {k: int(np.floor(x)) for k, x in raw.items()}
    deficit = total - sum(counts.values())
    by_remainder = sorted(raw, key=lambda k: raw[k] - counts[k], reverse=True)
    for k in by_remainder[:deficit]:
        counts[k] += 1
    return counts


def _exact_bucket_overlap(u_n: int, ratio: float, key: str) -> int:
    """Overlap length in samples whose exact ratio o/(2u-o) lands in `key`.

    The ratio is monotone in o, so nudge the rounded solution of
    o = 2*r*u/(1+r) by single samples until the realized bucket matches.
    """
    lo = 0.2 * (OVERLAP_BUCKETS.index(key) - 1)
    o = int(round(2.0 * ratio * u_n / (1.0 + ratio)))
    o = min(max(o, 1), u_n)
    while bucket(o / (2.0 * u_n - o)) != key:
        o += 1 if o / (2.0 * u_n - o) <= lo else -1
        if not 1 <= o <= u_n:
            raise UnsatisfiableHistogram(f"cannot hit bucket {key} with u={u_n}")
    return o


def _snap(seconds: float) -> float:
    """Snap a time to the sample grid so placements land on exact samples."""
    return round(seconds * SAMPLE_RATE) / SAMPLE_RATE


def _plan_category(
    rng: np.random.Generator, key: str, total_s: float
) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """Target/interferer placements realizing one requested category.

    All onsets and durations are sample-aligned; the realized overlap ratio of
    a bucketed clip is therefore exactly the planned one.
    """
    margin = 0.1
    if key == "TA":
        dur = _snap(rng.uniform(0.8, 0.6 * total_s))
        onset = _snap(rng.uniform(margin, total_s - dur - margin))
        return [], [(onset, dur)]

    if key == ZERO_BUCKET:
        gap = _snap(rng.uniform(0.05, 0.3))
        u = _snap(rng.uniform(0.9, (total_s - 2 * margin - gap) / 2.0))
        x = _snap(rng.uniform(margin, total_s - (2 * u + gap) - margin))
        first = [(x, u)]
        second = [(x + u + gap, u)]
    else:
        idx = OVERLAP_BUCKETS.index(key)
        lo, hi = 0.2 * (idx - 1), 0.2 * idx
        ratio = rng.uniform(lo + 0.01, hi - 0.005 if hi < 1.0 else 1.0)
        u_cap = (1.0 + ratio) * (total_s - 2 * margin) / 2.0
        u_n = int(round(rng.uniform(0.9, min(u_cap, total_s - 2 * margin)) * SAMPLE_RATE))
        o_n = _exact_bucket_overlap(u_n, ratio, key)
        u = u_n / SAMPLE_RATE
        span = (2 * u_n - o_n) / SAMPLE_RATE
        x = _snap(rng.uniform(margin, total_s - span - margin))
        first = [(x, u)]
        second = [(x + (u_n - o_n) / SAMPLE_RATE, u)]
    if rng.random() < 0.5:  # who leads alternates
        first, second = second, first
    return first, second


def _draw_spec(
    rng: np.random.Generator,
    config: CorpusConfig,
    pool: dict[str, SyntheticSpeaker],
    key: str,
    clip_id: str,
    split: str,
    seed: int,
) -> MixtureSpec:
    speaker_ids = sorted(pool)
    t_id, i_id = rng.choice(speaker_ids, size=2, replace=False)
    total_s = round(rng.uniform(*config.duration_range), 3)
    t_place, i_place = _plan_category(rng, key, total_s)
    snr = float(rng.uniform(*config.snr_range))
    t_seeds = [int(rng.integers(2**31)) for _ in t_place]
    i_seeds = [int(rng.integers(2**31)) for _ in i_place]
    return MixtureSpec(
        clip_id=clip_id,
        target=SourcePlan(str(t_id), t_place, t_seeds),
        interferer=SourcePlan(str(i_id), i_place, i_seeds),
        snr_db=snr,
        total_duration_s=total_s,
        seed=seed,
        split=split,
    )


def clip_category_key(clip: MixtureClip) -> str:
    """TA, or the overlap bucket of a TP clip."""
    if clip.category.kind == "TA":
        return "TA"
    return bucket(clip.category.overlap_ratio)


def generate_corpus(config: CorpusConfig, out_dir: str | Path) -> Manifest:
    """Write the corpus (WAV + visual + masks per clip) and return its manifest.

    The per-category histogram matches the request exactly; identical
    config+seed runs produce byte-identical manifests. Utterance seeds are
    disjoint across splits (speakers may repeat, utterances do not).
    """
    config.validate()
    out_dir = Path(out_dir)
    pool = speaker_pool(config.n_speakers, config.seed)
    entries: list[ManifestEntry] = []
    for split, hist in config.splits.items():
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        split_idx = SPLITS.index(split)
        clip_idx = 0
        for key in CATEGORY_KEYS:
            for _ in range(hist.get(key, 0)):
                ss = np.random.SeedSequence([config.seed, split_idx, clip_idx])
                rng = np.random.default_rng(ss)
                clip_seed = int(rng.integers(2**31))
                clip_id = f"{split}_{clip_idx:05d}"
                spec = _draw_spec(rng, config, pool, key, clip_id, split, clip_seed)
                clip = build_clip(spec, pool, config.visual_dim, config.visual_cue_snr_db)
                if clip_category_key(clip) != key:
                    raise UnsatisfiableHistogram(
                        f"{clip_id}: realized {clip_category_key(clip)}, wanted {key}"
                    )
                entries.append(_write_clip(clip, out_dir, split_dir))
                clip_idx += 1
    manifest = Manifest(entries)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def _write_clip(clip: MixtureClip, out_dir: Path, split_dir: Path) -> ManifestEntry:
    cid = clip.spec.clip_id
    paths = {
        "mixture": str((split_dir / f"{cid}.mix.wav").relative_to(out_dir)),
        "target": str((split_dir / f"{cid}.target.wav").relative_to(out_dir)),
        "visual": str((split_dir / f"{cid}.visual.npy").relative_to(out_dir)),
        "masks": str((split_dir / f"{cid}.masks.npz").relative_to(out_dir)),
    }
    write_wav(out_dir / paths["mixture"], clip.mixture)
    write_wav(out_dir / paths["target"], clip.target_clean)
    np.save(out_dir / paths["visual"], clip.target_visual.frames.astype(np.float32))
    np.savez_compressed(
        out_dir / paths["masks"],
        target=clip.target_mask.frames,
        interference=clip.interference_mask.frames,
    )
    ratio = clip.category.overlap_ratio
    return ManifestEntry(
        clip_id=cid,
        paths=paths,
        snr_db=clip.spec.snr_db,
        category=clip.category.kind,
        overlap_ratio=None if ratio is None else float(ratio),
        segmentation=format_segments(clip.segmentation),
        seed=clip.spec.seed,
        split=clip.spec.split,
    )


def corpus_stats(manifest: Manifest) -> dict[str, dict]:
    """Per-split clip counts by category plus per-scenario durations in hours."""
    from .scenario import parse_segments

    stats: dict[str, dict] = {}
    for e in manifest.entries:
        s = stats.setdefault(
            e.split,
            {
                "total": 0,
                "categories": {k: 0 for k in CATEGORY_KEYS},
                "hours": {lab: 0.0 for lab in ("QQ", "SQ", "QS", "SS")},
            },
        )
        s["total"] += 1
        key = "TA" if e.category == "TA" else bucket(e.overlap_ratio)
        s["categories"][key] += 1
        seg = parse_segments(e.segmentation)
        for lab, dur in seg.durations.items():
            s["hours"][lab] += dur / 3600.0
    return stats


def dynamic_mix(
    batch_size: int,
    rng: np.random.Generator,
    pool: dict[str, SyntheticSpeaker],
    duration_s: float = OVERLAPPED_DURATION_S,
    snr_range: tuple[float, float] = SNR_RANGE,
    visual_dim: int = VISUAL_DIM_DEFAULT,
    visual_cue_snr_db: float = VISUAL_CUE_SNR_DB,
) -> list[MixtureClip]:
    """Fresh fully-overlapped mixtures for pretraining; reproducible given `rng`.

    Both speakers span the whole clip, so every emitted clip has overlap
    ratio 1.0 and the fixed pretraining duration.
    """
    speaker_ids = sorted(pool)
    clips = []
    for b in range(batch_size):
        t_id, i_id = rng.choice(speaker_ids, size=2, replace=False)
        snr = float(rng.uniform(*snr_range))
        spec = MixtureSpec(
            clip_id=f"dyn_{b:04d}",
            target=SourcePlan(str(t_id), [(0.0, duration_s)], [int(rng.integers(2**31))]),
            interferer=SourcePlan(str(i_id), [(0.0, duration_s)], [int(rng.integers(2**31))]),
            snr_db=snr,
            total_duration_s=duration_s,
            seed=int(rng.integers(2**31)),
            split="train",
        )
        clips.append(build_clip(spec, pool, visual_dim, visual_cue_snr_db))
    return clips
