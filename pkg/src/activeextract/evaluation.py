"""Evaluation harness with overlap-bucketed reporting.

Target-absent clips are scored by output Power (lower is better, silence is
the ideal), target-present clips by SI-SNR against the clean target, grouped
into overlap-ratio buckets. Every report carries the unprocessed mixture as a
baseline row.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .asd import asd_forward, binary_activity
from .audio import Waveform, power, read_wav, si_snr
from .errors import EmptyManifest
from .mixer import Manifest, ManifestEntry
from .scenario import OVERLAP_BUCKETS, bucket
from .separator import ActiveExtract, active_extract_forward, gated_baseline_forward
from .synth import VisualStream

# A system maps (mixture, target's visual stream) to an estimate.
System = Callable[[Waveform, VisualStream], Waveform]


@dataclass
class SystemRow:
    """One report row worth of scores."""

    ta_power_db: float
    tp_si_snr_by_bucket: dict[str, tuple[float, int]]
    tp_avg_db: float

    @property
    def tp_count(self) -> int:
        return sum(n for _, n in self.tp_si_snr_by_bucket.values())


@dataclass
class EvalReport:
    ta_power_db: float
    tp_si_snr_by_bucket: dict[str, tuple[float, int]]
    tp_avg_db: float
    model_tag: str
    dataset_tag: str
    mixture_row: SystemRow | None = None
    ta_count: int = 0

    @property
    def tp_count(self) -> int:
        return sum(n for _, n in self.tp_si_snr_by_bucket.values())


def system_from_model(model: ActiveExtract) -> System:
    def run(mixture: Waveform, visual: VisualStream) -> Waveform:
        est, _ = active_extract_forward(model, mixture, visual)
        return est

    return run


def mixture_system(mixture: Waveform, visual: VisualStream) -> Waveform:
    return mixture


def system_from_gated(
    asd_net, extractor: ActiveExtract, flip_fraction: float = 0.0, flip_phase: int = 0
) -> System:
    """Gate-then-extract baseline; optionally flips a fraction of gate decisions.

    Flips corrupt the clip-level speak/silent decision for exactly
    floor(n * flip_fraction) of any n consecutive calls, spread evenly, so the
    corrupted-detector condition is deterministic and order-reproducible.
    `flip_phase` shifts which positions in the call sequence get flipped.
    """
    calls = {"i": flip_phase}

    def run(mixture: Waveform, visual: VisualStream) -> Waveform:
        i = calls["i"]
        calls["i"] += 1
        force = None
        flip = int((i + 1) * flip_fraction) > int(i * flip_fraction)
        if flip:
            feats = asd_forward(asd_net, mixture, visual)
            _, gate_on = binary_activity(feats)
            force = not gate_on
        return gated_baseline_forward(asd_net, extractor, mixture, visual, force_gate=force)

    return run


def _load_clip(root: Path, entry: ManifestEntry) -> tuple[Waveform, Waveform, VisualStream]:
    mixture = read_wav(root / entry.paths["mixture"])
    target = read_wav(root / entry.paths["target"])
    frames = np.load(root / entry.paths["visual"])
    visual = VisualStream(frames=frames.astype(np.float64), speaker_id="", fps=25)
    return mixture, target, visual


def _bucket_of(entry: ManifestEntry) -> str:
    return bucket(entry.overlap_ratio)


def _row_from_scores(
    ta_powers: list[float], tp_scores: dict[str, list[float]]
) -> SystemRow:
    by_bucket: dict[str, tuple[float, int]] = {}
    all_tp: list[float] = []
    for key in OVERLAP_BUCKETS:
        scores = tp_scores.get(key, [])
        if scores:
            by_bucket[key] = (float(np.mean(scores)), len(scores))
            all_tp.extend(scores)
    return SystemRow(
        ta_power_db=float(np.mean(ta_powers)) if ta_powers else float("nan"),
        tp_si_snr_by_bucket=by_bucket,
        tp_avg_db=float(np.mean(all_tp)) if all_tp else float("nan"),
    )


def evaluate(
    system: System,
    manifest: Manifest,
    root: str | Path,
    model_tag: str = "system",
    dataset_tag: str = "",
    split: str | None = "test",
) -> EvalReport:
    """Score a system over a manifest; always includes the mixture baseline.

    TA clips contribute the Power of the estimate, TP clips the SI-SNR of the
    estimate against the clean target, bucketed by the clip's overlap ratio.
    The Avg column is the mean over all TP clips (clip-weighted, not a mean of
    bucket means).
    """
    root = Path(root)
    entries = manifest.entries if split is None else manifest.for_split(split).entries
    if not entries:
        raise EmptyManifest(f"no clips to evaluate (split={split!r})")

    ta_powers: list[float] = []
    tp_scores: dict[str, list[float]] = {}
    mix_ta_powers: list[float] = []
    mix_tp_scores: dict[str, list[float]] = {}
    for entry in entries:
        mixture, target, visual = _load_clip(root, entry)
        estimate = system(mixture, visual)
        if entry.category == "TA":
            ta_powers.append(power(estimate).value)
            mix_ta_powers.append(power(mixture).value)
        else:
            key = _bucket_of(entry)
            tp_scores.setdefault(key, []).append(si_snr(estimate, target).value)
            mix_tp_scores.setdefault(key, []).append(si_snr(mixture, target).value)

    row = _row_from_scores(ta_powers, tp_scores)
    mix_row = _row_from_scores(mix_ta_powers, mix_tp_scores)
    return EvalReport(
        ta_power_db=row.ta_power_db,
        tp_si_snr_by_bucket=row.tp_si_snr_by_bucket,
        tp_avg_db=row.tp_avg_db,
        model_tag=model_tag,
        dataset_tag=dataset_tag,
        mixture_row=mix_row,
        ta_count=len(ta_powers),
    )


REPORT_COLUMNS = ("TA Power ↓", "0%", "(0,20]%", "(20,40]%", "(40,60]%", "(60,80]%", "(80,100]%", "Avg.")

_FOOTER = (
    "Avg. is the clip-weighted mean over all target-present clips "
    "(every clip counts once, regardless of its bucket's size)."
)


def _cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "—"
    return f"{value:.2f}"


def _row_cells(tag: str, row: SystemRow | EvalReport) -> list[str]:
    cells = [tag, _cell(row.ta_power_db)]
    for key in OVERLAP_BUCKETS:
        mean_count = row.tp_si_snr_by_bucket.get(key)
        cells.append(_cell(mean_count[0] if mean_count else None))
    cells.append(_cell(row.tp_avg_db))
    return cells


def report_render(report: EvalReport, format: str = "markdown") -> str:
    """Render the bucketed report as markdown or TSV."""
    if format not in ("markdown", "tsv"):
        raise ValueError(f"unknown format {format!r}")
    header = ["System", *REPORT_COLUMNS]
    rows = []
    if report.mixture_row is not None:
        rows.append(_row_cells("Mixture", report.mixture_row))
    rows.append(_row_cells(report.model_tag, report))
    if format == "tsv":
        lines = ["\t".join(header)]
        lines += ["\t".join(r) for r in rows]
        lines.append("# " + _FOOTER)
        return "\n".join(lines) + "\n"
    width = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    def fmt(cells):
        return "| " + " | ".join(c.ljust(width[i]) for i, c in enumerate(cells)) + " |"
    lines = [fmt(header), "|" + "|".join("-" * (w + 2) for w in width) + "|"]
    lines += [fmt(r) for r in rows]
    lines.append("")
    lines.append(_FOOTER)
    return "\n".join(lines) + "\n"
