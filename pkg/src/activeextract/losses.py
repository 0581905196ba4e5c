"""Training objectives: SDR, source-aggregated SDR, and the scenario-aware loss.

All three are differentiable scalar functions of torch tensors; Waveform and
ndarray inputs are coerced. The scenario-aware loss routes each contiguous
segment by its label: SDR where the target speaks (SQ, SS), an output-energy
penalty where it does not (QQ, QS), averaged within each class and combined by
the (alpha, beta, gamma, delta) weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .audio import EPS, Waveform
from .errors import (
    AllReferencesSilent,
    EmptyBatch,
    EmptySegmentation,
    LengthMismatch,
    NonFiniteGradient,
    SilentReference,
)
from .scenario import ScenarioSegmentation

LOSS_KINDS = ("sdr", "sa_sdr", "sadl")

# Weight presets (alpha, beta, gamma, delta): `sadl_o` favors strong silence
# suppression, `sadl_b` trades a softer SQ term for better overall balance.
PRESETS = {
    "sadl_o": (0.005, 1.0, 1.0, 0.005),
    "sadl_b": (0.0005, 0.1, 1.0, 0.005),
}

# Segments shorter than this merge into a neighbor before per-segment losses;
# the log ratio is numerically meaningless on sub-2 ms spans.
MIN_SEGMENT_SAMPLES = 32

_SPEECH_LABELS = ("SQ", "SS")  # target speaking: SDR-type segment loss
_QUIET_LABELS = ("QQ", "QS")  # target quiet: output-energy segment loss


@dataclass
class LossConfig:
    kind: str
    sadl_weights: tuple[float, float, float, float] | None = None
    eps: float = EPS

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.kind == "sadl":
            if self.sadl_weights is None:
                raise ValueError("sadl requires sadl_weights")
            if len(self.sadl_weights) != 4 or any(w < 0 for w in self.sadl_weights):
                raise ValueError(f"sadl_weights must be 4 non-negative reals, got {self.sadl_weights}")
        elif self.sadl_weights is not None:
            raise ValueError(f"sadl_weights only apply to sadl, not {self.kind!r}")

    @staticmethod
    def preset(name: str) -> "LossConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
        return LossConfig("sadl", sadl_weights=PRESETS[name])


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def sdr_loss(estimate, reference, eps: float = EPS) -> torch.Tensor:
    """-10*log10((||s||^2 + eps) / (||s_hat - s||^2 + eps)); lower is better.

    Raises SilentReference on an all-but-silent reference; such segments are
    scored by the energy term of the scenario-aware loss instead.
    """
    s_hat, s = _as_tensor(estimate), _as_tensor(reference)
    if s_hat.shape != s.shape:
        raise LengthMismatch(f"{tuple(s_hat.shape)} vs {tuple(s.shape)}")
    ref_energy = torch.sum(s * s)
    if float(ref_energy.detach()) < eps:
        raise SilentReference("reference is silent; SDR undefined")
    err_energy = torch.sum((s_hat - s) ** 2)
    return -10.0 * torch.log10((ref_energy + eps) / (err_energy + eps))


def sa_sdr_loss(estimates, references, eps: float = EPS) -> torch.Tensor:
    """Source-aggregated SDR over K pairs: energies pooled before the log.

    Pooling keeps the loss well-defined when individual references are silent
    (target-absent clips), which per-pair SDR cannot handle.
    """
    if len(estimates) == 0 or len(references) == 0:
        raise EmptyBatch("need at least one (estimate, reference) pair")
    if len(estimates) != len(references):
        raise LengthMismatch(f"{len(estimates)} estimates vs {len(references)} references")
    ref_energy = None
    err_energy = None
    for est, ref in zip(estimates, references):
        s_hat, s = _as_tensor(est), _as_tensor(ref)
        if s_hat.shape != s.shape:
            raise LengthMismatch(f"{tuple(s_hat.shape)} vs {tuple(s.shape)}")
        r = torch.sum(s * s)
        e = torch.sum((s_hat - s) ** 2)
        ref_energy = r if ref_energy is None else ref_energy + r
        err_energy = e if err_energy is None else err_energy + e
    if float(ref_energy.detach()) < eps:
        raise AllReferencesSilent("every reference in the batch is silent")
    return -10.0 * torch.log10((ref_energy + eps) / (err_energy + eps))


def merge_short_segments(
    segments: list[tuple[int, int, str]], min_samples: int = MIN_SEGMENT_SAMPLES
) -> list[tuple[int, int, str]]:
    """Absorb segments shorter than min_samples into a neighbor.

    Preference order: the longer neighbor sharing the segment's target-speaking
    polarity, else the longer neighbor outright. The absorbing segment keeps
    its own label; adjacent same-label runs are coalesced afterwards so the
    result stays a maximal-run segmentation. Repeats until every segment is
    long enough (or one remains).
    """
    segs = list(segments)
    while len(segs) > 1:
        lengths = [e - s for s, e, _ in segs]
        idx = int(np.argmin(lengths))
        if lengths[idx] >= min_samples:
            break
        start, end, label = segs[idx]
        speaking = label in _SPEECH_LABELS
        candidates = []
        for j in (idx - 1, idx + 1):
            if 0 <= j < len(segs):
                same = (segs[j][2] in _SPEECH_LABELS) == speaking
                candidates.append((same, segs[j][1] - segs[j][0], j))
        candidates.sort(reverse=True)  # same-polarity first, then longer
        j = candidates[0][2]
        ns, ne, nlab = segs[j]
        merged = (min(start, ns), max(end, ne), nlab)
        lo, hi = min(idx, j), max(idx, j)
        segs[lo:hi + 1] = [merged]
        k = lo
        while 0 < k < len(segs) and segs[k - 1][2] == segs[k][2]:
            segs[k - 1:k + 1] = [(segs[k - 1][0], segs[k][1], segs[k][2])]
            k -= 1
        while 0 <= k < len(segs) - 1 and segs[k][2] == segs[k + 1][2]:
            segs[k:k + 2] = [(segs[k][0], segs[k + 1][1], segs[k][2])]
    return segs


def energy_loss(estimate, eps: float = EPS) -> torch.Tensor:
    """10*log10(||s_hat||^2 + eps): minimized by exact silence (floor -80 dB at default eps)."""
    s_hat = _as_tensor(estimate)
    return 10.0 * torch.log10(torch.sum(s_hat * s_hat) + eps)


def sadl_loss(
    estimate,
    reference,
    seg: ScenarioSegmentation,
    weights: tuple[float, float, float, float],
    eps: float = EPS,
) -> torch.Tensor:
    """Scenario-aware loss: alpha*L_E(QQ) + beta*L_SDR(SQ) + gamma*L_SDR(SS) + delta*L_E(QS).

    Per-segment losses are averaged within each scenario class; classes absent
    from the clip contribute nothing. Tiny segments are merged first.
    """
    s_hat, s = _as_tensor(estimate), _as_tensor(reference)
    if s_hat.shape != s.shape:
        raise LengthMismatch(f"{tuple(s_hat.shape)} vs {tuple(s.shape)}")
    if not seg.segments:
        raise EmptySegmentation("clip has no scenario segments")
    if seg.segments[-1][1] != s.shape[-1]:
        raise LengthMismatch(
            f"segmentation covers {seg.segments[-1][1]} samples, waveform has {s.shape[-1]}"
        )
    alpha, beta, gamma, delta = weights
    weight_of = {"QQ": alpha, "SQ": beta, "SS": gamma, "QS": delta}
    per_class: dict[str, list[torch.Tensor]] = {lab: [] for lab in weight_of}
    for start, end, label in merge_short_segments(seg.segments):
        if label in _SPEECH_LABELS:
            per_class[label].append(sdr_loss(s_hat[start:end], s[start:end], eps))
        else:
            per_class[label].append(energy_loss(s_hat[start:end], eps))
    total = None
    for label, losses in per_class.items():
        if not losses:
            continue
        term = weight_of[label] * (sum(losses) / len(losses))
        total = term if total is None else total + term
    return total


def loss_from_config(config: LossConfig):
    """Bind a LossConfig to a callable of (estimate, reference, seg)."""
    if config.kind == "sdr":
        return lambda est, ref, seg=None: sdr_loss(est, ref, config.eps)
    if config.kind == "sa_sdr":
        return lambda ests, refs, segs=None: sa_sdr_loss(ests, refs, config.eps)
    return lambda est, ref, seg: sadl_loss(est, ref, seg, config.sadl_weights, config.eps)


def gradient_check(
    loss_fn,
    inputs: list[torch.Tensor],
    h: float = 1e-6,
    max_coords: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of autograd gradients against central differences.

    Inputs must be float64 leaf tensors; up to max_coords coordinates are
    sampled per input. The error denominator is floored at 1e-3 so central
    difference roundoff (~1e-10 absolute at the default h) does not register
    on near-zero coordinates; genuinely wrong gradients exceed the floor by
    orders of magnitude. Raises NonFiniteGradient if autograd returns NaN/inf.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    leaves = []
    for x in inputs:
        if x.dtype != torch.float64:
            raise ValueError("gradient_check requires float64 inputs")
        leaves.append(x.detach().clone().requires_grad_(True))
    loss = loss_fn(*leaves)
    grads = torch.autograd.grad(loss, leaves)
    max_rel = 0.0
    for x, g in zip(leaves, grads):
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("autograd produced a non-finite gradient")
        flat = x.detach().reshape(-1)
        n = flat.numel()
        coords = range(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            c = int(c)
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + h
                f_plus = float(loss_fn(*leaves))
                flat[c] = orig - h
                f_minus = float(loss_fn(*leaves))
                flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(g.reshape(-1)[c])
            scale = max(abs(analytic), abs(numeric), 1e-3)
            max_rel = max(max_rel, abs(analytic - numeric) / scale)
    return max_rel
