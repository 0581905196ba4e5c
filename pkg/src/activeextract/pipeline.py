"""Three-stage training orchestration.

Stage 1 pretrains the ASD on frame activity labels, stage 2 pretrains the
extractor on dynamically mixed fully-overlapped clips with the SDR loss, and
stage 3 finetunes the whole stack on the sparse corpus with SA-SDR or the
scenario-aware loss. The learning-rate schedule and early stopping are pure
functions of the validation-loss history; every run is seed-deterministic.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .asd import (
    AsdConfig,
    AsdNet,
    asd_train_step,
    load_asd_checkpoint,
    save_asd_checkpoint,
)
from .audio import Waveform
from .data import ClipBatch, CorpusDataset, DynamicMixSource, collate
from .errors import ConfigError, DivergedLoss, MissingPrerequisiteCheckpoint
from .losses import LossConfig, sa_sdr_loss, sadl_loss, sdr_loss
from .mixer import Manifest
from .separator import (
    ActiveExtract,
    ExtractorConfig,
    load_checkpoint,
    save_checkpoint,
)
from .synth import speaker_pool

logger = logging.getLogger(__name__)

STAGES = ("asd_pretrain", "overlap_pretrain", "sparse_finetune")

# Published epoch caps: pretraining stages get 100, finetuning 30.
DEFAULT_MAX_EPOCHS = {"asd_pretrain": 100, "overlap_pretrain": 100, "sparse_finetune": 30}


class ScheduleState:
    """Plateau schedule: halve after every 3 stagnant epochs, stop after 10.

    An epoch is stagnant when its validation loss is not strictly below the
    best seen so far. Improvement resets the stagnation count.
    """

    def __init__(
        self, lr_init: float, halve_patience: int = 3, stop_patience: int = 10
    ):
        if halve_patience <= 0 or stop_patience <= 0:
            raise ConfigError("patience values must be positive")
        self.lr = lr_init
        self.halve_patience = halve_patience
        self.stop_patience = stop_patience
        self.best: float | None = None
        self.stagnant = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Consume one epoch's validation loss; returns (halved, stop)."""
        if self.best is None or val_loss < self.best:
            self.best = val_loss
            self.stagnant = 0
            return False, False
        self.stagnant += 1
        halved = self.stagnant % self.halve_patience == 0
        if halved:
            self.lr /= 2.0
        return halved, self.stagnant >= self.stop_patience


@dataclass
class TrainConfig:
    stage: str
    loss: LossConfig | None = None
    lr_init: float = 1e-4
    halve_patience: int = 3
    stop_patience: int = 10
    max_epochs: int | None = None
    batch_size: int = 8
    seed: int = 0
    # data: a corpus directory (with manifest.jsonl) for manifest-backed
    # stages, or None for the dynamic-mixing pretraining stage.
    data: str | None = None
    dynamic_steps_per_epoch: int = 25
    dynamic_duration_s: float = 4.0
    n_speakers: int = 12
    pool_seed: int = 0
    model: ExtractorConfig | None = None
    freeze_asd: bool = False
    tp_only: bool = False
    out_dir: str = "runs"
    tag: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.max_epochs is None:
            self.max_epochs = DEFAULT_MAX_EPOCHS[self.stage]
        if self.stage == "asd_pretrain":
            if self.data is None:
                raise ConfigError("asd_pretrain needs a corpus directory")
        elif self.stage == "overlap_pretrain":
            if self.loss is None:
                self.loss = LossConfig("sdr")
            if self.loss.kind != "sdr":
                raise ConfigError("overlap_pretrain trains with the SDR loss")
        elif self.stage == "sparse_finetune":
            if self.loss is None:
                raise ConfigError("sparse_finetune needs a loss config")
            if self.loss.kind not in ("sa_sdr", "sadl") and not self.tp_only:
                raise ConfigError("sparse_finetune uses sa_sdr or sadl")
            if self.data is None:
                raise ConfigError("sparse_finetune needs a corpus directory")


@dataclass
class TrainResult:
    checkpoint_path: str
    best_val: float
    history: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise DivergedLoss(f"{what} is non-finite: {value}")
    return value


def _batch_loss(model: ActiveExtract, batch: ClipBatch, loss_cfg: LossConfig) -> torch.Tensor:
    """One forward pass plus the configured loss, averaged over the batch."""
    est, _ = model(batch.wav, batch.visual, batch.mfcc_feats)
    if loss_cfg.kind == "sa_sdr":
        return sa_sdr_loss(list(est), list(batch.target), loss_cfg.eps)
    if loss_cfg.kind == "sadl":
        per_clip = [
            sadl_loss(est[k], batch.target[k], batch.segs[k], loss_cfg.sadl_weights, loss_cfg.eps)
            for k in range(est.shape[0])
        ]
        return sum(per_clip) / len(per_clip)
    per_clip = [sdr_loss(est[k], batch.target[k], loss_cfg.eps) for k in range(est.shape[0])]
    return sum(per_clip) / len(per_clip)


def _epoch_mean(losses: list[float]) -> float:
    return float(np.mean(losses)) if losses else float("nan")


def _run_schedule_loop(
    config: TrainConfig,
    train_epoch,
    validate,
    save_best,
) -> tuple[TrainResult, dict]:
    """Shared epoch loop: train, validate, schedule, keep the best state."""
    schedule = ScheduleState(config.lr_init, config.halve_patience, config.stop_patience)
    result = TrainResult(checkpoint_path="", best_val=float("inf"))
    best_state: dict | None = None
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        train_loss = _check_finite(train_epoch(epoch, schedule.lr), "training loss")
        val_loss = _check_finite(validate(), "validation loss")
        improved = schedule.best is None or val_loss < schedule.best
        halved, stop = schedule.update(val_loss)
        if improved:
            result.best_val = val_loss
            best_state = save_best()
        result.history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": schedule.lr,
                "halved": halved,
                "seconds": round(time.time() - t0, 2),
            }
        )
        logger.info(
            "%s epoch %d: train %.4f val %.4f lr %.2e%s",
            config.stage, epoch, train_loss, val_loss, schedule.lr,
            " (halved)" if halved else "",
        )
        result.stopped_epoch = epoch
        if stop:
            break
    if best_state is None:
        raise DivergedLoss("no epoch produced a finite validation loss")
    return result, best_state


def _ckpt_path(config: TrainConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = config.tag or config.stage
    return out / f"{tag}.pt"


def train_config_to_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["loss"] = None if config.loss is None else {
        "kind": config.loss.kind,
        "sadl_weights": list(config.loss.sadl_weights) if config.loss.sadl_weights else None,
        "eps": config.loss.eps,
    }
    d["model"] = None if config.model is None else config.model.to_dict()
    return d


def _loss_from_value(value) -> LossConfig | None:
    """Accepts a kind string, a preset name, or a {kind, preset, weights} map."""
    if value is None:
        return None
    if isinstance(value, LossConfig):
        return value
    if isinstance(value, str):
        if value in ("sadl_o", "sadl_b"):
            return LossConfig.preset(value)
        return LossConfig(value)
    d = dict(value)
    if "preset" in d:
        return LossConfig.preset(d["preset"])
    weights = d.get("sadl_weights") or d.get("weights")
    return LossConfig(
        d["kind"],
        sadl_weights=tuple(weights) if weights else None,
        eps=float(d.get("eps", LossConfig("sdr").eps)),
    )


def _model_from_value(value) -> ExtractorConfig | None:
    """Accepts an ExtractorConfig, a full config dict, or a preset shorthand."""
    from .separator import paper_preset, toy_preset

    if value is None or isinstance(value, ExtractorConfig):
        return value
    d = dict(value)
    preset = d.pop("preset", None)
    if preset is None:
        return ExtractorConfig.from_dict(d)
    builder = {"toy": toy_preset, "paper": paper_preset}[preset]
    if preset == "paper":
        d.pop("scale_factor", None)
        d.pop("kernel_L", None)
    return builder(**d)


_FLOAT_FIELDS = ("lr_init", "dynamic_duration_s")
_INT_FIELDS = (
    "halve_patience", "stop_patience", "max_epochs", "batch_size", "seed",
    "dynamic_steps_per_epoch", "n_speakers", "pool_seed",
)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss"] = _loss_from_value(d.get("loss"))
    d["model"] = _model_from_value(d.get("model"))
    # YAML 1.1 reads exponent literals without a dot ("1e-4") as strings.
    for key in _FLOAT_FIELDS:
        if d.get(key) is not None:
            d[key] = float(d[key])
    for key in _INT_FIELDS:
        if d.get(key) is not None:
            d[key] = int(d[key])
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def _dump_effective_config(config: TrainConfig, ckpt_path: Path) -> None:
    text = yaml.safe_dump(train_config_to_dict(config), sort_keys=False)
    ckpt_path.with_suffix(ckpt_path.suffix + ".config.yaml").write_text(text)


def train(config: TrainConfig, init_checkpoint: str | None = None) -> TrainResult:
    """Run one stage to its best-validation checkpoint.

    Stage ordering is enforced: the overlap pretraining stage requires an ASD
    checkpoint (unless the model's reference bypasses the ASD), and sparse
    finetuning requires an overlap-pretraining checkpoint.
    """
    torch.manual_seed(config.seed)
    if config.stage == "asd_pretrain":
        return _train_asd(config)
    if config.stage == "overlap_pretrain":
        return _train_overlap(config, init_checkpoint)
    return _train_sparse(config, init_checkpoint)


def _train_asd(config: TrainConfig) -> TrainResult:
    root = Path(config.data)
    manifest = Manifest.load(root / "manifest.jsonl")
    asd_cfg = config.model.asd if config.model is not None else AsdConfig(visual_dim_in=20)
    net = AsdNet(asd_cfg)
    train_set = CorpusDataset(root, manifest, asd_cfg, split="train")
    val_set = CorpusDataset(root, manifest, asd_cfg, split="validation")
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr_init)

    def train_epoch(epoch: int, lr: float) -> float:
        for g in optimizer.param_groups:
            g["lr"] = lr
        net.train()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        losses = []
        for batch in train_set.batches(config.batch_size, rng):
            losses.append(
                asd_train_step(
                    net, batch.mfcc_feats, batch.visual, batch.frame_labels,
                    batch.frame_mask, optimizer,
                )
            )
        return _epoch_mean(losses)

    def validate() -> float:
        net.eval()
        losses = []
        with torch.no_grad():
            for batch in val_set.batches(config.batch_size):
                losses.append(
                    asd_train_step(
                        net, batch.mfcc_feats, batch.visual, batch.frame_labels,
                        batch.frame_mask,
                    )
                )
        return _epoch_mean(losses)

    result, best_state = _run_schedule_loop(
        config, train_epoch, validate, lambda: copy.deepcopy(net.state_dict())
    )
    net.load_state_dict(best_state)
    path = _ckpt_path(config)
    save_asd_checkpoint(path, net, config.seed, {"stage": "asd_pretrain"})
    _dump_effective_config(config, path)
    result.checkpoint_path = str(path)
    return result


def _load_model_for_stage(
    config: TrainConfig, init_checkpoint: str | None, required_stage: str | None
) -> ActiveExtract:
    if config.stage == "overlap_pretrain":
        if config.model is None:
            raise ConfigError("overlap_pretrain needs a model config")
        model = ActiveExtract(config.model)
        if config.model.reference_source == "asd":
            if init_checkpoint is None:
                raise MissingPrerequisiteCheckpoint(
                    "overlap_pretrain needs the pretrained ASD checkpoint"
                )
            asd_net, _ = load_asd_checkpoint(init_checkpoint)
            model.asd_net.load_state_dict(asd_net.state_dict())
        return model
    if init_checkpoint is None:
        raise MissingPrerequisiteCheckpoint(
            f"{config.stage} requires a {required_stage} checkpoint"
        )
    try:
        model, meta = load_checkpoint(init_checkpoint)
    except (ValueError, KeyError) as e:
        raise MissingPrerequisiteCheckpoint(
            f"{config.stage} requires a {required_stage} checkpoint, "
            f"cannot load {init_checkpoint}: {e}"
        ) from e
    if meta["stage_tag"] not in ("overlap_pretrain", "sparse_finetune"):
        raise MissingPrerequisiteCheckpoint(
            f"{config.stage} requires a {required_stage} checkpoint, got {meta['stage_tag']!r}"
        )
    return model


def _make_optimizer(model: ActiveExtract, config: TrainConfig) -> torch.optim.Optimizer:
    if config.freeze_asd and model.asd_net is not None:
        for p in model.asd_net.parameters():
            p.requires_grad_(False)
        params = [p for p in model.parameters() if p.requires_grad]
    else:
        params = list(model.parameters())
    return torch.optim.Adam(params, lr=config.lr_init)


def _train_overlap(config: TrainConfig, init_checkpoint: str | None) -> TrainResult:
    model = _load_model_for_stage(config, init_checkpoint, "asd_pretrain")
    pool = speaker_pool(config.n_speakers, config.pool_seed)
    source = DynamicMixSource(
        pool, model.config.asd, config.seed, duration_s=config.dynamic_duration_s,
        visual_dim=model.config.asd.visual_dim_in,
    )
    # A fixed validation set: training epochs count from 1, so stream 0 is free.
    val_batches = list(
        source.batches(config.batch_size, max(config.dynamic_steps_per_epoch // 4, 2), epoch=0)
    )
    optimizer = _make_optimizer(model, config)

    def train_epoch(epoch: int, lr: float) -> float:
        for g in optimizer.param_groups:
            g["lr"] = lr
        model.train()
        losses = []
        for batch in source.batches(config.batch_size, config.dynamic_steps_per_epoch, epoch):
            optimizer.zero_grad()
            loss = _batch_loss(model, batch, config.loss)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        return _epoch_mean(losses)

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            return _epoch_mean(
                [float(_batch_loss(model, b, config.loss)) for b in val_batches]
            )

    result, best_state = _run_schedule_loop(
        config, train_epoch, validate, lambda: copy.deepcopy(model.state_dict())
    )
    model.load_state_dict(best_state)
    path = _ckpt_path(config)
    save_checkpoint(path, model, "overlap_pretrain", config.seed, extra={"best_val": result.best_val})
    _dump_effective_config(config, path)
    result.checkpoint_path = str(path)
    return result


def _train_sparse(config: TrainConfig, init_checkpoint: str | None) -> TrainResult:
    model = _load_model_for_stage(config, init_checkpoint, "overlap_pretrain")
    root = Path(config.data)
    manifest = Manifest.load(root / "manifest.jsonl")
    if config.tp_only:
        manifest = Manifest([e for e in manifest.entries if e.category == "TP"])
    train_set = CorpusDataset(root, manifest, model.config.asd, split="train")
    val_set = CorpusDataset(root, manifest, model.config.asd, split="validation")
    optimizer = _make_optimizer(model, config)

    def train_epoch(epoch: int, lr: float) -> float:
        for g in optimizer.param_groups:
            g["lr"] = lr
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        losses = []
        for batch in train_set.batches(config.batch_size, rng):
            optimizer.zero_grad()
            loss = _batch_loss(model, batch, config.loss)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        return _epoch_mean(losses)

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            return _epoch_mean(
                [float(_batch_loss(model, b, config.loss)) for b in val_set.batches(config.batch_size)]
            )

    result, best_state = _run_schedule_loop(
        config, train_epoch, validate, lambda: copy.deepcopy(model.state_dict())
    )
    model.load_state_dict(best_state)
    path = _ckpt_path(config)
    save_checkpoint(
        path, model, "sparse_finetune", config.seed,
        extra={"best_val": result.best_val, "loss": config.loss.kind},
    )
    _dump_effective_config(config, path)
    result.checkpoint_path = str(path)
    return result


def asd_frame_accuracy(net: AsdNet, dataset: CorpusDataset, batch_size: int = 16) -> float:
    """Fraction of real (unpadded) frames whose thresholded activity matches."""
    net.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for batch in dataset.batches(batch_size):
            feats = net(batch.mfcc_feats, batch.visual)
            pred = (feats.activity_prob >= 0.5).to(torch.uint8)
            real = batch.frame_mask.bool()
            match = pred == batch.frame_labels.to(torch.uint8)
            correct += int(match[real].sum())
            total += int(real.sum())
    return correct / max(total, 1)


def check_gradients(seed: int = 0, max_coords: int = 100) -> tuple[bool, list[str]]:
    """Analytic vs central-difference gradients for all three losses."""
    from .losses import PRESETS, gradient_check
    from .scenario import ActivityMask, segment

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    n = 4000
    lines = []
    ok = True

    ref = torch.from_numpy(rng.normal(0, 0.1, n))
    err = gradient_check(lambda e: sdr_loss(e, ref), [torch.from_numpy(rng.normal(0, 0.1, n))],
                         max_coords=max_coords, rng=rng)
    lines.append(f"sdr_loss: max rel err {err:.3e}")
    ok &= err < 1e-5

    refs = [torch.from_numpy(rng.normal(0, 0.1, n)) for _ in range(3)]
    def sa(e0, e1, e2):
        return sa_sdr_loss([e0, e1, e2], refs)
    ests = [torch.from_numpy(rng.normal(0, 0.1, n)) for _ in range(3)]
    err = gradient_check(sa, ests, max_coords=max_coords, rng=rng)
    lines.append(f"sa_sdr_loss: max rel err {err:.3e}")
    ok &= err < 1e-5

    # A clip covering all four scenario classes.
    t = np.zeros(n, dtype=np.uint8); t[0:2400] = 1
    i = np.zeros(n, dtype=np.uint8); i[1200:3200] = 1
    seg = segment(ActivityMask(t), ActivityMask(i))
    ref = torch.from_numpy(rng.normal(0, 0.1, n) * t.astype(np.float64))
    err = gradient_check(
        lambda e: sadl_loss(e, ref, seg, PRESETS["sadl_b"]),
        [torch.from_numpy(rng.normal(0, 0.1, n))],
        max_coords=max_coords, rng=rng,
    )
    lines.append(f"sadl_loss: max rel err {err:.3e}")
    ok &= err < 1e-5
    lines.append("PASS" if ok else "FAIL")
    return bool(ok), lines


def check_metrics(seed: int = 0, trials: int = 1000) -> tuple[bool, list[str]]:
    """Metric property suite: scale invariance, dB shifts, silence routing."""
    from .audio import SAMPLE_RATE, Waveform, power, si_snr
    from .errors import SilentReference
    from .scenario import bucket

    rng = np.random.default_rng(seed)
    ok = True
    lines = []

    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1000, 4000))
        s = rng.normal(0, 0.1, n)
        e = s + rng.normal(0, 0.02, n)
        a, b = float(rng.uniform(0.1, 10)), float(rng.uniform(0.1, 10))
        base = si_snr(Waveform(e), Waveform(s)).value
        scaled = si_snr(Waveform(a * e), Waveform(b * s)).value
        worst = max(worst, abs(scaled - base))
    lines.append(f"si_snr scale invariance: worst drift {worst:.3e} dB over {trials} trials")
    ok &= worst < 1e-6

    x = rng.normal(0, 0.1, SAMPLE_RATE)
    shift = power(Waveform(np.sqrt(2.0) * x)).value - power(Waveform(x)).value
    lines.append(f"power doubling shift: {shift:.6f} dB (expect 3.0103)")
    ok &= abs(shift - 10 * np.log10(2)) < 1e-9
    shift4 = power(Waveform(2.0 * x)).value - power(Waveform(x)).value
    lines.append(f"amplitude doubling shift: {shift4:.6f} dB (expect 6.0206)")
    ok &= abs(shift4 - 20 * np.log10(2)) < 1e-9

    try:
        si_snr(Waveform(x), Waveform(np.zeros(SAMPLE_RATE)))
        lines.append("silent reference: MISSED")
        ok = False
    except SilentReference:
        lines.append("silent reference: routed to SilentReference")

    edge_ok = (
        bucket(0.0) == "0%" and bucket(0.2) == "(0,20]%" and bucket(0.4) == "(20,40]%"
        and bucket(0.6) == "(40,60]%" and bucket(0.8) == "(60,80]%" and bucket(1.0) == "(80,100]%"
        and bucket(0.2000001) == "(20,40]%"
    )
    lines.append(f"bucket boundaries half-open right-inclusive: {'ok' if edge_ok else 'WRONG'}")
    ok &= edge_ok
    lines.append("PASS" if ok else "FAIL")
    return bool(ok), lines


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def run_experiment(recipe: dict, out_dir: str | Path) -> dict:
    """Three stages end to end, then evaluation; returns the provenance record.

    The recipe names a model variant (backbone, reference mode or source), a
    loss preset for finetuning, the corpus directory, and per-stage epoch and
    batch settings. Everything else defaults to the toy preset.
    """
    from .evaluation import evaluate, report_render, system_from_model
    from .separator import toy_preset, paper_preset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(recipe.get("seed", 0))
    corpus = recipe["corpus"]
    preset_name = recipe.get("preset", "toy")
    builder = {"toy": toy_preset, "paper": paper_preset}[preset_name]
    builder_kwargs = dict(
        mode=recipe.get("mode", "both"),
        backbone=recipe.get("backbone", "xmodal"),
        reference_source=recipe.get("reference_source", "asd"),
        visual_dim_in=int(recipe.get("visual_dim_in", 20)),
    )
    if preset_name == "toy":
        for key in ("scale_factor", "kernel_L"):
            if key in recipe:
                builder_kwargs[key] = int(recipe[key])
    model_cfg = builder(**builder_kwargs)

    stage_cfgs = {k: dict(recipe.get(k, {})) for k in ("asd", "stage2", "stage3")}
    loss_name = recipe.get("loss", "sadl_b")
    if loss_name in ("sadl_o", "sadl_b"):
        stage3_loss = LossConfig.preset(loss_name)
    else:
        stage3_loss = LossConfig(loss_name)

    checkpoints: dict[str, str] = {}
    asd_ckpt = recipe.get("asd_checkpoint")
    if asd_ckpt is None and model_cfg.reference_source == "asd":
        cfg1 = TrainConfig(
            stage="asd_pretrain", data=corpus, seed=seed, model=model_cfg,
            out_dir=str(out), tag="asd_pretrain",
            max_epochs=int(stage_cfgs["asd"].get("epochs", 10)),
            batch_size=int(stage_cfgs["asd"].get("batch_size", 8)),
            lr_init=float(stage_cfgs["asd"].get("lr", 1e-3)),
        )
        asd_ckpt = train(cfg1).checkpoint_path
    if asd_ckpt:
        checkpoints["asd_pretrain"] = str(asd_ckpt)

    cfg2 = TrainConfig(
        stage="overlap_pretrain", loss=LossConfig("sdr"), seed=seed, model=model_cfg,
        out_dir=str(out), tag="overlap_pretrain",
        max_epochs=int(stage_cfgs["stage2"].get("epochs", 10)),
        batch_size=int(stage_cfgs["stage2"].get("batch_size", 4)),
        dynamic_steps_per_epoch=int(stage_cfgs["stage2"].get("steps_per_epoch", 25)),
        dynamic_duration_s=float(stage_cfgs["stage2"].get("duration_s", 4.0)),
        n_speakers=int(stage_cfgs["stage2"].get("n_speakers", 12)),
        pool_seed=int(stage_cfgs["stage2"].get("pool_seed", seed)),
        lr_init=float(stage_cfgs["stage2"].get("lr", 1e-4)),
    )
    r2 = train(cfg2, init_checkpoint=asd_ckpt)
    checkpoints["overlap_pretrain"] = r2.checkpoint_path

    cfg3 = TrainConfig(
        stage="sparse_finetune", loss=stage3_loss, data=corpus, seed=seed,
        out_dir=str(out), tag="sparse_finetune",
        max_epochs=int(stage_cfgs["stage3"].get("epochs", 10)),
        batch_size=int(stage_cfgs["stage3"].get("batch_size", 4)),
        tp_only=bool(stage_cfgs["stage3"].get("tp_only", False)),
        lr_init=float(stage_cfgs["stage3"].get("lr", 1e-4)),
    )
    r3 = train(cfg3, init_checkpoint=r2.checkpoint_path)
    checkpoints["sparse_finetune"] = r3.checkpoint_path

    model, _ = load_checkpoint(r3.checkpoint_path)
    manifest = Manifest.load(Path(corpus) / "manifest.jsonl")
    report = evaluate(
        system_from_model(model), manifest, corpus,
        model_tag=recipe.get("name", "activeextract"),
        dataset_tag=str(corpus), split=recipe.get("eval_split", "test"),
    )
    report_text = report_render(report, "markdown")
    (out / "report.md").write_text(report_text)

    provenance = {
        "recipe": recipe,
        "model_config": model_cfg.to_dict(),
        "loss": stage3_loss.kind,
        "seed": seed,
        "checkpoints": {k: _sha256(v) for k, v in checkpoints.items()},
        "manifest_sha256": _sha256(Path(corpus) / "manifest.jsonl"),
        "best_val": {"overlap_pretrain": r2.best_val, "sparse_finetune": r3.best_val},
        "report": report_text,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, default=str))
    return provenance
