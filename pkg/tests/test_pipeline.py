"""Training orchestration: schedule rules, stage configs, gating, checks, CLI."""

import dataclasses
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import yaml

from activeextract.asd import AsdConfig, AsdNet, load_asd_checkpoint, save_asd_checkpoint
from activeextract.cli import main
from activeextract.data import CorpusDataset
from activeextract.errors import ConfigError, DivergedLoss, MissingPrerequisiteCheckpoint
from activeextract.losses import LossConfig
from activeextract.mixer import CorpusConfig, Manifest, generate_corpus
from activeextract.pipeline import (
    DEFAULT_MAX_EPOCHS,
    ScheduleState,
    TrainConfig,
    asd_frame_accuracy,
    check_gradients,
    check_metrics,
    run_experiment,
    train,
    train_config_from_dict,
    train_config_to_dict,
)
from activeextract.separator import load_checkpoint, toy_preset


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline_corpus")
    config = CorpusConfig(
        splits={
            "train": {"0%": 2, "(40,60]%": 2, "(80,100]%": 2, "TA": 1},
            "validation": {"0%": 1, "(40,60]%": 1},
        },
        seed=71,
        duration_range=(3.0, 3.5),
    )
    manifest = generate_corpus(config, root)
    return root, manifest


@pytest.fixture(scope="module")
def stage_chain(corpus, tmp_path_factory):
    """One seed-pinned micro pass through all three training stages."""
    root, _ = corpus
    out = tmp_path_factory.mktemp("pipeline_runs")
    model_cfg = toy_preset(mode="both", backbone="dprnn", visual_dim_in=20)
    cfg1 = TrainConfig(
        stage="asd_pretrain", data=str(root), model=model_cfg, max_epochs=2,
        batch_size=4, lr_init=1e-3, seed=11, out_dir=str(out), tag="asd",
    )
    r1 = train(cfg1)
    cfg2 = TrainConfig(
        stage="overlap_pretrain", model=model_cfg, max_epochs=2, batch_size=2,
        dynamic_steps_per_epoch=2, dynamic_duration_s=3.0, n_speakers=4,
        pool_seed=5, lr_init=1e-3, seed=12, out_dir=str(out), tag="overlap",
    )
    r2 = train(cfg2, init_checkpoint=r1.checkpoint_path)
    cfg3 = TrainConfig(
        stage="sparse_finetune", loss=LossConfig.preset("sadl_b"), data=str(root),
        max_epochs=1, batch_size=4, lr_init=1e-3, seed=13, out_dir=str(out),
        tag="sparse",
    )
    r3 = train(cfg3, init_checkpoint=r2.checkpoint_path)
    return SimpleNamespace(
        root=root, out=out, model_cfg=model_cfg,
        cfg1=cfg1, r1=r1, cfg2=cfg2, r2=r2, cfg3=cfg3, r3=r3,
    )


class TestScheduleState:
    def test_halves_after_exactly_three_stagnant_epochs(self):
        """The third consecutive non-improving epoch halves the rate."""
        sched = ScheduleState(0.1)
        flags = [sched.update(1.0)[0] for _ in range(4)]
        assert flags == [False, False, False, True]
        assert sched.lr == 0.05

    def test_improvement_resets_the_stagnation_count(self):
        """A strict improvement anywhere restarts the 3-epoch window."""
        sched = ScheduleState(0.1)
        halved = [sched.update(v)[0] for v in (5.0, 4.0, 4.2, 4.1, 4.05, 3.9, 4.0, 4.0)]
        assert halved == [False] * 4 + [True, False, False, False]
        assert sched.best == 3.9

    def test_equal_to_best_counts_as_stagnant(self):
        """Matching the best loss is not an improvement."""
        sched = ScheduleState(1.0)
        sched.update(2.0)
        sched.update(2.0)
        assert sched.stagnant == 1

    def test_stops_after_exactly_ten_stagnant_epochs(self):
        """Stopping fires on the tenth consecutive stagnant epoch, not before."""
        sched = ScheduleState(1.0)
        sched.update(1.0)
        stops = [sched.update(1.0)[1] for _ in range(10)]
        assert stops == [False] * 9 + [True]

    def test_three_halvings_before_stopping(self):
        """Ten stagnant epochs halve at counts 3, 6, 9 for a rate of lr/8."""
        sched = ScheduleState(1.0)
        sched.update(1.0)
        halved = [sched.update(1.0)[0] for _ in range(10)]
        assert [i + 1 for i, h in enumerate(halved) if h] == [3, 6, 9]
        assert sched.lr == 0.125

    def test_custom_patience_values(self):
        """Halve and stop windows follow the configured patience."""
        sched = ScheduleState(1.0, halve_patience=2, stop_patience=4)
        sched.update(1.0)
        results = [sched.update(1.0) for _ in range(4)]
        assert [h for h, _ in results] == [False, True, False, True]
        assert [s for _, s in results] == [False, False, False, True]

    def test_nonpositive_patience_rejected(self):
        """Patience values must be positive."""
        with pytest.raises(ConfigError):
            ScheduleState(1.0, halve_patience=0)
        with pytest.raises(ConfigError):
            ScheduleState(1.0, stop_patience=0)


class TestTrainConfig:
    def test_unknown_stage_rejected(self):
        """Stage names outside the three-stage recipe are config errors."""
        with pytest.raises(ConfigError):
            TrainConfig(stage="warmup")

    def test_default_epoch_caps_per_stage(self):
        """Pretraining stages cap at 100 epochs, finetuning at 30."""
        assert DEFAULT_MAX_EPOCHS == {
            "asd_pretrain": 100, "overlap_pretrain": 100, "sparse_finetune": 30,
        }
        cfg = TrainConfig(stage="sparse_finetune", loss=LossConfig("sa_sdr"), data="x")
        assert cfg.max_epochs == 30

    def test_asd_stage_requires_a_corpus(self):
        """Frame-label pretraining has no dynamic-mix fallback."""
        with pytest.raises(ConfigError):
            TrainConfig(stage="asd_pretrain")

    def test_overlap_stage_defaults_to_sdr_and_rejects_others(self):
        """Fully overlapped pretraining always trains with the SDR loss."""
        cfg = TrainConfig(stage="overlap_pretrain")
        assert cfg.loss.kind == "sdr"
        with pytest.raises(ConfigError):
            TrainConfig(stage="overlap_pretrain", loss=LossConfig("sa_sdr"))

    def test_sparse_stage_requires_silence_aware_loss(self):
        """Sparse finetuning needs sa_sdr or sadl unless restricted to TP clips."""
        with pytest.raises(ConfigError):
            TrainConfig(stage="sparse_finetune", data="x")
        with pytest.raises(ConfigError):
            TrainConfig(stage="sparse_finetune", loss=LossConfig("sdr"), data="x")
        cfg = TrainConfig(stage="sparse_finetune", loss=LossConfig("sdr"), data="x", tp_only=True)
        assert cfg.loss.kind == "sdr"

    def test_sparse_stage_requires_a_corpus(self):
        """Finetuning runs on the fixed sparse corpus, not dynamic mixes."""
        with pytest.raises(ConfigError):
            TrainConfig(stage="sparse_finetune", loss=LossConfig("sa_sdr"))


class TestTrainConfigDict:
    def test_round_trip_preserves_every_field(self):
        """to_dict then from_dict reproduces the config exactly."""
        cfg = TrainConfig(
            stage="sparse_finetune", loss=LossConfig.preset("sadl_b"), data="corpus",
            model=toy_preset(mode="pv_only", backbone="xmodal", visual_dim_in=20),
            lr_init=5e-4, max_epochs=7, batch_size=3, seed=42, freeze_asd=True,
            tag="round",
        )
        again = train_config_from_dict(train_config_to_dict(cfg))
        assert again == cfg

    def test_yaml_exponent_strings_coerced(self):
        """YAML 1.1 reads "1e-3" as a string; the loader coerces it back."""
        d = yaml.safe_load("stage: overlap_pretrain\nlr_init: 1e-3\nmax_epochs: '5'\n")
        assert isinstance(d["lr_init"], str)
        cfg = train_config_from_dict(d)
        assert cfg.lr_init == 1e-3
        assert cfg.max_epochs == 5

    def test_loss_shorthand_forms(self):
        """A loss may be a kind string, a preset name, or a mapping."""
        base = {"stage": "sparse_finetune", "data": "x"}
        assert train_config_from_dict({**base, "loss": "sadl_b"}).loss.sadl_weights == (
            0.0005, 0.1, 1, 0.005)
        assert train_config_from_dict({**base, "loss": "sa_sdr"}).loss.kind == "sa_sdr"
        assert train_config_from_dict(
            {**base, "loss": {"preset": "sadl_o"}}).loss.sadl_weights == (0.005, 1, 1, 0.005)
        cfg = train_config_from_dict(
            {**base, "loss": {"kind": "sadl", "weights": [1, 2, 3, 4]}})
        assert cfg.loss.sadl_weights == (1, 2, 3, 4)

    def test_model_preset_shorthand(self):
        """A model mapping with a preset key builds the named preset."""
        d = {
            "stage": "overlap_pretrain",
            "model": {"preset": "toy", "mode": "both", "backbone": "dprnn",
                      "visual_dim_in": 20, "scale_factor": 4},
        }
        assert train_config_from_dict(d).model == toy_preset(
            mode="both", backbone="dprnn", visual_dim_in=20, scale_factor=4)

    def test_unknown_keys_rejected(self):
        """Misspelled config keys fail loudly instead of being dropped."""
        with pytest.raises(ConfigError):
            train_config_from_dict({"stage": "asd_pretrain", "data": "x", "bogus": 1})


class TestStagePrerequisites:
    def test_overlap_with_asd_reference_needs_asd_checkpoint(self):
        """ASD-referenced pretraining cannot start from scratch."""
        cfg = TrainConfig(
            stage="overlap_pretrain",
            model=toy_preset(mode="both", backbone="dprnn", visual_dim_in=20),
            max_epochs=1,
        )
        with pytest.raises(MissingPrerequisiteCheckpoint):
            train(cfg)

    def test_sparse_without_init_checkpoint(self, corpus):
        """Finetuning requires the overlap-pretraining checkpoint."""
        root, _ = corpus
        cfg = TrainConfig(
            stage="sparse_finetune", loss=LossConfig("sa_sdr"), data=str(root),
            max_epochs=1,
        )
        with pytest.raises(MissingPrerequisiteCheckpoint):
            train(cfg)

    def test_sparse_rejects_wrong_checkpoint_kind(self, corpus, tmp_path):
        """Handing the ASD checkpoint to the finetuning stage is caught."""
        root, _ = corpus
        asd_path = tmp_path / "asd_only.pt"
        save_asd_checkpoint(asd_path, AsdNet(AsdConfig(visual_dim_in=20)), 0, {})
        cfg = TrainConfig(
            stage="sparse_finetune", loss=LossConfig("sa_sdr"), data=str(root),
            max_epochs=1, out_dir=str(tmp_path),
        )
        with pytest.raises(MissingPrerequisiteCheckpoint):
            train(cfg, init_checkpoint=str(asd_path))


class TestTrainingStages:
    def test_asd_stage_writes_a_loadable_checkpoint(self, stage_chain):
        """Stage one saves an ASD checkpoint that loads back."""
        assert stage_chain.r1.checkpoint_path.endswith("asd.pt")
        net, meta = load_asd_checkpoint(stage_chain.r1.checkpoint_path)
        assert isinstance(net, AsdNet)
        assert np.isfinite(stage_chain.r1.best_val)

    def test_history_records_one_entry_per_epoch(self, stage_chain):
        """Every epoch logs loss, rate, and timing."""
        hist = stage_chain.r1.history
        assert [h["epoch"] for h in hist] == [1, 2]
        assert all(
            set(h) >= {"epoch", "train_loss", "val_loss", "lr", "halved", "seconds"}
            for h in hist
        )
        assert stage_chain.r1.stopped_epoch == 2

    def test_overlap_stage_tags_its_checkpoint(self, stage_chain):
        """Stage two saves under the overlap-pretraining stage tag."""
        model, meta = load_checkpoint(stage_chain.r2.checkpoint_path)
        assert meta["stage_tag"] == "overlap_pretrain"
        assert Path(stage_chain.r2.checkpoint_path + ".card.txt").exists()

    def test_sparse_stage_tags_loss_and_stage(self, stage_chain):
        """Stage three records the finetuning loss kind in its metadata."""
        model, meta = load_checkpoint(stage_chain.r3.checkpoint_path)
        assert meta["stage_tag"] == "sparse_finetune"
        assert meta["extra"]["loss"] == "sadl"

    def test_every_stage_dumps_its_effective_config(self, stage_chain):
        """Each checkpoint is paired with a YAML dump that loads back equal."""
        for cfg, result in (
            (stage_chain.cfg1, stage_chain.r1),
            (stage_chain.cfg2, stage_chain.r2),
            (stage_chain.cfg3, stage_chain.r3),
        ):
            dump = Path(result.checkpoint_path + ".config.yaml")
            assert dump.exists()
            assert train_config_from_dict(yaml.safe_load(dump.read_text())) == cfg

    def test_freeze_asd_keeps_asd_parameters_fixed(self, stage_chain):
        """Finetuning with a frozen ASD leaves its weights bit-identical."""
        before, _ = load_checkpoint(stage_chain.r2.checkpoint_path)
        cfg = TrainConfig(
            stage="sparse_finetune", loss=LossConfig("sa_sdr"),
            data=str(stage_chain.root), max_epochs=1, batch_size=4, lr_init=1e-2,
            seed=14, out_dir=str(stage_chain.out), tag="frozen", freeze_asd=True,
        )
        result = train(cfg, init_checkpoint=stage_chain.r2.checkpoint_path)
        after, _ = load_checkpoint(result.checkpoint_path)
        frozen = after.asd_net.state_dict()
        for key, value in before.asd_net.state_dict().items():
            assert torch.equal(frozen[key], value)
        moved = [
            key for key, value in before.state_dict().items()
            if not key.startswith("asd_net.") and not torch.equal(after.state_dict()[key], value)
        ]
        assert moved

    def test_tp_only_allows_plain_sdr_finetuning(self, stage_chain):
        """Restricting to target-present clips permits the SDR loss."""
        cfg = TrainConfig(
            stage="sparse_finetune", loss=LossConfig("sdr"), data=str(stage_chain.root),
            max_epochs=1, batch_size=4, lr_init=1e-3, seed=15,
            out_dir=str(stage_chain.out), tag="tponly", tp_only=True,
        )
        result = train(cfg, init_checkpoint=stage_chain.r2.checkpoint_path)
        assert np.isfinite(result.best_val)

    def test_training_is_seed_deterministic(self, stage_chain):
        """Identical configs and seeds give bit-identical checkpoints."""
        runs = []
        for tag in ("det_a", "det_b"):
            cfg = dataclasses.replace(
                stage_chain.cfg2, tag=tag, max_epochs=1, dynamic_steps_per_epoch=2,
            )
            runs.append(train(cfg, init_checkpoint=stage_chain.r1.checkpoint_path))
        assert runs[0].best_val == runs[1].best_val
        state_a, _ = load_checkpoint(runs[0].checkpoint_path)
        state_b, _ = load_checkpoint(runs[1].checkpoint_path)
        for key, value in state_a.state_dict().items():
            assert torch.equal(state_b.state_dict()[key], value)

    def test_exploding_rate_raises_diverged_loss(self, stage_chain):
        """A non-finite epoch loss stops the run with a divergence error."""
        cfg = dataclasses.replace(
            stage_chain.cfg2, tag="explode", max_epochs=1, lr_init=1e25,
        )
        with pytest.raises(DivergedLoss):
            train(cfg, init_checkpoint=stage_chain.r1.checkpoint_path)


class TestAsdFrameAccuracy:
    def test_accuracy_is_a_fraction_and_deterministic(self, corpus, stage_chain):
        """Held-out frame accuracy is a stable value in [0, 1]."""
        root, manifest = corpus
        net, _ = load_asd_checkpoint(stage_chain.r1.checkpoint_path)
        dataset = CorpusDataset(root, manifest, AsdConfig(visual_dim_in=20), split="validation")
        acc = asd_frame_accuracy(net, dataset)
        assert 0.0 <= acc <= 1.0
        assert asd_frame_accuracy(net, dataset) == acc


class TestChecks:
    def test_gradient_suite_passes(self):
        """All three losses match central differences to 1e-5."""
        ok, lines = check_gradients(seed=0, max_coords=25)
        assert ok
        assert lines[-1] == "PASS"
        assert len(lines) == 4

    def test_metric_suite_passes(self):
        """Scale invariance, dB shifts, silence routing, and bucket edges hold."""
        ok, lines = check_metrics(seed=0, trials=200)
        assert ok
        assert lines[-1] == "PASS"


class TestRunExperiment:
    def test_micro_experiment_writes_provenance(self, corpus, tmp_path):
        """The end-to-end recipe trains, evaluates, and records hashes."""
        root, _ = corpus
        recipe = {
            "name": "micro", "corpus": str(root), "backbone": "dprnn",
            "reference_source": "visual", "loss": "sa_sdr", "seed": 3,
            "eval_split": "validation",
            "stage2": {"epochs": 1, "batch_size": 2, "steps_per_epoch": 2,
                       "duration_s": 3.0, "n_speakers": 4, "lr": 1e-3},
            "stage3": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
        }
        out = tmp_path / "exp"
        provenance = run_experiment(recipe, out)
        assert (out / "provenance.json").exists()
        assert "Mixture" in (out / "report.md").read_text()
        # The visual-reference recipe skips ASD pretraining entirely.
        assert set(provenance["checkpoints"]) == {"overlap_pretrain", "sparse_finetune"}
        assert all(len(h) == 64 for h in provenance["checkpoints"].values())
        assert set(provenance["best_val"]) == {"overlap_pretrain", "sparse_finetune"}


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    config = {
        "splits": {
            "train": {"0%": 2, "(40,60]%": 2},
            "validation": {"0%": 1, "(40,60]%": 1},
        },
        "seed": 17,
        "duration_range": [3.0, 3.4],
    }
    path = root / "corpus.yaml"
    path.write_text(yaml.safe_dump(config))
    assert main(["mix", "generate", "--config", str(path), "--out", str(root / "data")]) == 0
    return root / "data"


class TestCli:
    def test_mix_generate_reports_clip_count(self, cli_corpus, capsys):
        """Corpus generation prints the clip count and a stats table."""
        assert main([
            "mix", "stats", "--manifest", str(cli_corpus / "manifest.jsonl"),
        ]) == 0
        out = capsys.readouterr().out
        assert "split" in out and "train" in out

    def test_missing_config_file_exits_2(self):
        """A nonexistent config path is a config error."""
        assert main(["mix", "generate", "--config", "/no/such.yaml", "--out", "/tmp/x"]) == 2

    def test_non_mapping_config_exits_2(self, tmp_path):
        """A config that is not a mapping is a config error."""
        path = tmp_path / "bad.yaml"
        path.write_text("- just\n- a list\n")
        assert main(["mix", "generate", "--config", str(path), "--out", str(tmp_path)]) == 2

    def test_config_without_splits_exits_2(self, tmp_path):
        """A corpus config must carry a splits mapping."""
        path = tmp_path / "nosplits.yaml"
        path.write_text("seed: 1\n")
        assert main(["mix", "generate", "--config", str(path), "--out", str(tmp_path)]) == 2

    def test_train_and_eval_round_trip(self, cli_corpus, tmp_path, capsys):
        """Training from YAML produces a checkpoint the eval command scores."""
        train_cfg = {
            "stage": "overlap_pretrain", "max_epochs": 1, "batch_size": 2,
            "dynamic_steps_per_epoch": 2, "dynamic_duration_s": 3.0,
            "n_speakers": 4, "lr_init": "1e-3", "seed": 9,
            "out_dir": str(tmp_path), "tag": "cli_overlap",
            "model": {"preset": "toy", "backbone": "dprnn",
                      "reference_source": "visual", "visual_dim_in": 20},
        }
        path = tmp_path / "train.yaml"
        path.write_text(yaml.safe_dump(train_cfg))
        assert main(["train", "--config", str(path)]) == 0
        assert "checkpoint:" in capsys.readouterr().out
        report = tmp_path / "report.tsv"
        assert main([
            "eval", "--ckpt", str(tmp_path / "cli_overlap.pt"),
            "--manifest", str(cli_corpus / "manifest.jsonl"),
            "--split", "train", "--format", "tsv", "--out", str(report),
        ]) == 0
        assert "Mixture" in report.read_text()

    def test_train_unknown_stage_exits_2(self, tmp_path):
        """Config validation failures surface as exit code 2."""
        path = tmp_path / "bad_stage.yaml"
        path.write_text(yaml.safe_dump({"stage": "warmup"}))
        assert main(["train", "--config", str(path)]) == 2

    def test_train_missing_prerequisite_exits_2(self, cli_corpus, tmp_path):
        """Finetuning without an init checkpoint is a config error."""
        cfg = {
            "stage": "sparse_finetune", "loss": "sa_sdr",
            "data": str(cli_corpus), "max_epochs": 1, "out_dir": str(tmp_path),
        }
        path = tmp_path / "sparse.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["train", "--config", str(path)]) == 2

    def test_diverged_training_exits_3(self, tmp_path):
        """Numerical divergence surfaces as exit code 3."""
        cfg = {
            "stage": "overlap_pretrain", "max_epochs": 1, "batch_size": 2,
            "dynamic_steps_per_epoch": 2, "dynamic_duration_s": 3.0,
            "n_speakers": 4, "lr_init": 1e25, "seed": 9,
            "out_dir": str(tmp_path), "tag": "cli_explode",
            "model": {"preset": "toy", "backbone": "dprnn",
                      "reference_source": "visual", "visual_dim_in": 20},
        }
        path = tmp_path / "explode.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["train", "--config", str(path)]) == 3

    def test_experiment_command_prints_provenance(self, cli_corpus, tmp_path, capsys):
        """The experiment command runs the recipe and names the record file."""
        recipe = {
            "name": "cli_micro", "corpus": str(cli_corpus), "backbone": "dprnn",
            "reference_source": "visual", "loss": "sa_sdr", "seed": 4,
            "eval_split": "validation",
            "stage2": {"epochs": 1, "batch_size": 2, "steps_per_epoch": 2,
                       "duration_s": 3.0, "n_speakers": 4, "lr": 1e-3},
            "stage3": {"epochs": 1, "batch_size": 2, "lr": 1e-3},
        }
        path = tmp_path / "recipe.yaml"
        path.write_text(yaml.safe_dump(recipe))
        assert main(["experiment", "--recipe", str(path), "--out", str(tmp_path / "exp")]) == 0
        out = capsys.readouterr().out
        assert "provenance:" in out
        assert (tmp_path / "exp" / "provenance.json").exists()

    def test_check_gradients_command(self, capsys):
        """The gradient suite runs clean from the command line."""
        assert main(["check-gradients", "--seed", "1"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_check_metrics_command(self, capsys):
        """The metric suite runs clean from the command line."""
        assert main(["check-metrics", "--seed", "1"]) == 0
        assert "PASS" in capsys.readouterr().out
