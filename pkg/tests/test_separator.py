"""Encoder framing, reference alignment, both backbones, and the full extractor."""

import numpy as np
import pytest
import torch

from activeextract.asd import AsdNet, save_asd_checkpoint
from activeextract.audio import SAMPLE_RATE, Waveform
from activeextract.errors import ShapeMismatch, TooShort
from activeextract.scenario import ActivityMask
from activeextract.separator import (
    ActiveExtract,
    AudioDecoder,
    AudioEncoder,
    DprnnBackbone,
    EncoderConfig,
    ExtractorConfig,
    XModalBackbone,
    active_extract_forward,
    chunk_sequence,
    frame_count,
    gated_baseline_forward,
    load_checkpoint,
    overlap_add_chunks,
    paper_preset,
    save_checkpoint,
    toy_preset,
    upsample_reference,
)
from activeextract.synth import render_visual, speaker_pool, synth_speaker_utterance


def _toy_model(backbone="dprnn", mode="both", reference_source="asd"):
    torch.manual_seed(0)
    return ActiveExtract(
        toy_preset(mode=mode, backbone=backbone, reference_source=reference_source)
    )


def _clip(seed, duration_s=1.0):
    pool = speaker_pool(2, seed=70)
    spk = pool[sorted(pool)[0]]
    wav, env = synth_speaker_utterance(spk, duration_s, seed=seed)
    mask = ActivityMask(np.ones(len(wav.samples), dtype=np.uint8))
    return wav, render_visual(env, mask, seed=seed)


class TestFrameCount:
    def test_published_stride_framing(self):
        """A 20-sample stride turns 1 s into 799 frames and 4 s into 3199."""
        cfg = EncoderConfig(kernel_L=40, channels_N=256)
        assert frame_count(16000, cfg) == 799
        assert frame_count(64000, cfg) == 3199

    def test_toy_stride_framing(self):
        """The 64-sample toy kernel frames 1 s into 499 windows."""
        assert frame_count(16000, EncoderConfig(kernel_L=64, channels_N=64)) == 499

    def test_partial_last_window_counts(self):
        """A trailing partial hop still yields one more (right-padded) frame."""
        cfg = EncoderConfig(kernel_L=64, channels_N=64)
        assert frame_count(64, cfg) == 1
        assert frame_count(65, cfg) == 2
        assert frame_count(96, cfg) == 2
        assert frame_count(97, cfg) == 3

    def test_too_short_raises(self):
        """Clips shorter than one kernel cannot be framed."""
        with pytest.raises(TooShort):
            frame_count(63, EncoderConfig(kernel_L=64, channels_N=64))

    def test_odd_kernel_rejected(self):
        """The 50% frame overlap requires an even kernel."""
        with pytest.raises(ValueError):
            EncoderConfig(kernel_L=41, channels_N=64)


class TestEncoderDecoder:
    def test_encoder_shape_and_nonnegativity(self):
        """The encoder emits one ReLU frame row per hop."""
        torch.manual_seed(10)
        enc = AudioEncoder(EncoderConfig(kernel_L=64, channels_N=32))
        with torch.no_grad():
            h = enc(torch.randn(2, 16000))
        assert h.shape == (2, 499, 32)
        assert float(h.min()) >= 0.0

    def test_decoder_output_length(self):
        """The decoder trims or pads to exactly the requested length."""
        torch.manual_seed(11)
        dec = AudioDecoder(EncoderConfig(kernel_L=64, channels_N=32))
        feat = torch.randn(2, 499, 32)
        assert dec(feat, 16000).shape == (2, 16000)
        assert dec(feat, 15999).shape == (2, 15999)

    def test_decoder_linear(self):
        """Resynthesis is linear in its feature input."""
        torch.manual_seed(12)
        dec = AudioDecoder(EncoderConfig(kernel_L=64, channels_N=32)).double()
        a = torch.randn(1, 100, 32, dtype=torch.float64)
        b = torch.randn(1, 100, 32, dtype=torch.float64)
        with torch.no_grad():
            lhs = dec(a + 2.0 * b, 3200)
            rhs = dec(a, 3200) + 2.0 * dec(b, 3200)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-12)

    def test_zero_input_zero_output(self):
        """Silence in gives digital silence out of the whole model."""
        model = _toy_model().eval()
        wav = torch.zeros(1, 16000)
        vis = torch.zeros(1, 25, 20)
        feats = torch.zeros(1, 25, 52)
        with torch.no_grad():
            est, _ = model(wav, vis, feats)
        assert est.shape == (1, 16000)
        assert float(est.abs().max()) == 0.0


class TestUpsampleReference:
    def test_ceil_repeat_mapping(self):
        """Frame k of the output is input frame k // ceil(target/n)."""
        rng = np.random.default_rng(80)
        v = rng.normal(size=(25, 7))
        up = upsample_reference(v, 799)
        assert up.shape == (799, 7)
        r = -(-799 // 25)
        for k in (0, 31, 32, 400, 798):
            np.testing.assert_array_equal(up[k], v[k // r])

    def test_exact_multiple(self):
        """An integer rate repeats every frame equally."""
        v = np.arange(12.0).reshape(3, 4)
        up = upsample_reference(v, 6)
        np.testing.assert_array_equal(up, np.repeat(v, 2, axis=0))

    def test_batched_tensor_form(self):
        """Batched tensors upsample along the frame axis."""
        v = torch.arange(24.0).reshape(2, 3, 4)
        up = upsample_reference(v, 7)
        assert up.shape == (2, 7, 4)
        assert torch.equal(up, v[:, [0, 0, 0, 1, 1, 1, 2]])

    def test_downsampling_rejected(self):
        """Targets below the input frame count are refused."""
        with pytest.raises(ShapeMismatch):
            upsample_reference(np.zeros((25, 4)), 24)


class TestChunking:
    def test_round_trip_exact(self):
        """Chunk then overlap-add reproduces the sequence exactly."""
        torch.manual_seed(13)
        for n_frames in (37, 40, 100, 101):
            x = torch.randn(2, n_frames, 5, dtype=torch.float64)
            chunks, _ = chunk_sequence(x, 40, 20)
            back = overlap_add_chunks(chunks, 20, n_frames)
            np.testing.assert_allclose(back.numpy(), x.numpy(), atol=1e-12)

    def test_short_sequence_single_chunk(self):
        """Sequences shorter than one chunk pad into a single window."""
        x = torch.ones(1, 10, 3)
        chunks, padded = chunk_sequence(x, 40, 20)
        assert chunks.shape == (1, 1, 40, 3)
        assert padded == 40
        assert float(chunks[0, 0, 10:].abs().sum()) == 0.0


class TestBackbones:
    def test_dprnn_mask_range_and_shape(self):
        """The recurrent backbone emits a per-frame sigmoid mask."""
        torch.manual_seed(14)
        cfg = toy_preset(backbone="dprnn")
        net = DprnnBackbone(cfg.dprnn, cfg.encoder.channels_N, 384)
        with torch.no_grad():
            mask = net(torch.randn(2, 120, 64), torch.randn(2, 120, 384))
        assert mask.shape == (2, 120, 64)
        assert float(mask.min()) >= 0.0
        assert float(mask.max()) <= 1.0

    def test_dprnn_frame_mismatch_raises(self):
        """The fused reference must already be at the encoder frame rate."""
        cfg = toy_preset(backbone="dprnn")
        net = DprnnBackbone(cfg.dprnn, cfg.encoder.channels_N, 384)
        with pytest.raises(ShapeMismatch):
            net(torch.randn(1, 120, 64), torch.randn(1, 119, 384))

    def test_xmodal_mask_and_attention_shape(self):
        """The transformer backbone returns chunked attention over the reference."""
        torch.manual_seed(15)
        cfg = toy_preset(backbone="xmodal")
        net = XModalBackbone(cfg.xmodal, cfg.encoder.channels_N, 384)
        with torch.no_grad():
            mask, attention = net(
                torch.randn(1, 120, 64), torch.randn(1, 25, 384), return_attention=True
            )
        assert mask.shape == (1, 120, 64)
        assert float(mask.min()) >= 0.0 and float(mask.max()) <= 1.0
        s = attention.shape[1]
        assert attention.shape == (1, s, cfg.xmodal.chunk_C, 25)
        np.testing.assert_allclose(attention.sum(-1).numpy(), 1.0, atol=1e-5)

    def test_xmodal_batch_mismatch_raises(self):
        """Audio and reference batches must agree."""
        cfg = toy_preset(backbone="xmodal")
        net = XModalBackbone(cfg.xmodal, cfg.encoder.channels_N, 384)
        with pytest.raises(ShapeMismatch):
            net(torch.randn(2, 120, 64), torch.randn(1, 25, 384))


class TestActiveExtract:
    def test_forward_shapes_asd_reference(self):
        """The ASD-referenced model returns the estimate and the feature taps."""
        model = _toy_model().eval()
        with torch.no_grad():
            est, feats = model(torch.randn(2, 16000), torch.randn(2, 25, 20), torch.randn(2, 25, 52))
        assert est.shape == (2, 16000)
        assert feats is not None
        assert feats.P_v.shape == (2, 25, 128)

    def test_visual_reference_skips_asd(self):
        """The lipreading-shaped baseline computes no ASD features."""
        model = _toy_model(reference_source="visual").eval()
        assert model.asd_net is None
        with torch.no_grad():
            est, feats = model(torch.randn(1, 16000), torch.randn(1, 25, 20))
        assert est.shape == (1, 16000)
        assert feats is None

    def test_missing_mfcc_rejected(self):
        """ASD-referenced extraction requires the MFCC stream."""
        model = _toy_model()
        with pytest.raises(ShapeMismatch):
            model(torch.randn(1, 16000), torch.randn(1, 25, 20))

    def test_eval_deterministic(self):
        """Identical inputs give bit-identical estimates in eval mode."""
        model = _toy_model().eval()
        wav, visual = _clip(seed=81)
        a, _ = active_extract_forward(model, wav, visual)
        b, _ = active_extract_forward(model, wav, visual)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_gradient_reaches_asd(self):
        """The extraction loss backpropagates into the detector weights."""
        model = _toy_model()
        est, _ = model(torch.randn(1, 16000), torch.randn(1, 25, 20), torch.randn(1, 25, 52))
        est.pow(2).sum().backward()
        grads = [p.grad for p in model.asd_net.parameters() if p.grad is not None]
        assert grads
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_single_clip_wrapper(self):
        """The Waveform wrapper preserves length, dtype, and unbatched features."""
        model = _toy_model().eval()
        wav, visual = _clip(seed=82, duration_s=1.3)
        est, feats = active_extract_forward(model, wav, visual)
        assert isinstance(est, Waveform)
        assert len(est.samples) == len(wav.samples)
        assert est.samples.dtype == np.float64
        assert feats.P_av.shape == (len(visual.frames), 256)


class TestGatedBaseline:
    def test_gate_off_is_digital_silence(self):
        """A forced-off gate returns exact zeros of the clip length."""
        model = _toy_model(reference_source="visual").eval()
        torch.manual_seed(16)
        asd = AsdNet(model.config.asd).eval()
        wav, visual = _clip(seed=83)
        out = gated_baseline_forward(asd, model, wav, visual, force_gate=False)
        assert np.array_equal(out.samples, np.zeros(len(wav.samples)))

    def test_gate_on_matches_extractor(self):
        """A forced-on gate passes the extractor output through untouched."""
        model = _toy_model(reference_source="visual").eval()
        torch.manual_seed(17)
        asd = AsdNet(model.config.asd).eval()
        wav, visual = _clip(seed=84)
        gated = gated_baseline_forward(asd, model, wav, visual, force_gate=True)
        direct, _ = active_extract_forward(model, wav, visual)
        np.testing.assert_array_equal(gated.samples, direct.samples)


class TestPresets:
    def test_paper_dprnn_constants(self):
        """The published recurrent configuration is reproduced exactly."""
        cfg = paper_preset(backbone="dprnn")
        assert cfg.encoder.kernel_L == 40
        assert cfg.encoder.stride == 20
        assert cfg.encoder.channels_N == 256
        assert cfg.dprnn.feature_B == 64
        assert cfg.dprnn.chunk_K == 100
        assert cfg.dprnn.repeats_R == 6
        assert cfg.dprnn.hidden == 128

    def test_paper_xmodal_constants(self):
        """The published transformer configuration is reproduced exactly."""
        cfg = paper_preset(backbone="xmodal")
        assert cfg.encoder.kernel_L == 16
        assert cfg.encoder.channels_N == 256
        assert cfg.xmodal.chunk_C == 160
        assert cfg.xmodal.heads == 8
        assert cfg.xmodal.n_intra == 4
        assert cfg.xmodal.n_inter == 4
        assert cfg.xmodal.width_N == 256

    def test_asd_widths_fixed_across_presets(self):
        """Both presets keep the 128/256 detector feature widths."""
        assert paper_preset().asd.d_v == 128
        assert paper_preset().asd.d_av == 256
        assert toy_preset().asd.d_v == 128
        assert toy_preset().asd.d_av == 256

    def test_reference_widths(self):
        """Reference width follows the mode, or the frontend for visual source."""
        assert toy_preset(mode="both").d_ref == 384
        assert toy_preset(mode="pv_only").d_ref == 128
        assert toy_preset(mode="pav_only").d_ref == 256
        assert toy_preset(reference_source="visual").d_ref == 128

    def test_toy_scaling(self):
        """The toy preset divides separator widths by the scale factor."""
        cfg = toy_preset(backbone="dprnn", scale_factor=4)
        assert cfg.encoder.kernel_L == 64
        assert cfg.encoder.channels_N == 64
        assert cfg.dprnn.feature_B == 16
        assert cfg.dprnn.chunk_K == 25
        assert cfg.dprnn.repeats_R == 1
        assert cfg.dprnn.hidden == 32

    def test_toy_parameter_count_pinned(self):
        """The default toy extractor's size is stable against architecture drift."""
        model = _toy_model()
        assert sum(p.numel() for p in model.parameters()) == 963634

    def test_config_round_trips_through_dict(self):
        """Configs survive the dict form used inside checkpoints."""
        cfg = toy_preset(mode="pav_only", backbone="xmodal")
        back = ExtractorConfig.from_dict(cfg.to_dict())
        assert back == cfg


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        """Reloaded extractors reproduce the saved model's output exactly."""
        model = _toy_model().eval()
        path = tmp_path / "extractor.pt"
        save_checkpoint(path, model, stage_tag="overlap_pretrain", seed=5, preset="toy")
        loaded, meta = load_checkpoint(path)
        assert meta["stage_tag"] == "overlap_pretrain"
        assert meta["seed"] == 5
        assert meta["preset"] == "toy"
        wav, visual = _clip(seed=85)
        a, _ = active_extract_forward(model, wav, visual)
        b, _ = active_extract_forward(loaded, wav, visual)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_model_card_written(self, tmp_path):
        """Every checkpoint carries a human-readable card beside it."""
        model = _toy_model()
        path = tmp_path / "extractor.pt"
        save_checkpoint(path, model, stage_tag="sparse_finetune", seed=9, preset="toy")
        card = (tmp_path / "extractor.pt.card.txt").read_text()
        assert "stage: sparse_finetune" in card
        assert "backbone: dprnn" in card
        assert "parameters: 963634" in card

    def test_wrong_kind_rejected(self, tmp_path):
        """Detector checkpoints do not load as extractors."""
        torch.manual_seed(18)
        asd = AsdNet(toy_preset().asd)
        path = tmp_path / "asd.pt"
        save_asd_checkpoint(path, asd, seed=1)
        with pytest.raises(ValueError):
            load_checkpoint(path)
