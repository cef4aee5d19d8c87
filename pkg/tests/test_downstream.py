"""Downstream task tests: metric functions against closed forms, task mask
structure, freeze semantics (bit-identical encoder), head gradients against
central differences, and evaluation plumbing."""

import math

import numpy as np
import pytest

from misac import tensor as tt
from misac.downstream import (
    DownstreamError,
    FinetuneModel,
    FinetuneSettings,
    _prep_modalities,
    estimation_mask,
    evaluate,
    finetune_step,
    nmse_db,
    prediction_mask,
    run_finetune,
    sample_loss,
    task_mask,
    topk_accuracy,
    wrapped_abs_error,
)
from misac.encoder import EncoderConfig
from misac.pretrain import PretrainModel
from misac.synth import SynthConfig, synth_dataset
from misac.tokenizer import Modality, ModalitySpec, TokenizerConfig


# ---------------------------------------------------------------------------
# metrics


class TestMetrics:
    def test_nmse_half_amplitude_is_minus_six_db(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(5, 7))
        assert nmse_db(0.5 * t, t) == pytest.approx(10 * math.log10(0.25), abs=1e-9)
        assert nmse_db(0.5 * t, t) == pytest.approx(-6.0205999132, abs=1e-6)

    def test_nmse_scale_invariance(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(4, 4))
        p = t + rng.normal(size=(4, 4)) * 0.1
        assert nmse_db(3.7 * p, 3.7 * t) == pytest.approx(nmse_db(p, t), abs=1e-12)

    def test_nmse_floor_and_complex_support(self):
        t = np.array([1.0 + 1j, 2.0 - 1j])
        assert nmse_db(t.copy(), t) == -120.0
        tiny = t + 1e-12
        assert nmse_db(tiny, t) >= -120.0

    def test_nmse_zero_target_rejected(self):
        with pytest.raises(DownstreamError):
            nmse_db(np.ones(3), np.zeros(3))

    def test_topk_accuracy_hand_cases(self):
        logits = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
        assert topk_accuracy(logits, np.array([2, 0]), 1) == 1.0
        assert topk_accuracy(logits, np.array([0, 2]), 1) == 0.0
        assert topk_accuracy(logits, np.array([0, 2]), 3) == 1.0
        assert topk_accuracy(logits, np.array([1, 1]), 2) == 1.0

    def test_topk_tie_prefers_lower_index(self):
        logits = np.array([[5.0, 5.0, 0.0]])
        assert topk_accuracy(logits, np.array([0]), 1) == 1.0
        assert topk_accuracy(logits, np.array([1]), 1) == 0.0

    def test_wrapped_error(self):
        assert wrapped_abs_error(0.5, 0.2) == pytest.approx(0.3)
        assert wrapped_abs_error(0.2, 0.5) == pytest.approx(0.3)
        assert wrapped_abs_error(3.1, -3.1) == pytest.approx(2 * math.pi - 6.2, abs=1e-12)
        assert wrapped_abs_error(1.0, 1.0) == 0.0


# ---------------------------------------------------------------------------
# task masks


class TestTaskMasks:
    def test_prediction_hides_last_quarter(self):
        spec = prediction_mask((8, 16))
        masked_cols = np.nonzero(spec.omega.all(axis=0))[0]
        assert np.array_equal(masked_cols, [12, 13, 14, 15])
        assert not spec.omega[:, :12].any()
        assert spec.masked.size == 8 * 4

    def test_prediction_masks_at_least_one_column(self):
        spec = prediction_mask((2, 2))
        assert np.array_equal(np.nonzero(spec.omega.all(axis=0))[0], [1])

    def test_estimation_keeps_pilot_comb(self):
        spec = estimation_mask((8, 16), spacing=4)
        visible_cols = np.nonzero(~spec.omega.any(axis=0))[0]
        assert np.array_equal(visible_cols, [0, 4, 8, 12])
        assert spec.visible.size == 8 * 4
        assert spec.masked.size == 8 * 12

    def test_estimation_spacing_bounds(self):
        with pytest.raises(DownstreamError):
            estimation_mask((8, 16), spacing=1)
        with pytest.raises(DownstreamError):
            estimation_mask((8, 16), spacing=16)

    def test_task_mask_dispatch(self):
        assert task_mask("channel_prediction", (8, 16)) is not None
        assert task_mask("channel_estimation", (8, 16)) is not None
        assert task_mask("beam_selection", (8, 16)) is None


# ---------------------------------------------------------------------------
# model wiring on synthetic data


@pytest.fixture(scope="module")
def samples():
    data, _ = synth_dataset(SynthConfig(), 4, seed=321)
    return data


def small_pretrained(seed: int = 0) -> PretrainModel:
    tok = TokenizerConfig(
        d=16,
        csi=ModalitySpec(16, 32, (2, 2)),
        map=ModalitySpec(64, 64, (8, 8)),
        radar=ModalitySpec(64, 64, (8, 8)),
    )
    enc = EncoderConfig(d=16, n_layers=1, n_heads=2, n_experts=4, top_k=2)
    return PretrainModel(enc, tok, np.random.default_rng(seed), decoder_blocks=1)


def make_model(task: str, seed: int = 0) -> FinetuneModel:
    return FinetuneModel(small_pretrained(seed), task, np.random.default_rng(seed + 1))


class TestModelWiring:
    def test_unknown_task_rejected(self):
        with pytest.raises(DownstreamError):
            FinetuneModel(small_pretrained(), "beam_steering", np.random.default_rng(0))

    def test_head_shapes_per_task(self):
        assert make_model("channel_prediction").head is None
        assert make_model("channel_estimation").head is None
        assert make_model("beam_selection").head.fc2.w.shape == (16, 16)
        assert make_model("localization").head.fc2.w.shape == (16, 1)
        assert make_model("aoa_estimation").head.fc2.w.shape == (16, 2)

    def test_named_params_include_head(self):
        names = set(make_model("beam_selection").named_params())
        assert "head.fc1.w" in names and "head.fc2.b" in names
        assert "block0.shared.gate.w" in names

    def test_trainable_params_under_freeze(self):
        model = make_model("beam_selection")
        frozen = model.trainable_params(freeze_encoder=True)
        assert set(frozen) == {"head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"}
        recon = make_model("channel_prediction")
        keep = recon.trainable_params(freeze_encoder=True)
        assert keep and all(k.startswith("decoder.csi.") for k in keep)
        assert len(recon.trainable_params(False)) == len(recon.named_params())

    def test_prep_respects_drops(self, samples):
        pre = small_pretrained()
        full = _prep_modalities(pre, samples[0], (), None, None)
        assert set(full) == {Modality.CSI, Modality.MAP, Modality.RADAR}
        csi_only = _prep_modalities(pre, samples[0], ("map", "radar"), None, None)
        assert set(csi_only) == {Modality.CSI}
        with pytest.raises(DownstreamError):
            _prep_modalities(pre, samples[0], ("csi", "map", "radar"), None, None)

    def test_snr_injection_requires_rng(self, samples):
        model = make_model("beam_selection")
        cfg = FinetuneSettings(snr_range=(10.0, 25.0))
        with pytest.raises(DownstreamError):
            sample_loss(model, samples[0], cfg, rng=None)


class TestLossesAndTraining:
    def test_every_task_produces_finite_loss(self, samples):
        cfg = FinetuneSettings()
        for task in (
            "channel_prediction",
            "channel_estimation",
            "beam_selection",
            "localization",
            "aoa_estimation",
        ):
            loss, aux = sample_loss(make_model(task), samples[0], cfg)
            assert np.isfinite(loss.item()) and loss.item() >= 0.0
            assert aux

    def test_recon_aux_is_denormalized(self, samples):
        # target in aux must match the raw channel, not the unit-power version
        model = make_model("channel_prediction")
        _, aux = sample_loss(model, samples[0], FinetuneSettings())
        h = samples[0].csi.h.data
        want = np.stack([h.real, h.imag], axis=-1)
        assert np.allclose(aux["target"], want)

    def test_batch_loss_is_mean_of_sample_losses(self, samples):
        model = make_model("beam_selection")
        cfg = FinetuneSettings()
        singles = [sample_loss(model, s, cfg)[0].item() for s in samples[:2]]
        from misac.pretrain import Adam

        opt = Adam(model.trainable_params(False))
        got = finetune_step(model, samples[:2], opt, cfg, np.random.default_rng(0), lr=0.0)
        assert got == pytest.approx(np.mean(singles), abs=1e-12)

    def test_freeze_keeps_encoder_bit_identical(self, samples):
        model = make_model("beam_selection")
        cfg = FinetuneSettings(steps=2, batch_size=2, freeze_encoder=True, lr_max=1e-3)
        enc_before = {k: p.data.copy() for k, p in model.pretrained.encoder.named_params().items()}
        head_before = {k: p.data.copy() for k, p in model.head.named("head")}
        run_finetune(model, samples, cfg, seed=0)
        enc_after = model.pretrained.encoder.named_params()
        assert all(np.array_equal(enc_before[k], enc_after[k].data) for k in enc_before)
        assert any(
            not np.array_equal(head_before[k], dict(model.head.named("head"))[k].data)
            for k in head_before
        )

    def test_freeze_on_recon_trains_decoder_only(self, samples):
        model = make_model("channel_estimation")
        cfg = FinetuneSettings(steps=1, batch_size=2, freeze_encoder=True)
        before = {k: p.data.copy() for k, p in model.named_params().items()}
        run_finetune(model, samples, cfg, seed=0)
        after = model.named_params()
        for k in before:
            same = np.array_equal(before[k], after[k].data)
            if k.startswith("decoder.csi."):
                continue  # may move
            assert same, f"{k} changed under freeze"
        moved = [k for k in before if not np.array_equal(before[k], after[k].data)]
        assert moved and all(k.startswith("decoder.csi.") for k in moved)

    def test_unfrozen_training_moves_encoder(self, samples):
        model = make_model("localization")
        cfg = FinetuneSettings(steps=1, batch_size=2, freeze_encoder=False)
        before = {k: p.data.copy() for k, p in model.pretrained.encoder.named_params().items()}
        run_finetune(model, samples, cfg, seed=0)
        after = model.pretrained.encoder.named_params()
        assert any(not np.array_equal(before[k], after[k].data) for k in before)

    def test_head_gradients_match_central_differences(self, samples):
        model = make_model("beam_selection")
        cfg = FinetuneSettings()
        sample = samples[0]

        def f():
            loss, _ = sample_loss(model, sample, cfg)
            return loss

        head_params = [p for _, p in model.head.named("head")]
        err = tt.grad_check(f, head_params, h=1e-5, coords_per_param=3,
                            rng=np.random.default_rng(0))
        assert err < 1e-7, f"max rel grad error {err:.3e}"

    def test_training_reduces_loss(self, samples):
        model = make_model("beam_selection")
        cfg = FinetuneSettings(steps=10, batch_size=2, freeze_encoder=True, lr_max=3e-3)
        history = run_finetune(model, samples[:2], cfg, seed=0)
        assert history[-1]["loss"] < history[0]["loss"]

    def test_run_is_deterministic(self, samples):
        cfg = FinetuneSettings(steps=2, batch_size=2)
        h1 = run_finetune(make_model("aoa_estimation", 5), samples, cfg, seed=1)
        h2 = run_finetune(make_model("aoa_estimation", 5), samples, cfg, seed=1)
        assert h1 == h2


class TestEvaluate:
    def test_beam_metrics(self, samples):
        out = evaluate(make_model("beam_selection"), samples, FinetuneSettings())
        assert set(out) == {"loss", "top1", "top3"}
        assert 0.0 <= out["top1"] <= out["top3"] <= 1.0

    def test_localization_metrics(self, samples):
        out = evaluate(make_model("localization"), samples, FinetuneSettings())
        assert set(out) == {"loss", "mae_m", "rmse_m"}
        assert out["rmse_m"] >= out["mae_m"] >= 0.0

    def test_aoa_metrics(self, samples):
        out = evaluate(make_model("aoa_estimation"), samples, FinetuneSettings())
        assert out["mae_deg"] == pytest.approx(math.degrees(out["mae_rad"]))
        assert 0.0 <= out["mae_rad"] <= math.pi

    def test_recon_metrics(self, samples):
        for task in ("channel_prediction", "channel_estimation"):
            out = evaluate(make_model(task), samples, FinetuneSettings())
            assert set(out) == {"loss", "nmse_db"}
            assert np.isfinite(out["nmse_db"]) and out["nmse_db"] >= -120.0

    def test_eval_is_deterministic_under_snr_injection(self, samples):
        model = make_model("aoa_estimation")
        cfg = FinetuneSettings(snr_range=(10.0, 25.0))
        a = evaluate(model, samples, cfg, seed=7)
        b = evaluate(model, samples, cfg, seed=7)
        assert a == b

    def test_empty_dataset_rejected(self, samples):
        with pytest.raises(DownstreamError):
            evaluate(make_model("beam_selection"), [], FinetuneSettings())
