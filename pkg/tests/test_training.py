import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swa_codec import tensor as tc
from swa_codec.model import ModelConfig, deserialize_model, init_params, serialize_model
from swa_codec.swa import WindowSpec
from swa_codec.tensor import Tensor
from swa_codec.training import (
    SynthConfig,
    TrainingDivergedError,
    calibrate_rate_gains,
    context_free_baseline,
    cosine_lr,
    generate_clip,
    grad_check,
    heldout_clips,
    heldout_mse,
    heldout_rate,
    loss,
    quantize_ste,
    train,
)

TINY = ModelConfig(channels=8, heads=2, head_dim=4, layers=2, window=WindowSpec(1, 1, 1), num_rate_points=2)
TINY_SYNTH = SynthConfig(seed=3, channels=8, height=3, width=3, frames=2)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_clip(TINY_SYNTH, 5)
        b = generate_clip(TINY_SYNTH, 5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, generate_clip(TINY_SYNTH, 6))

    def test_noise_free_clip_translates(self):
        synth = SynthConfig(noise=0.0, frames=3, height=5, width=6, channels=4, shift=(1, 2))
        clip = generate_clip(synth, 0)
        np.testing.assert_allclose(clip[1], np.roll(clip[0], (1, 2), axis=(0, 1)), atol=1e-12)

    def test_channel_amplitudes(self):
        synth = SynthConfig(channels=4, height=32, width=32, frames=1, amplitude=(1.0, 4.0))
        stds = np.concatenate([generate_clip(synth, i) for i in range(8)]).std(axis=(0, 1, 2))
        assert stds[0] < stds[-1]

    def test_heldout_disjoint_from_training_indices(self):
        train_clip = generate_clip(TINY_SYNTH, 0)
        assert not np.array_equal(heldout_clips(TINY_SYNTH, 1)[0], train_clip)

    @pytest.mark.parametrize("kw", [{"rho": 1.0}, {"noise": -1.0}, {"frames": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestObjective:
    def test_ste_rounds_forward_passes_gradient(self):
        y = Tensor(np.array([0.4, 1.6, -2.5]), requires_grad=True)
        q = quantize_ste(y)
        np.testing.assert_array_equal(q.data, [0.0, 2.0, -2.0])
        (g,) = tc.backward(tc.tensor_sum(tc.mul(q, 3.0)), [y])
        np.testing.assert_array_equal(g, 3.0)

    def test_lambda_zero_is_pure_rate(self):
        params = init_params(TINY, 0)
        clip = generate_clip(TINY_SYNTH, 0)
        parts = loss(clip, params, lam=0.0)
        assert math.isclose(parts.total.item(), parts.rate_bits_per_latent)
        with pytest.raises(ValueError):
            loss(clip, params, lam=-1.0)

    def test_cosine_schedule(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
        assert math.isclose(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5)
        lrs = [cosine_lr(s, 100, 1e-3, 1e-5) for s in range(101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestTraining:
    def test_short_run_logs_and_reduces_loss(self):
        res = train(TINY_SYNTH, TINY, 30, seed=0, batch=1)
        assert [r["step"] for r in res.log] == list(range(30))
        first = res.log[0]["rate_bits_per_latent"]
        last = np.mean([r["rate_bits_per_latent"] for r in res.log[-5:]])
        assert last < first
        assert res.csv().splitlines()[0] == "step,lr,rate_bits_per_latent,mse"

    def test_seeded_runs_are_identical(self):
        a = train(TINY_SYNTH, TINY, 3, seed=1, batch=1)
        b = train(TINY_SYNTH, TINY, 3, seed=1, batch=1)
        assert serialize_model(a.params) == serialize_model(b.params)

    def test_frozen_rate_gains_stay_put(self):
        params = init_params(TINY, 0)
        before = params["rate.g_mu"].data.copy()
        res = train(TINY_SYNTH, TINY, 3, params=params, freeze_rate_gains=True, batch=1)
        np.testing.assert_array_equal(res.params["rate.g_mu"].data, before)

    def test_resume_from_loaded_model(self):
        params = deserialize_model(serialize_model(init_params(TINY, 0)))
        train(TINY_SYNTH, TINY, 2, params=params, batch=1)

    def test_divergence_is_reported(self):
        params = init_params(TINY, 0)
        params["out.mu.b"].data[:] = np.nan
        with pytest.raises(TrainingDivergedError, match="step 0"):
            train(TINY_SYNTH, TINY, 2, params=params, batch=1)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            train(SynthConfig(channels=4), TINY, 1)

    def test_calibration_matches_channel_scale(self):
        params = init_params(TINY, 0)
        clips = [generate_clip(TINY_SYNTH, i) for i in range(4)]
        calibrate_rate_gains(params, clips)
        g_mu = params["rate.g_mu"].data
        np.testing.assert_allclose(g_mu[0] * params["rate.g_in"].data[0], 1.0)
        assert np.all(g_mu >= 1.0)


class TestEvaluation:
    def test_baseline_sigma_tracks_data_scale(self):
        synth = SynthConfig(channels=4, height=6, width=6, frames=1, amplitude=(3.0, 3.0))
        clips = [generate_clip(synth, i) for i in range(4)]
        b = context_free_baseline(clips, clips)
        assert 2.0 < b.sigma < 4.0
        assert 2.0 < b.bits_per_latent < 5.0

    def test_heldout_rate_and_mse(self):
        params = init_params(TINY, 0)
        clips = heldout_clips(TINY_SYNTH, 1)
        assert heldout_rate(params, clips, 0) > 0
        plain, refined = heldout_mse(params, clips)
        assert 0 < plain <= 0.25
        assert refined > 0

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 1000))
    def test_k_beyond_reach_is_identical(self, seed):
        synth = SynthConfig(seed=seed, channels=8, height=3, width=3, frames=5)
        params = init_params(TINY, seed, std=0.3)
        clips = heldout_clips(synth, 1)
        reach = TINY.receptive_frames
        assert heldout_rate(params, clips, reach) == heldout_rate(params, clips, reach + 2)


class TestGradCheck:
    def test_passes_at_default_tolerance(self):
        report = grad_check()
        assert report.passed, "\n".join(report.lines())

    def test_frozen_gains_get_zero_gradient(self):
        report = grad_check(freeze_rate_gains=True)
        for group, norm in report.grad_norms.items():
            if group.startswith("rate."):
                assert norm == 0.0
        assert report.passed
