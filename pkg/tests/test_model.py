import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swa_codec.model import (
    DecodeSession,
    ModelConfig,
    ModelFormatError,
    SequencingError,
    apply_lrp,
    build_input_sequence,
    deserialize_model,
    forward_teacher_forced,
    init_params,
    load_model,
    model_hash,
    param_shapes,
    predict_frame,
    save_model,
    serialize_model,
    slot_sources,
)
from swa_codec.swa import WindowSpec
from swa_codec.tensor import ShapeError

from conftest import decode_max_diff, probe_violations, random_params

SMALL = ModelConfig(channels=8, heads=2, head_dim=4, layers=2, window=WindowSpec(1, 1, 1), num_rate_points=2)


def volume(rng, L, H, W, C, scale=3.0):
    return np.round(rng.normal(size=(L, H, W, C)) * scale)


class TestConfig:
    def test_head_product(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=8, heads=3, head_dim=2)

    def test_prepend_needs_spatial_window(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=8, heads=2, head_dim=4, window=WindowSpec(1, 0, 1))

    def test_receptive_frames(self):
        assert ModelConfig().receptive_frames == 4 * 2
        assert SMALL.receptive_frames == 2

    def test_param_order_is_stable(self):
        names = [n for n, _ in param_shapes(SMALL)]
        assert names[:4] == ["rate.g_in", "rate.g_mu", "rate.g_sigma", "rate.g_lrp"]
        assert names[-1] == "out.lrp.b"
        assert len(names) == len(set(names))


class TestSerialization:
    def test_round_trip_preserves_hash(self, tmp_path):
        params = random_params(SMALL, seed=4)
        path = tmp_path / "m.swam"
        save_model(path, params)
        back = load_model(path)
        assert back.config == SMALL
        assert model_hash(back) == model_hash(params)
        for n in params.names():
            np.testing.assert_array_equal(back[n].data, params[n].data)

    def test_hash_sensitive_to_weights(self):
        a = init_params(SMALL, 0)
        b = init_params(SMALL, 0)
        b["out.mu.b"].data = b["out.mu.b"].data + 1e-12
        assert model_hash(a) != model_hash(b)

    @pytest.mark.parametrize("cut", [3, 20, 100, -1])
    def test_truncated_blob(self, cut):
        blob = serialize_model(init_params(SMALL, 0))
        with pytest.raises(ModelFormatError):
            deserialize_model(blob[:cut])

    def test_bad_magic_and_trailing(self):
        blob = serialize_model(init_params(SMALL, 0))
        with pytest.raises(ModelFormatError):
            deserialize_model(b"XXXX" + blob[4:])
        with pytest.raises(ModelFormatError):
            deserialize_model(blob + b"\0")


class TestSequence:
    def test_input_sequence_prepends_row_above(self):
        frame = np.arange(2 * 3 * 1, dtype=float).reshape(2, 3, 1)
        seq = build_input_sequence(frame, 1)
        assert seq.shape == (3, 1)
        np.testing.assert_array_equal(seq[0], frame[0, 0])
        np.testing.assert_array_equal(seq[1:], frame[1, :2])
        np.testing.assert_array_equal(build_input_sequence(frame, 0)[0], 0.0)

    def test_slot_sources_point_left_or_up(self):
        dims = (1, 2, 3)
        src, _ = slot_sources(dims, WindowSpec(0, 1, 1))
        # row 0 starts from the zero token, stored after the content rows
        assert src[0] == 6
        assert list(src[1:3]) == [0, 1]
        assert src[3] == 0
        assert list(src[4:6]) == [3, 4]


class TestForward:
    def test_shapes_and_ranges(self, rng):
        params = random_params(SMALL, 1)
        pred = forward_teacher_forced(volume(rng, 2, 3, 4, 8), params, rate_idx=1)
        mu, sigma, lrp = pred.frame(1)
        assert mu.shape == sigma.shape == lrp.shape == (3, 4, 8)
        assert np.all(sigma >= SMALL.scale_min)
        assert np.all(np.abs(lrp) <= 0.5)

    def test_rate_idx_bounds(self, rng):
        with pytest.raises(ValueError):
            forward_teacher_forced(volume(rng, 1, 2, 2, 8), init_params(SMALL), rate_idx=2)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            forward_teacher_forced(volume(rng, 1, 2, 2, 4), init_params(SMALL))

    def test_causality_probe(self, rng):
        params = random_params(SMALL, 2)
        assert probe_violations(volume(rng, 2, 3, 3, 8), params) == 0

    def test_k0_ignores_history(self, rng):
        params = random_params(SMALL, 3)
        v = volume(rng, 3, 3, 3, 8)
        w = v.copy()
        w[:2] = volume(rng, 2, 3, 3, 8)
        a = predict_frame(v, 2, params, 0)
        b = predict_frame(w, 2, params, 0)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_trimmed_context_matches_full(self, rng):
        params = random_params(SMALL, 5)
        v = volume(rng, 5, 3, 3, 8)
        full = forward_teacher_forced(v, params).frame(4)
        trimmed = predict_frame(v, 4, params, 4)
        for x, y in zip(full, trimmed):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_block_size_invariance(self, rng):
        params = random_params(SMALL, 6)
        v = volume(rng, 2, 3, 4, 8)
        a = forward_teacher_forced(v, params, block_size=4).mu.data
        b = forward_teacher_forced(v, params, block_size=64).mu.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_prepend_feeds_row_start(self, rng):
        params = random_params(SMALL, 12)
        v = volume(rng, 1, 3, 4, 8)
        base = forward_teacher_forced(v, params).frame(0)[0]
        w = v.copy()
        w[0, 1, 0] += 5.0
        moved = forward_teacher_forced(w, params).frame(0)[0]
        assert np.any(moved[2, 0] != base[2, 0])
        other = forward_teacher_forced(volume(rng, 1, 3, 4, 8), params).frame(0)[0]
        np.testing.assert_array_equal(other[0, 0], base[0, 0])

    def test_unit_gains_equal_unscaled_model(self, rng):
        params = random_params(SMALL, 13)
        for g in ("g_in", "g_mu", "g_sigma", "g_lrp"):
            params[f"rate.{g}"].data[...] = 1.0
        v = volume(rng, 2, 3, 3, 8)
        a = forward_teacher_forced(v, params, rate_idx=1)
        b = forward_teacher_forced(v, params, rate_scaling=False)
        for x, y in zip((a.mu, a.sigma, a.lrp), (b.mu, b.sigma, b.lrp)):
            np.testing.assert_array_equal(x.data, y.data)

    def test_apply_lrp(self):
        y = np.ones((2, 2))
        np.testing.assert_array_equal(apply_lrp(y, np.full((2, 2), 0.25)), 1.25)
        with pytest.raises(ShapeError):
            apply_lrp(y, np.zeros(3))


class TestDecodeSession:
    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 1000))
    def test_incremental_matches_teacher_forced(self, L, H, W, seed):
        rng = np.random.default_rng(seed)
        params = random_params(SMALL, seed)
        v = volume(rng, L, H, W, 8)
        assert decode_max_diff(v, params) <= 1e-10

    def test_trimmed_cache_equals_untrimmed(self, rng):
        config = ModelConfig(channels=8, heads=2, head_dim=4, layers=3, window=WindowSpec(1, 1, 1))
        params = random_params(config, 8)
        v = volume(rng, 5, 2, 3, 8)
        assert decode_max_diff(v, params, trim_cache=True) <= 1e-10
        assert decode_max_diff(v, params, trim_cache=False) <= 1e-10

    def test_cache_holds_at_most_lw_frames(self, rng):
        params = random_params(SMALL, 9)
        v = volume(rng, 4, 2, 2, 8)
        session = DecodeSession(params, (2, 2))
        for l in range(4):
            session.decode_frame(v[l])
            assert len(session.cache.frame_ids) <= SMALL.window.l_w

    def test_eviction_is_noop_within_window(self, rng):
        params = random_params(SMALL, 10)
        v = volume(rng, 3, 2, 2, 8)
        session = DecodeSession(params, (2, 2))
        session.add_frame(v[0])
        session.add_frame(v[1])
        session.begin_frame()
        session.cache.evict_older_than(2 - SMALL.window.l_w)
        got = session.decode_step()
        ref = forward_teacher_forced(v, params).frame(2)
        np.testing.assert_allclose(got[0], ref[0][0, 0], atol=1e-12)

    def test_first_step_is_context_free(self):
        params = random_params(SMALL, 11)
        a = DecodeSession(params, (2, 2))
        a.begin_frame()
        b = DecodeSession(params, (3, 5))
        b.begin_frame()
        np.testing.assert_allclose(a.decode_step()[0], b.decode_step()[0], atol=1e-14)

    def test_sequencing_errors(self):
        params = init_params(SMALL)
        s = DecodeSession(params, (2, 2))
        with pytest.raises(SequencingError):
            s.decode_step()
        s.begin_frame()
        with pytest.raises(SequencingError):
            s.decode_step((0, 1))
        s.decode_step((0, 0))
        with pytest.raises(SequencingError):
            s.decode_step()
        with pytest.raises(SequencingError):
            s.begin_frame()
        s.commit(np.zeros(8))
        with pytest.raises(SequencingError):
            s.commit(np.zeros(8))
