"""Unit tests for the toy decoder, calibration and synthetic scenes."""

import numpy as np
import pytest

from windowquant.errors import ShapeError
from windowquant.model import ToyDecoder, ToyModelSpec, calibrate
from windowquant.numerics import as_matrix
from windowquant.scene import SyntheticScene, calibration_input, generate_scene
from windowquant.search import window_similarities


class TestToyModelSpec:
    def test_embed_dim(self):
        assert ToyModelSpec(heads=3, head_dim=5).embed_dim == 15

    def test_rejects_zero_counts(self):
        with pytest.raises(ShapeError):
            ToyModelSpec(layers=0)


class TestToyDecoder:
    def test_same_seed_same_weights(self, small_model):
        a, b = ToyDecoder(small_model), ToyDecoder(small_model)
        assert np.array_equal(a.layers[1].w_o, b.layers[1].w_o)
        assert np.array_equal(a.w_out, b.w_out)

    def test_prefill_shapes(self, small_model, rng):
        decoder = ToyDecoder(small_model)
        result = decoder.prefill(as_matrix(rng.normal(size=(6, small_model.embed_dim))))
        assert len(result.keys) == small_model.layers
        assert result.keys[0].shape == (6, small_model.embed_dim)
        assert result.logits.shape == (small_model.vocab,)
        assert 0 <= result.first_token < small_model.vocab

    def test_prefill_is_causal(self, small_model, rng):
        decoder = ToyDecoder(small_model)
        x = rng.normal(size=(6, small_model.embed_dim))
        full = decoder.prefill(as_matrix(x))
        prefix = decoder.prefill(as_matrix(x[:4]))
        assert np.allclose(full.keys[1][:4], prefix.keys[1], atol=1e-12)

    def test_rejects_wrong_width(self, small_model, rng):
        with pytest.raises(ShapeError):
            ToyDecoder(small_model).prefill(as_matrix(rng.normal(size=(3, small_model.embed_dim + 1))))

    def test_step_rejects_unknown_token(self, small_model):
        with pytest.raises(ShapeError):
            ToyDecoder(small_model).step(small_model.vocab, lambda layer, q, k, v: v)


class TestCalibrate:
    def test_zeroed_attention_layer_has_unit_sensitivity(self, model):
        decoder = ToyDecoder(model).with_zeroed_attention(2)
        sens = calibrate(decoder, calibration_input(model.embed_dim, model.seed))
        assert sens[2] == pytest.approx(1.0)
        assert sens[1] != pytest.approx(1.0)

    def test_zeroing_leaves_original_untouched(self, model):
        decoder = ToyDecoder(model)
        decoder.with_zeroed_attention(0)
        assert decoder.layers[0].w_o.any()

    def test_range_and_determinism(self, model):
        sample = calibration_input(model.embed_dim, model.seed)
        first = calibrate(model, sample)
        assert first == calibrate(model, sample)
        assert len(first) == model.layers
        assert all(-1.0 <= s <= 1.0 for s in first.values)

    def test_deeper_layers_move_the_hidden_state_more(self, model):
        sens = calibrate(model, calibration_input(model.embed_dim, model.seed))
        assert sens[0] > sens[model.layers - 1]


class TestSyntheticScene:
    def test_token_counts(self):
        scene = SyntheticScene(num_frames=5, tokens_per_frame=7, window_size=4)
        assert scene.num_visual_tokens == 35
        assert (scene.plan.num_windows, scene.plan.tail_len) == (8, 3)

    def test_rejects_out_of_range_window(self):
        with pytest.raises(ShapeError):
            SyntheticScene(num_frames=2, tokens_per_frame=4, window_size=4, relevant_window_ids=(2,))

    def test_same_seed_is_bit_identical(self, small_scene):
        a = generate_scene(small_scene, 16)
        b = generate_scene(small_scene, 16)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_more_frames_extend_the_same_scene(self, small_scene):
        from dataclasses import replace

        short, _ = generate_scene(small_scene, 16)
        long, _ = generate_scene(replace(small_scene, num_frames=16), 16)
        assert np.array_equal(long[: short.shape[0]], short)

    def test_irrelevant_windows_score_low(self):
        for seed in range(20):
            scene = SyntheticScene(num_frames=8, tokens_per_frame=4, text_tokens=8, window_size=4, seed=seed)
            visual, text = generate_scene(scene, 16)
            assert max(window_similarities(visual, text, scene.plan)) < 0.2

    def test_relevant_window_scores_highest(self):
        for seed in range(20):
            relevant = 1 + seed % 7
            scene = SyntheticScene(num_frames=8, tokens_per_frame=4, text_tokens=8, window_size=4,
                                   relevant_window_ids=(relevant,), seed=seed)
            visual, text = generate_scene(scene, 16)
            sims = window_similarities(visual, text, scene.plan)
            assert int(np.argmax(sims)) == relevant
            assert sims[relevant] >= 0.6

    def test_embed_dim_too_small(self, small_scene):
        with pytest.raises(ShapeError):
            generate_scene(small_scene, 1)
