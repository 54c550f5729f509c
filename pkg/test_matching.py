"""
Unit tests for the Matching Engine.

Run with: pytest test_matching.py -v
"""

import math

import numpy as np
import pytest

from architectures import build_architecture
from cir_errors import MatchError
from layer_graph import GraphBuilder, init_random
from matching_engine import (
    SiameseModel, SiameseTracker, TrackerConfig, cosine_window, cross_correlate,
    extract_patch, logistic_loss, make_label_map, read_track_log, refine_peak, scale_factors,
    track_step, write_track_log,
)
from output_models import Box, ResponseMap, TrackLogEntry, TrackState
from synth_data import SequenceConfig, evaluate, generate
from tensor_kernels import Tensor

# stride-1 pixel embedding: search side 3 x 21 = 63, exemplar side 31, no resampling
PIXEL_CONFIG = TrackerConfig(exemplar_size=31, search_size=63, num_scales=1, search_factor=3.0)


def pixel_model(config=PIXEL_CONFIG):
    """A 1x1 conv with unit weight: features are the raw pixels."""
    b = GraphBuilder("pixels", in_channels=1)
    b.conv("embed", b.input_id, 1, 1, 1, 0)
    graph = b.build().with_weights({"embed.weight": np.ones((1, 1, 1, 1), dtype=np.float32)})
    return SiameseModel(graph, config)


def zero_background_sequence(motion="static", velocity=(0, 0), num_frames=6):
    return generate(3, SequenceConfig(frame_size=(128, 128), target_size=(21, 21),
                                      num_frames=num_frames, motion=motion,
                                      velocity=velocity, background="zero"))


# ---------------------------------------------------------------------------
# Cross-correlation
# ---------------------------------------------------------------------------

class TestCrossCorrelate:

    def test_scalar_kernel_scales_input(self):
        x = np.random.default_rng(0).uniform(size=(1, 6, 7))
        response = cross_correlate(Tensor(np.full((1, 1, 1), 2.0)), Tensor(x), b=0.5)
        np.testing.assert_allclose(response.scores, 2.0 * x[0] + 0.5, rtol=1e-6)
        assert response.shape == (6, 7)

    def test_response_size(self):
        z = Tensor(np.ones((4, 5, 5)))
        x = Tensor(np.ones((4, 21, 21)))
        assert cross_correlate(z, x).shape == (17, 17)

    def test_bias_does_not_move_peak(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.normal(size=(3, 3, 3)))
        x = Tensor(rng.normal(size=(3, 12, 12)))
        plain = cross_correlate(z, x)
        shifted = cross_correlate(z, x, b=-7.5)
        assert plain.peak() == shifted.peak()
        np.testing.assert_allclose(shifted.scores - plain.scores, -7.5)

    def test_embedded_patch_is_found(self):
        """With a zero background the exact match maximizes the inner product."""
        rng = np.random.default_rng(2)
        patch = rng.uniform(0.1, 1.0, size=(2, 4, 4))
        x = np.zeros((2, 15, 15))
        x[:, 6:10, 3:7] = patch
        response = cross_correlate(Tensor(patch), Tensor(x))
        assert response.peak() == (6, 3)

    def test_channel_mismatch(self):
        with pytest.raises(MatchError):
            cross_correlate(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((3, 8, 8))))

    def test_exemplar_larger_than_search(self):
        with pytest.raises(MatchError):
            cross_correlate(Tensor(np.ones((1, 9, 9))), Tensor(np.ones((1, 8, 8))))

    def test_batched_embeddings_rejected(self):
        with pytest.raises(MatchError):
            cross_correlate(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 8, 8))))


class TestResponseMap:

    def test_peak_prefers_first_on_ties(self):
        scores = np.zeros((3, 4))
        scores[1, 2] = scores[2, 0] = 5.0
        assert ResponseMap(scores).peak() == (1, 2)

    def test_search_pixel_mapping(self):
        response = ResponseMap(np.zeros((17, 17)), offset=63.0, stride=8.0)
        assert response.to_search_pixel(8, 8) == (127.0, 127.0)
        assert response.to_search_pixel(0, 16) == (191.0, 63.0)


# ---------------------------------------------------------------------------
# Loss and labels
# ---------------------------------------------------------------------------

class TestLoss:

    def test_zero_scores_cost_log_two(self):
        labels = make_label_map((17, 17))
        assert logistic_loss(labels, np.zeros((17, 17))) == pytest.approx(math.log(2.0))

    def test_sign_flip_invariance(self):
        rng = np.random.default_rng(3)
        y = np.where(rng.uniform(size=(9, 9)) > 0.5, 1.0, -1.0)
        f = rng.normal(scale=3.0, size=(9, 9))
        assert logistic_loss(y, f) == pytest.approx(logistic_loss(-y, -f))

    def test_confident_correct_scores_cost_nothing(self):
        labels = make_label_map((9, 9), radius=1.0)
        assert logistic_loss(labels, 50.0 * labels.values) < 1e-12

    def test_large_margins_stay_finite(self):
        labels = make_label_map((5, 5))
        loss = logistic_loss(labels, -1e4 * labels.values)
        assert loss == pytest.approx(1e4)

    def test_accepts_response_map(self):
        labels = make_label_map((5, 5))
        assert logistic_loss(labels, ResponseMap(np.zeros((5, 5)))) == pytest.approx(math.log(2.0))

    def test_shape_mismatch(self):
        with pytest.raises(MatchError):
            logistic_loss(np.ones((3, 3)), np.ones((4, 4)))


class TestLabelMap:

    def test_disc_around_centre(self):
        labels = make_label_map((17, 17), radius=2.0)
        assert labels.center == (8.0, 8.0)
        assert int((labels.values == 1.0).sum()) == 13
        assert labels.values[8, 8] == 1.0
        assert labels.values[0, 0] == -1.0
        assert set(np.unique(labels.values)) == {-1.0, 1.0}

    def test_explicit_centre(self):
        labels = make_label_map((9, 9), radius=0.5, center=(1, 7))
        assert np.argwhere(labels.values == 1.0).tolist() == [[1, 7]]

    def test_empty_shape(self):
        with pytest.raises(MatchError):
            make_label_map((0, 5))


# ---------------------------------------------------------------------------
# Tracking helpers
# ---------------------------------------------------------------------------

class TestHelpers:

    def test_scale_factors(self):
        np.testing.assert_allclose(scale_factors(1.0482, 3), [1 / 1.0482, 1.0, 1.0482])
        factors = scale_factors(1.05, 5)
        assert len(factors) == 5 and factors[2] == 1.0

    def test_cosine_window(self):
        window = cosine_window((17, 17))
        assert window.sum() == pytest.approx(1.0)
        assert np.unravel_index(window.argmax(), window.shape) == (8, 8)
        np.testing.assert_allclose(window, window.T)

    def test_patch_inside_frame_is_exact_crop(self):
        frame = np.arange(400, dtype=np.float32).reshape(1, 20, 20)
        patch, clipped = extract_patch(frame, (10.0, 10.0), 5, 5)
        assert not clipped
        np.testing.assert_array_equal(patch, frame[:, 8:13, 8:13])

    def test_patch_outside_frame_uses_mean(self):
        frame = np.arange(400, dtype=np.float32).reshape(1, 20, 20)
        patch, clipped = extract_patch(frame, (0.0, 0.0), 5, 5)
        assert clipped
        np.testing.assert_allclose(patch[:, :2, :], frame.mean(), rtol=1e-6)
        np.testing.assert_array_equal(patch[:, 2:, 2:], frame[:, :3, :3])

    def test_patch_is_resized(self):
        frame = np.random.default_rng(4).uniform(size=(3, 40, 40)).astype(np.float32)
        patch, clipped = extract_patch(frame, (20.0, 20.0), 16, 8)
        assert patch.shape == (3, 8, 8) and patch.dtype == np.float32
        assert not clipped

    def test_crops_with_one_step_agree_at_centre(self):
        """An exemplar crop is the central window of a search crop taken with the same step."""
        frame = np.random.default_rng(6).uniform(size=(2, 60, 60)).astype(np.float32)
        center, step = (30.3, 27.8), 0.375
        search, _ = extract_patch(frame, center, step * 21, 21)
        exemplar, _ = extract_patch(frame, center, step * 11, 11)
        np.testing.assert_allclose(exemplar, search[:, 5:16, 5:16], atol=1e-6)

    def test_fractional_side_is_not_rounded(self):
        frame = np.random.default_rng(7).uniform(size=(1, 80, 80)).astype(np.float32)
        a, _ = extract_patch(frame, (40.0, 40.0), 47.8, 127)
        b, _ = extract_patch(frame, (40.0, 40.0), 48.0, 127)
        assert not np.allclose(a, b)

    def test_refine_peak_recovers_parabola_vertex(self):
        rows, cols = np.mgrid[0:7, 0:9]
        scores = -((rows - 2.75) ** 2) - 0.5 * (cols - 5.2) ** 2
        r, c = refine_peak(scores)
        assert r == pytest.approx(2.75)
        assert c == pytest.approx(5.2)

    def test_refine_peak_on_border_and_plateau(self):
        scores = np.zeros((5, 5))
        scores[0, 2] = 1.0
        scores[1, 2] = 0.5
        assert refine_peak(scores) == (0.0, 2.0)
        assert refine_peak(np.ones((3, 3))) == (0.0, 0.0)

    def test_patch_needs_channel_axis(self):
        with pytest.raises(MatchError):
            extract_patch(np.zeros((10, 10)), (5.0, 5.0), 3, 3)

    def test_invalid_state(self):
        with pytest.raises(MatchError):
            TrackState((0.0, 0.0), (10.0, 10.0), scale=0.0)
        with pytest.raises(MatchError):
            TrackState((0.0, 0.0), (0.0, 10.0))


# ---------------------------------------------------------------------------
# Siamese model and tracker
# ---------------------------------------------------------------------------

class TestSiameseModel:

    def test_tiny_backbone_geometry(self, tiny_cir):
        model = SiameseModel(init_random(tiny_cir, seed=0))
        assert model.stride == 8
        assert model.exemplar_feat_size == (13, 13)
        assert model.response_offset == 63.0

    def test_centre_cell_maps_to_search_centre(self, tiny_cir):
        model = SiameseModel(init_random(tiny_cir, seed=0))
        rng = np.random.default_rng(5)
        z = Tensor(model.embed(rng.uniform(size=(1, 127, 127))))
        x = Tensor(model.embed(rng.uniform(size=(1, 255, 255))))
        response = model.respond(z, x)
        assert response.shape == (17, 17)
        assert response.to_search_pixel(8, 8) == (127.0, 127.0)


class TestTracker:

    def test_follows_linear_motion_exactly(self):
        seq = zero_background_sequence("linear", velocity=(2, 1), num_frames=8)
        tracker = SiameseTracker(pixel_model())
        log = tracker.track_sequence(seq.frames, seq.ground_truth[0])
        metrics = evaluate(log, seq.ground_truth)
        assert metrics.mean_center_error < 1e-6
        assert metrics.mean_iou > 0.999
        assert metrics.success_rate == 1.0

    def test_static_target_with_cosine_window(self):
        config = TrackerConfig(exemplar_size=31, search_size=63, num_scales=1,
                               search_factor=3.0, cosine_window=True)
        seq = zero_background_sequence()
        log = SiameseTracker(pixel_model(config)).track_sequence(seq.frames, seq.ground_truth[0])
        assert all(abs(e.cx - 64.0) < 1e-6 and abs(e.cy - 64.0) < 1e-6 for e in log)

    def test_scale_penalty_keeps_unit_scale(self):
        config = TrackerConfig(exemplar_size=31, search_size=63, num_scales=3,
                               search_factor=3.0, scale_penalty=0.5)
        seq = zero_background_sequence(num_frames=2)
        tracker = SiameseTracker(pixel_model(config))
        tracker.init(seq.frames[0], seq.ground_truth[0])
        result = tracker.update(seq.frames[1])
        assert result.scale_index == 1
        assert result.state.scale == pytest.approx(1.0)
        assert len(result.responses) == 3

    def test_scale_update_interpolates(self):
        """Non-unit scales win under a large bonus; the scale moves by lr of the factor."""
        config = TrackerConfig(exemplar_size=31, search_size=63, num_scales=3,
                               search_factor=3.0, scale_penalty=10.0)
        seq = zero_background_sequence(num_frames=2)
        tracker = SiameseTracker(pixel_model(config))
        tracker.init(seq.frames[0], seq.ground_truth[0])
        result = tracker.update(seq.frames[1])
        assert result.scale_index in (0, 2)
        factor = scale_factors(config.scale_step, 3)[result.scale_index]
        expected = (1 - config.scale_lr) + config.scale_lr * factor
        assert result.state.scale == pytest.approx(expected)

    def test_unit_scale_is_a_fixed_point(self):
        seq = zero_background_sequence(num_frames=4)
        log = SiameseTracker(pixel_model()).track_sequence(seq.frames, seq.ground_truth[0])
        assert all(e.scale == pytest.approx(1.0) for e in log)

    def test_log_starts_with_init_box(self, tiny_cir):
        seq = generate(0, SequenceConfig(frame_size=(160, 160), target_size=(32, 32),
                                         num_frames=3))
        model = SiameseModel(init_random(tiny_cir, seed=1))
        log = SiameseTracker(model).track_sequence(seq.frames, seq.ground_truth[0])
        assert [e.frame for e in log] == [0, 1, 2]
        first = log[0]
        assert (first.cx, first.cy, first.w, first.h) == (80.5, 80.5, 32.0, 32.0)
        assert first.peak == 0.0
        assert all(0 <= e.cx <= 159 and 0 <= e.cy <= 159 for e in log)

    def test_static_target_with_real_backbone(self):
        """Exemplar and search crops share one step, so a static target stays put."""
        model = SiameseModel(init_random(build_architecture("ciresnet22"), seed=0),
                             TrackerConfig(num_scales=1))
        seq = generate(0, SequenceConfig(num_frames=10, channels=model.in_channels))
        log = SiameseTracker(model).track_sequence(seq.frames, seq.ground_truth[0])
        errors = [math.hypot(e.cx - g.cx, e.cy - g.cy) for e, g in zip(log, seq.ground_truth)]
        assert max(errors) <= model.stride

    def test_update_before_init(self):
        with pytest.raises(MatchError):
            SiameseTracker(pixel_model()).update(Tensor(np.zeros((1, 64, 64))))

    def test_empty_sequence(self):
        with pytest.raises(MatchError):
            SiameseTracker(pixel_model()).track_sequence([], Box(10, 10, 5, 5))

    def test_frame_channel_mismatch(self):
        model = pixel_model()
        state = TrackState((32.0, 32.0), (21.0, 21.0))
        z = Tensor(np.ones((1, 31, 31)))
        with pytest.raises(MatchError):
            track_step(state, Tensor(np.zeros((3, 64, 64))), model, z)


class TestTrackLog:

    def test_roundtrip(self, tmp_path):
        entries = [TrackLogEntry(0, 80.5, 80.5, 32.0, 32.0, 1.0, 0.0),
                   TrackLogEntry(1, 82.25, 79.125, 33.5, 33.5, 1.0467, 12.3456)]
        path = tmp_path / "track.tsv"
        write_track_log(entries, path)
        first_line = path.read_text().splitlines()[0]
        assert first_line.split("\t")[0] == "0"
        loaded = read_track_log(path)
        assert [e.frame for e in loaded] == [0, 1]
        assert loaded[1].cx == pytest.approx(82.25)
        assert loaded[1].peak == pytest.approx(12.3456)
