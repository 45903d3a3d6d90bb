"""Tests for the MicroAttNet model: geometry, attention, decisions and persistence."""
from dataclasses import replace

import numpy as np
import pytest

from errors import CheckpointFormatError, ConfigurationError, DimensionError, NumericError, UsageError
from microattnet import (
    AttentionTrace,
    ModelConfig,
    build,
    check_model_gradients,
    decide_bits,
    export_attention_trace,
    forward,
    fusion_attention,
    load_model,
    parameter_count,
    parameter_hash,
    predict_multilabel,
    predict_probabilities,
    save_model,
    se_block,
)
from tensorgrad import LayerParams, Tensor, save_blobs


def batch_for(config: ModelConfig, size: int, rng) -> np.ndarray:
    return rng.normal(size=(size, 3, config.input_side, config.input_side)).astype(config.dtype)


# =============================================================================
# Geometry
# =============================================================================


class TestGeometry:

    def test_reference_parameter_count(self):
        config = ModelConfig(input_side=64)
        assert parameter_count(config) == 3_166_035
        assert sum(p.data.size for p in build(config).parameters()) == 3_166_035

    def test_ablation_variants_drop_their_layers(self):
        full = ModelConfig(input_side=64)
        assert parameter_count(full) - parameter_count(replace(full, fusion_attention=False)) == 835 + 3203
        assert parameter_count(full) - parameter_count(replace(full, se_block=False)) == 552

    @pytest.mark.parametrize("attention, se", [(True, True), (False, True), (True, False), (False, False)])
    def test_count_matches_built_state(self, tiny_model_config, attention, se):
        config = replace(tiny_model_config, fusion_attention=attention, se_block=se)
        assert sum(p.data.size for p in build(config).parameters()) == parameter_count(config)

    @pytest.mark.parametrize("overrides", [
        {"input_side": 30},
        {"kernel": 4, "padding": 2},
        {"c2": 30, "se_reduction": 4},
        {"dropout_head": 1.0},
        {"precision": "f16"},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigurationError):
            ModelConfig(**overrides)

    def test_build_is_seeded(self, tiny_model_config):
        assert parameter_hash(build(tiny_model_config, seed=4)) == parameter_hash(build(tiny_model_config, seed=4))
        assert parameter_hash(build(tiny_model_config, seed=4)) != parameter_hash(build(tiny_model_config, seed=5))


# =============================================================================
# Forward pass
# =============================================================================


class TestForward:

    def test_output_shapes_and_trace(self, tiny_model_config, rng):
        state = build(tiny_model_config)
        prediction = forward(batch_for(tiny_model_config, 3, rng), state)
        assert prediction.logits.shape == (3, 5)
        assert prediction.probabilities.shape == (3, 5)
        assert len(prediction.trace.stages) == 2
        for alpha in prediction.trace.stages:
            assert alpha.shape == (3, 3)
            np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        assert prediction.se_gates.shape == (3, tiny_model_config.c2)
        assert np.all((prediction.se_gates > 0) & (prediction.se_gates < 1))

    def test_disabled_modules_leave_no_trace(self, tiny_model_config, rng):
        config = replace(tiny_model_config, fusion_attention=False, se_block=False)
        prediction = forward(batch_for(config, 2, rng), build(config))
        assert prediction.trace.stages == []
        assert prediction.se_gates is None

    def test_zero_attention_logits_weight_streams_equally(self, tiny_model_config, rng):
        state = build(tiny_model_config)
        for stage in ("att1", "att2"):
            state.layers[f"{stage}.logits"].weight.data[:] = 0.0
            state.layers[f"{stage}.logits"].bias.data[:] = 0.0
        prediction = forward(batch_for(tiny_model_config, 2, rng), state)
        for alpha in prediction.trace.stages:
            np.testing.assert_allclose(alpha, 1.0 / 3.0, atol=1e-12)

    def test_zero_excitation_gates_at_half(self, tiny_model_config, rng):
        state = build(tiny_model_config)
        state.layers["se.excite"].weight.data[:] = 0.0
        state.layers["se.excite"].bias.data[:] = 0.0
        prediction = forward(batch_for(tiny_model_config, 2, rng), state)
        np.testing.assert_allclose(prediction.se_gates, 0.5)

    def test_zero_output_layer_gives_even_odds(self, tiny_model_config, rng):
        state = build(tiny_model_config)
        state.layers["head.out"].weight.data[:] = 0.0
        state.layers["head.out"].bias.data[:] = 0.0
        prediction = forward(batch_for(tiny_model_config, 2, rng), state)
        np.testing.assert_allclose(prediction.probabilities, 0.5)

    def test_zero_batch_gives_identical_finite_logits(self, tiny_model_config):
        logits = forward(np.zeros((4, 3, 8, 8)), build(tiny_model_config, seed=2)).logits.data
        assert np.all(np.isfinite(logits))
        for row in logits[1:]:
            np.testing.assert_array_equal(row, logits[0])

    def test_wrong_input_shape(self, tiny_model_config):
        with pytest.raises(DimensionError):
            forward(np.zeros((2, 3, 12, 12)), build(tiny_model_config))
        with pytest.raises(DimensionError):
            forward(np.zeros((2, 2, 8, 8)), build(tiny_model_config))

    def test_non_finite_input(self, tiny_model_config):
        batch = np.zeros((2, 3, 8, 8))
        batch[0, 1, 2, 3] = np.nan
        with pytest.raises(NumericError) as excinfo:
            forward(batch, build(tiny_model_config))
        assert excinfo.value.where == "input"

    def test_eval_predictions_do_not_depend_on_batching(self, tiny_model_config, rng):
        state = build(tiny_model_config)
        features = batch_for(tiny_model_config, 7, rng)
        np.testing.assert_allclose(predict_probabilities(state, features, batch_size=2),
                                   predict_probabilities(state, features, batch_size=32), atol=1e-12)


# =============================================================================
# Attention and SE by hand
# =============================================================================


def column(*values) -> Tensor:
    """A (1, C, 1, 1) feature map."""
    return Tensor(np.array(values, dtype=np.float64).reshape(1, -1, 1, 1))


def dense(weight, bias) -> LayerParams:
    return LayerParams(Tensor(np.array(weight, dtype=np.float64)), Tensor(np.array(bias, dtype=np.float64)))


class TestAttentionByHand:

    def test_fusion_attention_two_channels(self):
        streams = [column(1.0, 2.0), column(3.0, 0.0), column(0.0, 1.0)]
        # g = (1, 2, 3, 0, 0, 1); hidden = relu(g0, g2 - g5) = (1, 2); z = (1, 2, 0)
        hidden = dense([[1, 0, 0, 0, 0, 0], [0, 0, 1, 0, 0, -1]], [0, 0])
        logits = dense([[1, 0], [0, 1], [0, 0]], [0, 0, 0])
        scaled, alpha = fusion_attention(streams, hidden, logits)

        expected = np.exp([1.0, 2.0, 0.0]) / np.exp([1.0, 2.0, 0.0]).sum()
        np.testing.assert_allclose(alpha, [expected], atol=1e-12)
        for weight, stream, out in zip(expected, streams, scaled):
            np.testing.assert_allclose(out.data, weight * stream.data, atol=1e-12)

    def test_fusion_attention_negative_hidden_is_clipped(self):
        streams = [column(1.0, 1.0), column(1.0, 1.0), column(1.0, 1.0)]
        hidden = dense([[-1, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]], [0, 0])
        logits = dense([[5, 0], [0, 0], [0, 0]], [0, 0, 0])
        _, alpha = fusion_attention(streams, hidden, logits)
        np.testing.assert_allclose(alpha, 1.0 / 3.0, atol=1e-12)

    def test_se_block_four_channels(self):
        feature = column(1.0, 2.0, 3.0, 4.0)
        # s = mean = 2.5 after relu; excitation logits (2.5, -2.5, 0, 0)
        squeeze = dense([[0.25, 0.25, 0.25, 0.25]], [0])
        excite = dense([[1], [-1], [0], [0.4]], [0, 0, 0, -1])
        out, gates = se_block(feature, squeeze, excite)

        sig = 1 / (1 + np.exp(-2.5))
        np.testing.assert_allclose(gates, [[sig, 1 - sig, 0.5, 0.5]], atol=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [sig, 2 * (1 - sig), 1.5, 2.0], atol=1e-12)

    def test_se_block_shape_mismatch(self):
        with pytest.raises(DimensionError):
            se_block(column(1.0, 2.0), dense([[1, 1, 1, 1]], [0]), dense([[1], [1], [1], [1]], [0, 0, 0, 0]))


# =============================================================================
# Decisions
# =============================================================================


class TestDecisions:

    def test_threshold_is_inclusive(self):
        bits = decide_bits(np.array([[0.2, 0.5, 0.1, 0.19, 0.0]]), threshold=0.2)
        np.testing.assert_array_equal(bits, [[1, 1, 0, 0, 0]])

    def test_empty_row_falls_back_to_argmax(self):
        bits = decide_bits(np.array([[0.1, 0.15, 0.05, 0.19, 0.12]]), threshold=0.2)
        np.testing.assert_array_equal(bits, [[0, 0, 0, 1, 0]])

    def test_threshold_range(self):
        with pytest.raises(ConfigurationError):
            decide_bits(np.zeros((1, 5)), threshold=1.0)

    def test_views_are_fused_by_mean(self):
        left = np.array([[0.3, 0.0, 0.0, 0.0, 0.0]])
        right = np.array([[0.0, 0.0, 0.0, 0.0, 0.1]])
        bits = predict_multilabel([np.vstack([left, right])], threshold=0.1)
        np.testing.assert_array_equal(bits, [[1, 0, 0, 0, 0]])

    def test_sequence_without_samples(self):
        with pytest.raises(UsageError):
            predict_multilabel([np.zeros((0, 5))])


# =============================================================================
# Persistence and traces
# =============================================================================


class TestPersistence:

    def test_save_and_load(self, tmp_path, tiny_model_config, rng):
        state = build(tiny_model_config, seed=9)
        state.norms["head.bn"].running_mean[:] = 0.25
        save_model(state, tmp_path / "model.matn", {"note": "seed 9"})
        loaded, header = load_model(tmp_path / "model.matn")
        assert loaded.config == tiny_model_config
        assert header["note"] == "seed 9"
        assert header["kind"] == "microattnet"
        assert parameter_hash(loaded) == parameter_hash(state)
        features = batch_for(tiny_model_config, 3, rng)
        np.testing.assert_array_equal(predict_probabilities(loaded, features), predict_probabilities(state, features))

    def test_header_without_model_config(self, tmp_path):
        save_blobs(tmp_path / "other.matn", {"kind": "something"}, {"w": np.zeros(3)})
        with pytest.raises(CheckpointFormatError):
            load_model(tmp_path / "other.matn")

    def test_attention_trace_export(self, tmp_path):
        trace = AttentionTrace([np.full((2, 3), 1.0 / 3.0), np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])])
        export_attention_trace(trace, tmp_path / "attention.tsv", ["a", "b"])
        lines = (tmp_path / "attention.tsv").read_text().splitlines()
        assert lines[0] == "sample\tstage\talpha_h\talpha_v\talpha_m"
        assert len(lines) == 5
        assert lines[3] == "a\tatt2\t0.200000\t0.300000\t0.500000"


# =============================================================================
# Gradient verification
# =============================================================================


class TestModelGradients:

    def test_tiny_network(self, tiny_model_config):
        result = check_model_gradients(tiny_model_config, max_coords=6)
        assert result.checked > 0
        assert result.max_rel_error <= 1e-5

    @pytest.mark.slow
    def test_miniature_network_checks_every_coordinate(self, mini_config):
        result = check_model_gradients(mini_config)
        inputs = 2 * 3 * mini_config.input_side ** 2
        assert result.checked == inputs + parameter_count(mini_config)
        assert result.max_rel_error <= 1e-5
