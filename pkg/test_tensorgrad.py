"""Tests for the numpy autodiff engine, layer ops, losses, Adam and checkpoints."""
import struct

import numpy as np
import pytest

from errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
    UsageError,
)
from tensorgrad import (
    MAGIC,
    Adam,
    AdamState,
    BatchNormParams,
    LayerParams,
    Tensor,
    activation,
    adam_step,
    backward,
    batchnorm,
    binary_cross_entropy,
    concat,
    conv2d,
    dropout,
    focal_loss,
    global_avg_pool,
    gradcheck,
    linear,
    load_blobs,
    maxpool2,
    mul,
    no_grad,
    relu,
    resolve_dtype,
    save_blobs,
    sigmoid,
    slice_axis,
    softmax,
    tensor_sum,
)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar with a non-trivial gradient for every output element."""
    return tensor_sum(mul(out, Tensor(weights)))


# =============================================================================
# Engine
# =============================================================================

class TestEngine:

    def test_resolve_dtype(self):
        assert resolve_dtype("f32") == np.float32
        assert resolve_dtype("f64") == np.float64
        with pytest.raises(ConfigurationError):
            resolve_dtype("f16")

    def test_broadcast_gradients_are_reduced(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.full((1, 4), 2.0), requires_grad=True)
        backward(tensor_sum(mul(a, b) + b))
        np.testing.assert_allclose(a.grad, np.full((3, 4), 2.0))
        np.testing.assert_allclose(b.grad, np.full((1, 4), 6.0))

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(mul(x, 2.0))

    def test_backward_on_detached_tensor(self):
        with pytest.raises(UsageError):
            backward(Tensor(np.array(1.0)))

    def test_graph_is_freed_after_backward(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = tensor_sum(mul(x, 3.0))
        backward(loss)
        with pytest.raises(UsageError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = mul(x, 2.0)
        assert not y.requires_grad

    def test_non_finite_result_names_the_operation(self):
        x = Tensor(np.array([1.0]))
        with pytest.raises(NumericError) as excinfo:
            mul(x, np.inf)
        assert excinfo.value.where == "mul"

    def test_concat_and_slice_route_gradients(self, rng):
        a, b = param(rng, 2, 3), param(rng, 2, 2)
        joined = concat([a, b], axis=1)
        assert joined.shape == (2, 5)
        backward(tensor_sum(slice_axis(joined, 2, 4, axis=1)))
        np.testing.assert_allclose(a.grad, [[0, 0, 1], [0, 0, 1]])
        np.testing.assert_allclose(b.grad, [[1, 0], [1, 0]])


# =============================================================================
# Gradient checks of every layer op (64-bit)
# =============================================================================

class TestGradcheck:

    def test_conv2d(self, rng):
        x, w, b = param(rng, 2, 2, 6, 6), param(rng, 3, 2, 3, 3), param(rng, 3)
        weights = rng.normal(size=(2, 3, 6, 6))
        result = gradcheck(lambda x, w, b: weighted_sum(conv2d(x, LayerParams(w, b), 1, 1), weights), [x, w, b])
        assert result.max_rel_error <= 1e-5
        assert result.checked == x.data.size + w.data.size + b.data.size

    def test_conv2d_strided_without_padding(self, rng):
        x, w = param(rng, 1, 1, 7, 7), param(rng, 2, 1, 3, 3)
        weights = rng.normal(size=(1, 2, 3, 3))
        result = gradcheck(lambda x, w: weighted_sum(conv2d(x, LayerParams(w), 2, 0), weights), [x, w])
        assert result.max_rel_error <= 1e-5

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm_4d(self, rng, training):
        x = param(rng, 4, 3, 2, 2)
        norm = BatchNormParams.create(3, dtype=np.float64)
        norm.gamma.data[:] = rng.normal(size=3)
        norm.beta.data[:] = rng.normal(size=3)
        norm.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        weights = rng.normal(size=(4, 3, 2, 2))
        result = gradcheck(lambda x, g, b: weighted_sum(batchnorm(x, norm, training), weights),
                           [x, norm.gamma, norm.beta], floor=1e-6)
        assert result.max_rel_error <= 1e-5

    def test_batchnorm_2d(self, rng):
        x = param(rng, 5, 4)
        norm = BatchNormParams.create(4, dtype=np.float64)
        weights = rng.normal(size=(5, 4))
        result = gradcheck(lambda x: weighted_sum(batchnorm(x, norm, True), weights), [x], floor=1e-6)
        assert result.max_rel_error <= 1e-5

    def test_linear_relu_sigmoid(self, rng):
        x, w, b = param(rng, 3, 5), param(rng, 4, 5), param(rng, 4)
        weights = rng.normal(size=(3, 4))
        result = gradcheck(lambda x, w, b: weighted_sum(sigmoid(relu(linear(x, LayerParams(w, b)))), weights),
                           [x, w, b])
        assert result.max_rel_error <= 1e-5

    def test_softmax(self, rng):
        x = param(rng, 3, 4)
        weights = rng.normal(size=(3, 4))
        assert gradcheck(lambda x: weighted_sum(softmax(x), weights), [x]).max_rel_error <= 1e-5

    def test_maxpool_and_global_pool(self, rng):
        x = param(rng, 2, 2, 4, 4)
        weights = rng.normal(size=(2, 2))
        result = gradcheck(lambda x: weighted_sum(global_avg_pool(maxpool2(x)), weights), [x])
        assert result.max_rel_error <= 1e-5

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
    def test_focal_loss(self, rng, gamma):
        logits = param(rng, 4, 5)
        targets = rng.integers(0, 2, size=(4, 5))
        assert gradcheck(lambda z: focal_loss(z, targets, gamma), [logits]).max_rel_error <= 1e-5

    def test_sampled_coordinates(self, rng):
        x = param(rng, 10, 10)
        result = gradcheck(lambda x: tensor_sum(mul(x, x)), [x], max_coords=7)
        assert result.checked == 7
        assert result.max_rel_error <= 1e-5

    def test_non_scalar_function_is_rejected(self, rng):
        with pytest.raises(UsageError):
            gradcheck(lambda x: mul(x, 2.0), [param(rng, 3)])


# =============================================================================
# Layer semantics
# =============================================================================

class TestLayers:

    def test_conv2d_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 5, 5)))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = conv2d(x, LayerParams(Tensor(kernel)), padding=1)
        np.testing.assert_allclose(out.data, x.data)

    def test_conv2d_rejects_even_kernel(self, rng):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 1, 4, 4))), LayerParams(Tensor(np.ones((1, 1, 2, 2)))))

    def test_batchnorm_train_needs_two_samples(self):
        with pytest.raises(ConfigurationError):
            batchnorm(Tensor(np.ones((1, 2))), BatchNormParams.create(2, dtype=np.float64), training=True)

    def test_batchnorm_updates_running_statistics(self):
        norm = BatchNormParams.create(1, dtype=np.float64)
        x = Tensor(np.array([[0.0], [2.0]]))
        batchnorm(x, norm, training=True)
        np.testing.assert_allclose(norm.running_mean, [0.1])
        # unbiased variance of {0, 2} is 2
        np.testing.assert_allclose(norm.running_var, [0.9 + 0.1 * 2.0])

    def test_maxpool_ties_go_to_first_maximum(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(tensor_sum(maxpool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_maxpool_needs_even_extent(self):
        with pytest.raises(DimensionError):
            maxpool2(Tensor(np.ones((1, 1, 3, 4))))

    def test_dropout(self, rng):
        x = Tensor(np.ones((200, 50)))
        assert dropout(x, 0.5, training=False, rng=None) is x
        dropped = dropout(x, 0.5, training=True, rng=rng)
        assert set(np.unique(dropped.data)) <= {0.0, 2.0}
        assert dropped.data.mean() == pytest.approx(1.0, abs=0.05)
        with pytest.raises(ConfigurationError):
            dropout(x, 1.0, training=True, rng=rng)
        with pytest.raises(UsageError):
            dropout(x, 0.5, training=True, rng=None)

    def test_softmax_rows_sum_to_one(self, rng):
        probabilities = softmax(Tensor(rng.normal(size=(6, 3)) * 50)).data
        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-6)

    def test_activation_lookup(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_allclose(activation(x, "relu").data, np.maximum(x.data, 0))
        with pytest.raises(ConfigurationError):
            activation(x, "tanh")

    def test_linear_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear(Tensor(np.ones((2, 3))), LayerParams(Tensor(np.ones((4, 5)))))

    def test_batchnorm_constant_channels_give_beta(self):
        norm = BatchNormParams.create(2, dtype=np.float64)
        norm.gamma.data[:] = [1.5, -2.0]
        norm.beta.data[:] = [0.25, -0.75]
        x = np.empty((3, 2, 2, 2))
        x[:, 0], x[:, 1] = 4.0, -9.0
        out = batchnorm(Tensor(x), norm, training=True).data
        np.testing.assert_array_equal(out[:, 0], 0.25)
        np.testing.assert_array_equal(out[:, 1], -0.75)

    def test_softmax_ignores_constant_shift(self, rng):
        logits = rng.normal(size=(4, 3))
        np.testing.assert_allclose(softmax(Tensor(logits + 1000.0)).data, softmax(Tensor(logits)).data, atol=1e-9)

    def test_global_avg_pool_value(self):
        out = global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        np.testing.assert_array_equal(out.data, [[2.5]])

    def test_linear_maps_are_linear(self, rng):
        x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
        kernel = LayerParams(Tensor(rng.normal(size=(3, 2, 3, 3))))
        combined = conv2d(Tensor(2.0 * x - 0.5 * y), kernel, padding=1).data
        separate = 2.0 * conv2d(Tensor(x), kernel, padding=1).data - 0.5 * conv2d(Tensor(y), kernel, padding=1).data
        np.testing.assert_allclose(combined, separate, atol=1e-10)

        dense = LayerParams(Tensor(rng.normal(size=(4, 6))))
        a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        np.testing.assert_allclose(linear(Tensor(3.0 * a + b), dense).data,
                                   3.0 * linear(Tensor(a), dense).data + linear(Tensor(b), dense).data, atol=1e-10)

        np.testing.assert_allclose(global_avg_pool(Tensor(x + 4.0 * y)).data,
                                   global_avg_pool(Tensor(x)).data + 4.0 * global_avg_pool(Tensor(y)).data,
                                   atol=1e-12)


# =============================================================================
# Naive-loop oracles
# =============================================================================


def naive_conv2d(x, w, b, stride, padding):
    batch, _, height, width = x.shape
    out_channels, _, k, _ = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for n in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (window * w[o]).sum() + b[o]
    return out


class TestOracles:

    @pytest.mark.parametrize("stride, padding", [(1, 1), (2, 0), (2, 1), (1, 0)])
    def test_conv2d(self, rng, stride, padding):
        x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = conv2d(Tensor(x), LayerParams(Tensor(w), Tensor(b)), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding), atol=1e-10)

    def test_linear(self, rng):
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
        expected = np.zeros((3, 4))
        for n in range(3):
            for m in range(4):
                expected[n, m] = sum(x[n, k] * w[m, k] for k in range(5)) + b[m]
        np.testing.assert_allclose(linear(Tensor(x), LayerParams(Tensor(w), Tensor(b))).data, expected, atol=1e-12)

    def test_maxpool2(self, rng):
        x = rng.normal(size=(2, 3, 6, 4))
        expected = np.zeros((2, 3, 3, 2))
        for n in range(2):
            for c in range(3):
                for i in range(3):
                    for j in range(2):
                        expected[n, c, i, j] = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        np.testing.assert_array_equal(maxpool2(Tensor(x)).data, expected)


# =============================================================================
# Losses
# =============================================================================

class TestLosses:

    def test_focal_gamma_zero_is_bce(self, rng):
        for _ in range(100):
            logits = Tensor(rng.normal(scale=3.0, size=(8, 5)))
            targets = rng.integers(0, 2, size=(8, 5))
            focal = focal_loss(logits, targets, gamma=0.0).item()
            bce = binary_cross_entropy(logits, targets).item()
            assert focal == pytest.approx(bce, abs=1e-6)

    def test_duplicated_batch_keeps_the_mean(self, rng):
        logits = rng.normal(size=(1, 5))
        targets = np.array([[1, 0, 0, 1, 0]])
        single = focal_loss(Tensor(logits), targets).item()
        doubled = focal_loss(Tensor(np.vstack([logits, logits])), np.vstack([targets, targets])).item()
        assert doubled == pytest.approx(single, abs=1e-12)

    def test_focal_gamma_zero_trains_like_bce(self, rng):
        x = rng.normal(size=(16, 6))
        targets = rng.integers(0, 2, size=(16, 5))
        start = rng.normal(size=(5, 6))
        runs = []
        for loss_fn in (lambda z: focal_loss(z, targets, gamma=0.0), lambda z: binary_cross_entropy(z, targets)):
            w = Tensor(start.copy(), requires_grad=True)
            optimizer = Adam([w], lr=0.05)
            losses = []
            for _ in range(20):
                optimizer.zero_grad()
                loss = loss_fn(linear(Tensor(x), LayerParams(w)))
                backward(loss)
                optimizer.step()
                losses.append(loss.item())
            runs.append((losses, w.data))
        np.testing.assert_allclose(runs[0][0], runs[1][0], atol=1e-6)
        np.testing.assert_allclose(runs[0][1], runs[1][1], atol=1e-6)

    def test_focal_analytic_value(self):
        loss = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1)), gamma=2.0)
        assert loss.item() == pytest.approx(0.25 * np.log(2), abs=1e-6)

    def test_focal_saturated_logits_stay_finite(self):
        logits = Tensor(np.array([[80.0, -80.0]]), requires_grad=True)
        loss = focal_loss(logits, np.array([[0, 1]]))
        backward(loss)
        assert np.isfinite(loss.item())
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_focal_rejects_bad_inputs(self):
        logits = Tensor(np.zeros((1, 2)))
        with pytest.raises(DataError):
            focal_loss(logits, np.array([[0.5, 1.0]]))
        with pytest.raises(DimensionError):
            focal_loss(logits, np.array([[1, 0, 1]]))
        with pytest.raises(ConfigurationError):
            focal_loss(logits, np.array([[1, 0]]), gamma=-1.0)


# =============================================================================
# Adam
# =============================================================================

class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        w = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
        w.grad = np.array([0.3, -2.0, 1e-3])
        optimizer = Adam([w], lr=0.01)
        optimizer.step()
        np.testing.assert_allclose(w.data, [0.99, -0.99, 0.49], atol=1e-6)
        assert optimizer.state.step_count == 1

    def test_ten_steps_follow_the_recurrence(self, rng):
        start = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(10)]
        w = Tensor(start.copy(), requires_grad=True)
        state = AdamState.zeros_like([w], lr=0.01)
        for grad in grads:
            adam_step([w], [grad], state)

        expected, m, v = start.copy(), np.zeros_like(start), np.zeros_like(start)
        for t, grad in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad ** 2
            expected -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w.data, expected, atol=1e-12)
        assert state.step_count == 10

    def test_missing_gradient_counts_as_zero(self):
        w = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.zeros_like([w], lr=0.1)
        adam_step([w], [None], state)
        np.testing.assert_array_equal(w.data, np.ones(2))

    def test_shape_mismatch(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step([w], [np.ones(3)], AdamState.zeros_like([w]))

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        optimizer = Adam([w], lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            backward(tensor_sum(mul(w, w)))
            optimizer.step()
        np.testing.assert_allclose(w.data, 0.0, atol=0.05)


# =============================================================================
# Checkpoint container
# =============================================================================

class TestBlobs:

    def test_round_trip(self, tmp_path):
        blobs = {
            "weight": np.arange(6, dtype=np.float32).reshape(2, 3),
            "scalar": np.array(2.5),
            "steps": np.array([1, 2, 3], dtype=np.int64),
        }
        save_blobs(tmp_path / "m.matn", {"kind": "test", "n": 1}, blobs)
        header, loaded = load_blobs(tmp_path / "m.matn")
        assert header == {"kind": "test", "n": 1}
        for name, array in blobs.items():
            assert loaded[name].dtype == array.dtype
            np.testing.assert_array_equal(loaded[name], array)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.matn"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(CheckpointFormatError):
            load_blobs(path)

    def test_unknown_version_names_both_versions(self, tmp_path):
        path = tmp_path / "future.matn"
        path.write_bytes(MAGIC + struct.pack("<I", 99) + struct.pack("<I", 2) + b"{}" + struct.pack("<I", 0))
        with pytest.raises(CheckpointVersionError) as excinfo:
            load_blobs(path)
        assert excinfo.value.found == 99
        assert excinfo.value.supported == 1

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.matn"
        save_blobs(path, {}, {"w": np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointFormatError):
            load_blobs(path)
