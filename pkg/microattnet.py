"""Triple-stream MicroAttNet.

The horizontal, vertical and magnitude flow channels each pass through two
convolution blocks. Fusion Attention reweights the three streams after each
block, an SE block gates the magnitude stream, and a fully connected head
maps the concatenated streams to five independent class logits. See
ARCHITECTURE.md for the layer table and parameter count.
"""
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from errors import CheckpointFormatError, ConfigurationError, DimensionError, NumericError, UsageError
from tensorgrad import (
    BatchNormParams,
    GradcheckResult,
    LayerParams,
    Tensor,
    batchnorm,
    concat,
    conv2d,
    dropout,
    flatten,
    focal_loss,
    global_avg_pool,
    gradcheck,
    linear,
    load_blobs,
    maxpool2,
    mul,
    no_grad,
    relu,
    reshape,
    resolve_dtype,
    save_blobs,
    sigmoid,
    slice_axis,
    softmax,
)

logger = logging.getLogger(__name__)

STREAMS = ("h", "v", "m")
DEFAULT_THRESHOLD = 0.20


@dataclass
class ModelConfig:
    input_side: int = 224
    c1: int = 16
    c2: int = 32
    kernel: int = 3
    padding: int = 1
    se_reduction: int = 4
    head_hidden: int = 128
    dropout_conv: float = 0.25
    dropout_head: float = 0.5
    num_classes: int = 5
    fusion_attention: bool = True
    se_block: bool = True
    precision: str = "f32"

    def __post_init__(self):
        if self.input_side < 4 or self.input_side % 4:
            raise ConfigurationError(f"input_side must be a positive multiple of 4, got {self.input_side}")
        if self.kernel % 2 == 0 or self.padding != self.kernel // 2:
            raise ConfigurationError(f"kernel must be odd with padding kernel // 2, got {self.kernel}/{self.padding}")
        if self.c2 % self.se_reduction:
            raise ConfigurationError(f"se_reduction {self.se_reduction} must divide c2={self.c2}")
        if min(self.c1, self.c2, self.head_hidden, self.num_classes) < 1:
            raise ConfigurationError("layer widths must be positive")
        for p in (self.dropout_conv, self.dropout_head):
            if not 0 <= p < 1:
                raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        resolve_dtype(self.precision)

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    @property
    def flat_features(self) -> int:
        return len(STREAMS) * self.c2 * (self.input_side // 4) ** 2


@dataclass
class ModelState:
    config: ModelConfig
    layers: dict[str, LayerParams]
    norms: dict[str, BatchNormParams]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for key, layer in self.layers.items():
            named.append((f"{key}.weight", layer.weight))
            if layer.bias is not None:
                named.append((f"{key}.bias", layer.bias))
        for key, norm in self.norms.items():
            named.append((f"{key}.gamma", norm.gamma))
            named.append((f"{key}.beta", norm.beta))
        return named

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]


@dataclass
class AttentionTrace:
    """Stream weights (B, 3) per attention stage, in stage order."""

    stages: list[np.ndarray] = field(default_factory=list)


@dataclass
class Prediction:
    logits: Tensor
    probabilities: np.ndarray
    trace: AttentionTrace
    se_gates: Optional[np.ndarray] = None


def _layer_shapes(config: ModelConfig) -> tuple[dict[str, tuple], dict[str, int]]:
    k = config.kernel
    layers: dict[str, tuple] = {}
    norms: dict[str, int] = {}
    for stream in STREAMS:
        layers[f"{stream}.conv1"] = (config.c1, 1, k, k)
        norms[f"{stream}.bn1"] = config.c1
        layers[f"{stream}.conv2"] = (config.c2, config.c1, k, k)
        norms[f"{stream}.bn2"] = config.c2
    if config.fusion_attention:
        for stage, channels in (("att1", config.c1), ("att2", config.c2)):
            layers[f"{stage}.hidden"] = (channels, len(STREAMS) * channels)
            layers[f"{stage}.logits"] = (len(STREAMS), channels)
    if config.se_block:
        squeezed = config.c2 // config.se_reduction
        layers["se.squeeze"] = (squeezed, config.c2)
        layers["se.excite"] = (config.c2, squeezed)
    layers["head.fc"] = (config.head_hidden, config.flat_features)
    norms["head.bn"] = config.head_hidden
    layers["head.out"] = (config.num_classes, config.head_hidden)
    return layers, norms


def build(config: ModelConfig, seed: int = 0) -> ModelState:
    """Fresh model: He fan-in normal weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    layer_shapes, norm_widths = _layer_shapes(config)
    layers = {}
    for key, shape in layer_shapes.items():
        fan_in = int(np.prod(shape[1:]))
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        layers[key] = LayerParams(
            weight=Tensor(weight, requires_grad=True, name=f"{key}.weight"),
            bias=Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True, name=f"{key}.bias"),
        )
    norms = {key: BatchNormParams.create(width, dtype=dtype, name=key) for key, width in norm_widths.items()}
    state = ModelState(config=config, layers=layers, norms=norms)
    logger.debug(f"Built MicroAttNet with {sum(p.data.size for p in state.parameters())} parameters (seed {seed})")
    return state


def parameter_count(config: ModelConfig) -> int:
    """Learnable parameters, from the layer table in ARCHITECTURE.md."""
    k2 = config.kernel ** 2
    stream = (k2 * config.c1 + config.c1) + 2 * config.c1 + (k2 * config.c1 * config.c2 + config.c2) + 2 * config.c2
    total = len(STREAMS) * stream
    if config.fusion_attention:
        for channels in (config.c1, config.c2):
            total += (3 * channels * channels + channels) + (3 * channels + 3)
    if config.se_block:
        squeezed = config.c2 // config.se_reduction
        total += (config.c2 * squeezed + squeezed) + (squeezed * config.c2 + config.c2)
    hidden = config.head_hidden
    total += (config.flat_features * hidden + hidden) + 2 * hidden + (hidden * config.num_classes + config.num_classes)
    return total


def _guard(layer: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NumericError as e:
        raise NumericError(f"non-finite activations in {e.where or 'operation'}", where=layer) from e


def fusion_attention(features: Sequence[Tensor], hidden: LayerParams,
                     logits: LayerParams) -> tuple[list[Tensor], np.ndarray]:
    """Scale each stream by a per-sample softmax weight computed from all three.

    Returns:
        The scaled streams and the weights as a (B, 3) array.
    """
    if len(features) != len(STREAMS) or any(f.shape != features[0].shape for f in features):
        raise DimensionError(f"fusion_attention needs three equal-shaped streams, got {[f.shape for f in features]}")
    batch = features[0].shape[0]
    descriptor = concat([global_avg_pool(f) for f in features], axis=1)
    alpha = softmax(linear(relu(linear(descriptor, hidden)), logits))
    scaled = [mul(f, reshape(slice_axis(alpha, k, k + 1, axis=1), (batch, 1, 1, 1))) for k, f in enumerate(features)]
    return scaled, alpha.data.copy()


def se_block(feature: Tensor, squeeze: LayerParams, excite: LayerParams) -> tuple[Tensor, np.ndarray]:
    """Squeeze-and-excitation gate over channels; returns the gated map and the (B, C) gates."""
    if feature.ndim != 4 or squeeze.weight.shape[1] != feature.shape[1]:
        raise DimensionError(f"se_block weight {squeeze.weight.shape} does not fit feature map {feature.shape}")
    batch, channels = feature.shape[:2]
    gates = sigmoid(linear(relu(linear(global_avg_pool(feature), squeeze)), excite))
    return mul(feature, reshape(gates, (batch, channels, 1, 1))), gates.data.copy()


def _conv_block(x: Tensor, state: ModelState, stream: str, index: int, training: bool,
                rng: Optional[np.random.Generator]) -> Tensor:
    prefix = f"{stream}.conv{index}"
    x = _guard(prefix, conv2d, x, state.layers[prefix], 1, state.config.padding)
    x = _guard(f"{stream}.bn{index}", batchnorm, x, state.norms[f"{stream}.bn{index}"], training)
    x = relu(x)
    x = dropout(x, state.config.dropout_conv, training, rng)
    return _guard(f"{stream}.pool{index}", maxpool2, x)


def forward(batch: Union[Tensor, np.ndarray], state: ModelState, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Prediction:
    """Run the network on a (B, 3, S, S) batch of normalized flow features."""
    config = state.config
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=config.dtype))
    side = config.input_side
    if batch.ndim != 4 or batch.shape[1:] != (len(STREAMS), side, side):
        raise DimensionError(f"expected input (B, 3, {side}, {side}), got {batch.shape}")
    if not np.all(np.isfinite(batch.data)):
        raise NumericError("non-finite input features", where="input")

    trace = AttentionTrace()
    streams = [slice_axis(batch, k, k + 1, axis=1) for k in range(len(STREAMS))]
    for index in (1, 2):
        streams = [_conv_block(x, state, stream, index, training, rng) for x, stream in zip(streams, STREAMS)]
        if config.fusion_attention:
            stage = f"att{index}"
            streams, alpha = _guard(stage, fusion_attention, streams, state.layers[f"{stage}.hidden"],
                                    state.layers[f"{stage}.logits"])
            trace.stages.append(alpha)

    gates = None
    if config.se_block:
        streams[2], gates = _guard("se", se_block, streams[2], state.layers["se.squeeze"], state.layers["se.excite"])

    v_final = concat([flatten(x) for x in streams], axis=1)
    hidden = _guard("head.fc", linear, v_final, state.layers["head.fc"])
    hidden = _guard("head.bn", batchnorm, hidden, state.norms["head.bn"], training)
    hidden = dropout(relu(hidden), config.dropout_head, training, rng)
    logits = _guard("head.out", linear, hidden, state.layers["head.out"])
    return Prediction(logits=logits, probabilities=expit(logits.data), trace=trace, se_gates=gates)


def predict_probabilities(state: ModelState, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode sigmoid probabilities (N, classes), batch by batch."""
    outputs = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            outputs.append(forward(features[start:start + batch_size], state, training=False).probabilities)
    if not outputs:
        return np.zeros((0, state.config.num_classes))
    return np.concatenate(outputs)


def decide_bits(probabilities: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Set every bit at or above threshold; rows with none get their argmax bit."""
    if not 0 < threshold < 1:
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")
    probabilities = np.atleast_2d(probabilities)
    bits = (probabilities >= threshold).astype(int)
    empty = bits.sum(axis=1) == 0
    bits[empty, np.argmax(probabilities[empty], axis=1)] = 1
    return bits


def predict_multilabel(probability_sets: Sequence[np.ndarray], threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """One 5-bit prediction per sequence from the mean of its samples' probabilities."""
    if len(probability_sets) == 0 or any(len(np.atleast_2d(p)) == 0 for p in probability_sets):
        raise UsageError("predict_multilabel needs at least one sample per sequence")
    means = np.stack([np.atleast_2d(p).mean(axis=0) for p in probability_sets])
    return decide_bits(means, threshold)


def miniature_config() -> ModelConfig:
    """Small 64-bit geometry with dropout off, used for gradient verification."""
    return ModelConfig(input_side=16, c1=4, c2=8, head_hidden=16, dropout_conv=0.0, dropout_head=0.0,
                       precision="f64")


def check_model_gradients(config: Optional[ModelConfig] = None, batch: int = 2, seed: int = 0,
                          max_coords: Optional[int] = None, floor: float = 1e-8) -> GradcheckResult:
    """Finite-difference check of the focal loss through the whole eval-mode network.

    Every coordinate of every parameter tensor and of the input batch is
    checked unless max_coords limits each tensor to that many seeded
    coordinates.
    """
    config = config or miniature_config()
    if config.precision != "f64":
        logger.warning("Gradient check in 32-bit precision; expect relative errors near 1e-3")
    rng = np.random.default_rng(seed)
    state = build(config, seed=seed)
    inputs = Tensor(rng.normal(size=(batch, len(STREAMS), config.input_side, config.input_side)).astype(config.dtype))
    targets = rng.integers(0, 2, size=(batch, config.num_classes))

    def loss(*_):
        return focal_loss(forward(inputs, state, training=False).logits, targets)

    result = gradcheck(loss, [inputs] + state.parameters(), max_coords=max_coords, seed=seed, floor=floor)
    logger.info(f"Model gradient check: {result.checked} coordinates, max relative error {result.max_rel_error:.3e}")
    return result


# Persistence

def state_blobs(state: ModelState) -> dict[str, np.ndarray]:
    blobs = {name: tensor.data for name, tensor in state.named_parameters()}
    for key, norm in state.norms.items():
        blobs[f"{key}.running_mean"] = norm.running_mean
        blobs[f"{key}.running_var"] = norm.running_var
    return blobs


def state_from_blobs(config: ModelConfig, blobs: dict[str, np.ndarray]) -> ModelState:
    state = build(config, seed=0)
    expected = state_blobs(state)
    missing = sorted(set(expected) - set(blobs))
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, tensor in state.named_parameters():
        if blobs[name].shape != tensor.shape:
            raise CheckpointFormatError(f"'{name}' has shape {blobs[name].shape}, model expects {tensor.shape}")
        tensor.data = blobs[name].astype(config.dtype, copy=True)
    for key, norm in state.norms.items():
        norm.running_mean = blobs[f"{key}.running_mean"].astype(config.dtype, copy=True)
        norm.running_var = blobs[f"{key}.running_var"].astype(config.dtype, copy=True)
    return state


def clone_state(state: ModelState) -> ModelState:
    return state_from_blobs(state.config, state_blobs(state))


def model_header(config: ModelConfig) -> dict:
    return {"kind": "microattnet", "model_config": asdict(config)}


def save_model(state: ModelState, path: Union[str, Path], metadata: Optional[dict] = None) -> None:
    """Write parameters and running statistics; metadata joins the JSON header."""
    header = {**(metadata or {}), **model_header(state.config)}
    save_blobs(path, header, state_blobs(state))
    logger.info(f"Saved model to {path}")


def load_model(path: Union[str, Path]) -> tuple[ModelState, dict]:
    """The saved state and the full header, metadata included."""
    header, blobs = load_blobs(path)
    if "model_config" not in header:
        raise CheckpointFormatError(f"{path}: checkpoint has no model configuration block")
    return state_from_blobs(ModelConfig(**header["model_config"]), blobs), header


def parameter_hash(state: ModelState) -> str:
    """SHA-256 over names, shapes and bytes of parameters and running statistics."""
    digest = hashlib.sha256()
    for name, array in state_blobs(state).items():
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def export_attention_trace(trace: AttentionTrace, path: Union[str, Path],
                           sample_ids: Optional[Sequence[str]] = None) -> None:
    """One line per sample and stage: sample, stage, α_h, α_v, α_m."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("sample\tstage\talpha_h\talpha_v\talpha_m\n")
        for stage_index, weights in enumerate(trace.stages, start=1):
            for row, alpha in enumerate(weights):
                sample = sample_ids[row] if sample_ids is not None else str(row)
                f.write(f"{sample}\tatt{stage_index}\t" + "\t".join(f"{a:.6f}" for a in alpha) + "\n")
