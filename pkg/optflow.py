"""Dense Farneback optical flow, motion intensity and apex-frame detection.

Images are 2-D float arrays with values in [0, 1]. Flow fields follow the
convention prev(y, x) ≈ next(y + v, x + u): u is the horizontal and v the
vertical displacement in pixels.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import correlate1d, map_coordinates, uniform_filter

from errors import ConfigurationError, DataError, DimensionError, NumericError

logger = logging.getLogger(__name__)

MIN_FLOW_EXTENT = 32
BORDER_WEIGHTS = np.array([0.14, 0.14, 0.4472, 0.8755, 1.0])
DETERMINANT_REGULARIZER = 1e-3
INTENSITY_SCALE = 255.0
LOW_MOTION_PER_PIXEL = 1e-3

VIEW_TAGS = {"left": 0, "right": 1}
PHASE_TAGS = {"onset_apex": 0, "apex_offset": 1}
_VIEW_NAMES = {tag: name for name, tag in VIEW_TAGS.items()}
_PHASE_NAMES = {tag: name for name, tag in PHASE_TAGS.items()}
_RECORD_HEADER = struct.Struct("<BBIII")


@dataclass(frozen=True)
class FarnebackParams:
    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self):
        if not 0 < self.pyramid_scale < 1:
            raise ConfigurationError(f"pyramid_scale must be in (0, 1), got {self.pyramid_scale}")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ConfigurationError(f"poly_n must be odd and >= 3, got {self.poly_n}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigurationError(f"window_size must be odd, got {self.window_size}")
        if self.levels < 0 or self.iterations < 1:
            raise ConfigurationError("levels must be >= 0 and iterations >= 1")
        if self.poly_sigma <= 0:
            raise ConfigurationError(f"poly_sigma must be positive, got {self.poly_sigma}")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(f"flow components must be equal 2-D arrays, got {self.u.shape} and {self.v.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def __neg__(self) -> "FlowField":
        return FlowField(-self.u, -self.v)


@dataclass
class PolyCoefficients:
    """Per-pixel coefficients of f(x) ≈ xᵀAx + bᵀx + c with A = [[axx, axy], [axy, ayy]]."""

    axx: np.ndarray
    ayy: np.ndarray
    axy: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    c: np.ndarray
    degenerate: np.ndarray


@dataclass
class ApexResult:
    index: int
    intensities: np.ndarray
    low_confidence: bool
    threshold: float


@dataclass
class PhaseFeatures:
    onset_apex: np.ndarray
    apex_offset: np.ndarray
    apex_offset_degenerate: bool = False


@dataclass
class FeatureRecord:
    """One motion feature (3, H, W) as stored in a feature dump."""

    sequence_id: str
    view: str
    phase: str
    apex: int
    feature: np.ndarray = field(repr=False)


def _check_image(image: np.ndarray, name: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D grayscale image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise NumericError("non-finite pixel values", where=name)
    return image


# Polynomial expansion

def applicability_weights(poly_n: int, poly_sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized 1-D Gaussian applicability over offsets -poly_n..poly_n."""
    offsets = np.arange(-poly_n, poly_n + 1, dtype=np.float64)
    g = np.exp(-offsets ** 2 / (2 * poly_sigma ** 2))
    return offsets, g / g.sum()


def _normal_matrix(offsets: np.ndarray, g: np.ndarray) -> np.ndarray:
    xs, ys = np.meshgrid(offsets, offsets)
    weights = np.outer(g, g).ravel()
    basis = np.stack([np.ones_like(xs), xs, ys, xs ** 2, ys ** 2, xs * ys]).reshape(6, -1)
    return (basis * weights) @ basis.T


def poly_expansion(image: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.2) -> PolyCoefficients:
    """Fit a quadratic to every pixel's Gaussian-weighted neighborhood.

    Borders are handled by edge replication. If the normal equations are
    singular the fit falls back to a zero quadratic term and image gradients,
    with every pixel flagged in `degenerate`.
    """
    image = _check_image(image, "poly_expansion")
    if min(image.shape) < poly_n:
        raise DimensionError(f"image {image.shape} is smaller than poly_n={poly_n}")
    offsets, g = applicability_weights(poly_n, poly_sigma)
    normal = _normal_matrix(offsets, g)

    if np.linalg.cond(normal) > 1e12:
        logger.warning(f"Singular polynomial expansion for poly_n={poly_n}, sigma={poly_sigma}; using gradients")
        grad_y, grad_x = np.gradient(image)
        zeros = np.zeros_like(image)
        return PolyCoefficients(zeros, zeros.copy(), zeros.copy(), grad_x, grad_y, image.copy(),
                                np.ones(image.shape, dtype=bool))

    def project(x_power: int, y_power: int) -> np.ndarray:
        rows = correlate1d(image, g * offsets ** y_power, axis=0, mode="nearest")
        return correlate1d(rows, g * offsets ** x_power, axis=1, mode="nearest")

    moments = np.stack([project(0, 0), project(1, 0), project(0, 1), project(2, 0), project(0, 2), project(1, 1)])
    coeffs = np.tensordot(np.linalg.inv(normal), moments, axes=([1], [0]))
    return PolyCoefficients(
        axx=coeffs[3],
        ayy=coeffs[4],
        axy=coeffs[5] / 2,
        bx=coeffs[1],
        by=coeffs[2],
        c=coeffs[0],
        degenerate=np.zeros(image.shape, dtype=bool),
    )


# Pyramid

def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize that maps pixel centers onto pixel centers."""
    in_h, in_w = image.shape
    if height < 1 or width < 1:
        raise DimensionError(f"cannot resize to {height}x{width}")
    rows = (np.arange(height) + 0.5) * (in_h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (in_w / width) - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(image, [grid_r, grid_c], order=1, mode="nearest")


def _gaussian_5tap(sigma: float) -> np.ndarray:
    taps = np.arange(-2, 3, dtype=np.float64)
    kernel = np.exp(-taps ** 2 / (2 * sigma ** 2))
    return kernel / kernel.sum()


def build_pyramid(image: np.ndarray, levels: int, scale: float) -> list[np.ndarray]:
    """Images finest first; each coarse level blurs the source then resizes it."""
    image = _check_image(image, "build_pyramid")
    pyramid = [image]
    factor = 1.0
    for _ in range(levels):
        factor *= scale
        height = int(round(image.shape[0] * factor))
        width = int(round(image.shape[1] * factor))
        if height < MIN_FLOW_EXTENT or width < MIN_FLOW_EXTENT:
            break
        kernel = _gaussian_5tap((1.0 / factor - 1.0) * 0.5)
        blurred = correlate1d(correlate1d(image, kernel, axis=0, mode="nearest"), kernel, axis=1, mode="nearest")
        pyramid.append(resize_bilinear(blurred, height, width))
    return pyramid


# Flow estimation

def _border_weight_map(height: int, width: int) -> np.ndarray:
    ramp = len(BORDER_WEIGHTS)

    def axis_weights(extent: int) -> np.ndarray:
        distance = np.minimum(np.arange(extent), np.arange(extent)[::-1])
        return np.where(distance < ramp, BORDER_WEIGHTS[np.minimum(distance, ramp - 1)], 1.0)

    return np.outer(axis_weights(height), axis_weights(width))


def _update_matrices(r0: PolyCoefficients, r1: PolyCoefficients, u: np.ndarray, v: np.ndarray,
                     border: np.ndarray) -> np.ndarray:
    height, width = u.shape
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    target_r = rows + v
    target_c = cols + u
    inside = (target_r >= 0) & (target_r <= height - 1) & (target_c >= 0) & (target_c <= width - 1)

    def sample(channel: np.ndarray) -> np.ndarray:
        return map_coordinates(channel, [target_r, target_c], order=1, mode="nearest")

    a11 = np.where(inside, (r0.axx + sample(r1.axx)) / 2, r0.axx)
    a22 = np.where(inside, (r0.ayy + sample(r1.ayy)) / 2, r0.ayy)
    a12 = np.where(inside, (r0.axy + sample(r1.axy)) / 2, r0.axy)
    db_x = np.where(inside, (r0.bx - sample(r1.bx)) / 2 + a11 * u + a12 * v, 0.0)
    db_y = np.where(inside, (r0.by - sample(r1.by)) / 2 + a12 * u + a22 * v, 0.0)

    m = np.stack([
        a11 * a11 + a12 * a12,
        a12 * (a11 + a22),
        a12 * a12 + a22 * a22,
        a11 * db_x + a12 * db_y,
        a12 * db_x + a22 * db_y,
    ])
    return m * border


def _solve_flow(m: np.ndarray, window_size: int) -> tuple[np.ndarray, np.ndarray]:
    g11, g12, g22, h1, h2 = (uniform_filter(channel, size=window_size, mode="nearest") for channel in m)
    inv_det = 1.0 / (g11 * g22 - g12 * g12 + DETERMINANT_REGULARIZER)
    return (g22 * h1 - g12 * h2) * inv_det, (g11 * h2 - g12 * h1) * inv_det


def farneback_flow(prev: np.ndarray, next: np.ndarray, params: Optional[FarnebackParams] = None) -> FlowField:
    """Coarse-to-fine dense flow from prev to next."""
    params = params or FarnebackParams()
    prev = _check_image(prev, "farneback_flow.prev")
    next = _check_image(next, "farneback_flow.next")
    if prev.shape != next.shape:
        raise DimensionError(f"flow needs equal extents, got {prev.shape} and {next.shape}")
    if min(prev.shape) < MIN_FLOW_EXTENT:
        raise DimensionError(f"flow needs extents >= {MIN_FLOW_EXTENT}, got {prev.shape}")

    prev_pyramid = build_pyramid(prev * INTENSITY_SCALE, params.levels, params.pyramid_scale)
    next_pyramid = build_pyramid(next * INTENSITY_SCALE, params.levels, params.pyramid_scale)
    logger.debug(f"Flow pyramid levels: {[p.shape for p in prev_pyramid]}")

    u = v = None
    for level in range(len(prev_pyramid) - 1, -1, -1):
        height, width = prev_pyramid[level].shape
        if u is None:
            u = np.zeros((height, width))
            v = np.zeros((height, width))
        else:
            coarse_h, coarse_w = u.shape
            u = resize_bilinear(u, height, width) * (width / coarse_w)
            v = resize_bilinear(v, height, width) * (height / coarse_h)
        r0 = poly_expansion(prev_pyramid[level], params.poly_n, params.poly_sigma)
        r1 = poly_expansion(next_pyramid[level], params.poly_n, params.poly_sigma)
        border = _border_weight_map(height, width)
        for _ in range(params.iterations):
            m = _update_matrices(r0, r1, u, v, border)
            u, v = _solve_flow(m, params.window_size)

    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NumericError("non-finite displacement", where="farneback_flow")
    return FlowField(u, v)


# Magnitude and intensity

def flow_magnitude(flow: FlowField) -> np.ndarray:
    return np.hypot(flow.u, flow.v)


def motion_intensity(flow: FlowField, border_exclusion: int = 0) -> float:
    """Sum of flow magnitudes, optionally ignoring a frame of `border_exclusion` pixels."""
    magnitude = flow_magnitude(flow)
    if border_exclusion > 0:
        magnitude = magnitude[border_exclusion:-border_exclusion, border_exclusion:-border_exclusion]
    return float(magnitude.sum())


def flow_endpoint_error(estimated: FlowField, truth: Union[FlowField, tuple[float, float]], border: int = 0) -> float:
    """Mean endpoint error over the interior; truth may be a constant (u, v)."""
    if isinstance(truth, FlowField):
        true_u, true_v = truth.u, truth.v
    else:
        true_u = np.full(estimated.shape, float(truth[0]))
        true_v = np.full(estimated.shape, float(truth[1]))
    error = np.hypot(estimated.u - true_u, estimated.v - true_v)
    if border > 0:
        error = error[border:-border, border:-border]
    return float(error.mean())


def detect_apex(frames: Sequence[np.ndarray], params: Optional[FarnebackParams] = None,
                border_exclusion: int = 2) -> ApexResult:
    """Frame with the largest motion intensity relative to frame 0.

    Ties go to the earliest frame. A sequence whose largest intensity stays
    below 1e-3 per pixel is flagged as low confidence but still resolved.
    """
    params = params or FarnebackParams()
    if len(frames) < 3:
        raise DataError(f"apex detection needs at least 3 frames, got {len(frames)}")
    onset = frames[0]
    intensities = np.zeros(len(frames))
    for index in range(1, len(frames)):
        intensities[index] = motion_intensity(farneback_flow(onset, frames[index], params), border_exclusion)

    apex = 1 + int(np.argmax(intensities[1:]))
    height, width = np.shape(onset)
    interior = max(height - 2 * border_exclusion, 0) * max(width - 2 * border_exclusion, 0)
    threshold = LOW_MOTION_PER_PIXEL * interior
    low_confidence = bool(intensities[apex] < threshold)
    if low_confidence:
        logger.warning(f"Low-confidence apex {apex}: max intensity {intensities[apex]:.4f} below {threshold:.4f}")
    return ApexResult(index=apex, intensities=intensities, low_confidence=low_confidence, threshold=threshold)


def _stack_feature(flow: FlowField) -> np.ndarray:
    return np.stack([flow.u, flow.v, flow_magnitude(flow)]).astype(np.float32)


def extract_phase_features(frames: Sequence[np.ndarray], apex: int,
                           params: Optional[FarnebackParams] = None) -> PhaseFeatures:
    """(u, v, m) stacks for onset→apex and apex→last-frame motion."""
    params = params or FarnebackParams()
    if not 1 <= apex <= len(frames) - 1:
        raise DataError(f"apex {apex} outside [1, {len(frames) - 1}]")
    onset_apex = _stack_feature(farneback_flow(frames[0], frames[apex], params))
    if apex == len(frames) - 1:
        logger.warning(f"Apex at last frame {apex}; apex-offset feature is zero")
        return PhaseFeatures(onset_apex, np.zeros_like(onset_apex), apex_offset_degenerate=True)
    apex_offset = _stack_feature(farneback_flow(frames[apex], frames[-1], params))
    return PhaseFeatures(onset_apex, apex_offset)


# Feature dumps

def _write_record(stream: BinaryIO, record: FeatureRecord) -> None:
    feature = np.asarray(record.feature, dtype="<f4")
    if feature.ndim != 3 or feature.shape[0] != 3:
        raise DimensionError(f"feature for {record.sequence_id} must be (3, H, W), got {feature.shape}")
    name = record.sequence_id.encode("utf-8")
    stream.write(struct.pack("<H", len(name)))
    stream.write(name)
    stream.write(_RECORD_HEADER.pack(VIEW_TAGS[record.view], PHASE_TAGS[record.phase], record.apex,
                                     feature.shape[1], feature.shape[2]))
    stream.write(np.ascontiguousarray(feature).tobytes())


def write_feature_dump(path: Union[str, Path], records: Iterable[FeatureRecord]) -> int:
    """Write feature records back to back. Returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "wb") as stream:
        for record in records:
            _write_record(stream, record)
            count += 1
    logger.info(f"Wrote {count} feature records to {path}")
    return count


def read_feature_dump(path: Union[str, Path]) -> list[FeatureRecord]:
    path = Path(path)
    raw = path.read_bytes()
    records = []
    offset = 0
    while offset < len(raw):
        try:
            (name_length,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            sequence_id = raw[offset:offset + name_length].decode("utf-8")
            offset += name_length
            view_tag, phase_tag, apex, height, width = _RECORD_HEADER.unpack_from(raw, offset)
            offset += _RECORD_HEADER.size
            size = 3 * height * width * 4
            if offset + size > len(raw):
                raise struct.error("truncated feature values")
            feature = np.frombuffer(raw, dtype="<f4", count=3 * height * width, offset=offset)
            view, phase = _VIEW_NAMES[view_tag], _PHASE_NAMES[phase_tag]
            offset += size
        except (struct.error, UnicodeDecodeError, KeyError) as e:
            raise DataError(f"{path}: corrupt feature dump at byte {offset}: {e}")
        records.append(FeatureRecord(
            sequence_id=sequence_id,
            view=view,
            phase=phase,
            apex=apex,
            feature=feature.astype(np.float32).reshape(3, height, width),
        ))
    return records


def export_feature_text(path: Union[str, Path], records: Iterable[FeatureRecord]) -> None:
    """Readable dump: a header line per record, then one line per channel row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for record in records:
            _, height, width = record.feature.shape
            handle.write(f"# {record.sequence_id} {record.view} {record.phase} {record.apex} {height} {width}\n")
            for channel in record.feature:
                for row in channel:
                    handle.write(" ".join(f"{value:.6g}" for value in row) + "\n")
