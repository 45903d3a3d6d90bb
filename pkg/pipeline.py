"""Dataset ingestion, face cropping and phase-aware sample construction."""
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu
from skimage.measure import label, regionprops
from tqdm import tqdm

from errors import ConfigurationError, DataError, DimensionError, ManifestError, UsageError
from optflow import (
    ApexResult,
    FarnebackParams,
    FeatureRecord,
    PHASE_TAGS,
    PhaseFeatures,
    detect_apex,
    extract_phase_features,
    read_feature_dump,
    resize_bilinear,
    write_feature_dump,
)

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Negative", "Positive", "Repression", "Surprise", "Others")
NUM_CLASSES = len(CLASS_NAMES)
VIEWS = ("left", "right")
SPLITS = ("train", "val", "test")
MIN_DUAL_WIDTH = 64
BBOX_EXPANSION = 0.10
MIN_FACE_FRACTION = 0.05
STD_FLOOR = 1e-6

FEATURES_FILE = "features.bin"
SAMPLES_FILE = "samples.jsonl"


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def clamp(self, height: int, width: int) -> "BBox":
        """Clip the box to a height x width frame."""
        x0 = min(max(self.x, 0), width)
        y0 = min(max(self.y, 0), height)
        x1 = min(max(self.x + self.w, 0), width)
        y1 = min(max(self.y + self.h, 0), height)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass
class SequenceRecord:
    """One view (or an unsplit dual-view composite) of an expression instance.

    Both views of an instance share sequence_id, subject_id, labels and split.
    `crop_box` is set once the frames have been cropped to the face region.
    """

    sequence_id: str
    subject_id: str
    view: str
    frame_paths: list[Path]
    labels: tuple[int, ...]
    split: str = "train"
    bboxes: Optional[list[BBox]] = None
    crop_box: Optional[BBox] = None
    frames: Optional[list[np.ndarray]] = field(default=None, compare=False, repr=False)

    @property
    def annotated(self) -> bool:
        return any(self.labels)

    def load_frames(self) -> list[np.ndarray]:
        if self.frames is None:
            self.frames = [read_image(path) for path in self.frame_paths]
        return self.frames


@dataclass
class TrainingSample:
    sequence_id: str
    subject_id: str
    view: str
    phase: str
    labels: tuple[int, ...]
    split: str
    feature: np.ndarray = field(repr=False, compare=False)
    apex: int = 0
    low_confidence: bool = False

    @property
    def key(self) -> tuple:
        return (self.sequence_id, self.view, PHASE_TAGS[self.phase])


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source_hash: str = ""
    sample_count: int = 0


@dataclass
class ViewExtraction:
    record: SequenceRecord
    apex: ApexResult
    phases: PhaseFeatures


# Images

def read_image(path: Union[str, Path]) -> np.ndarray:
    """Load an 8-bit image as grayscale values in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Frame not found: {path}")
    with Image.open(path) as image:
        return np.asarray(image.convert("L"), dtype=np.float64) / 255.0


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def quantize(image: np.ndarray) -> np.ndarray:
    """Round an image to the 8-bit grid it will have after a PGM round trip."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# Views and cropping

def split_views(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cut a composite dual-view frame at floor(width / 2)."""
    width = image.shape[1]
    if width < MIN_DUAL_WIDTH:
        raise DataError(f"dual-view frame must be at least {MIN_DUAL_WIDTH} pixels wide, got {width}")
    middle = width // 2
    return image[:, :middle], image[:, middle:]


def detect_bbox(frame: np.ndarray, provided: Optional[BBox] = None) -> BBox:
    """Face box for one frame.

    A provided box is passed through. Otherwise the bounding box of the
    largest component above Otsu's threshold, grown by 10%, is returned;
    frames without a component covering 5% of the image get the full frame.
    """
    height, width = frame.shape
    if provided is not None:
        return provided
    full_frame = BBox(0, 0, width, height)
    if np.ptp(frame) < 1e-6:
        return full_frame

    mask = frame > threshold_otsu(frame)
    regions = regionprops(label(mask))
    if not regions:
        return full_frame
    largest = max(regions, key=lambda region: region.area)
    if largest.area < MIN_FACE_FRACTION * frame.size:
        return full_frame

    min_row, min_col, max_row, max_col = largest.bbox
    grow_x = int(round((max_col - min_col) * BBOX_EXPANSION / 2))
    grow_y = int(round((max_row - min_row) * BBOX_EXPANSION / 2))
    box = BBox(min_col - grow_x, min_row - grow_y, max_col - min_col + 2 * grow_x, max_row - min_row + 2 * grow_y)
    return box.clamp(height, width)


def select_sequence_bbox(boxes: Sequence[BBox], frame_shape: Optional[tuple[int, int]] = None) -> BBox:
    """Largest-area box of a sequence; the earliest wins ties."""
    if not boxes:
        raise UsageError("select_sequence_bbox needs at least one box")
    best = boxes[0]
    for box in boxes[1:]:
        if box.area > best.area:
            best = box
    if frame_shape is not None:
        best = best.clamp(*frame_shape)
    return best


def crop_resize(frame: np.ndarray, box: BBox, side: Optional[int] = 224) -> np.ndarray:
    """Crop to box and resize the crop to side x side; side=None only crops."""
    box = box.clamp(*frame.shape)
    if box.area == 0:
        raise DataError(f"zero-area crop box {box}")
    crop = frame[box.y:box.y + box.h, box.x:box.x + box.w]
    if side is None:
        return crop.copy()
    return resize_bilinear(crop, side, side)


def _crop_view(record: SequenceRecord, frames: list[np.ndarray], view: str,
               provided: Optional[list[BBox]]) -> SequenceRecord:
    shape = frames[0].shape
    if any(frame.shape != shape for frame in frames):
        raise DimensionError(f"{record.sequence_id}: frames of one sequence differ in extent")
    boxes = [detect_bbox(frame, provided[i] if provided else None) for i, frame in enumerate(frames)]
    box = select_sequence_bbox(boxes, shape)
    logger.debug(f"{record.sequence_id}/{view}: crop box {box.to_list()}")
    cropped = [crop_resize(frame, box, side=None) for frame in frames]
    return replace(record, view=view, bboxes=None, crop_box=box, frames=cropped)


def preprocess_record(record: SequenceRecord) -> list[SequenceRecord]:
    """Split a dual-view record into views and crop each view with one box.

    Single-view records are cropped only; records that already carry a crop
    box are returned unchanged.
    """
    if record.crop_box is not None:
        record.load_frames()
        return [record]
    frames = record.load_frames()
    if len(frames) < 3:
        raise DataError(f"{record.sequence_id}: need at least 3 frames, got {len(frames)}")
    if record.view != "dual":
        return [_crop_view(record, frames, record.view, record.bboxes)]

    if record.bboxes:
        logger.warning(f"{record.sequence_id}: bounding boxes are ignored for dual-view composites")
    halves = [split_views(frame) for frame in frames]
    return [_crop_view(record, [h[i] for h in halves], view, None) for i, view in enumerate(VIEWS)]


# Manifest

def _parse_manifest_line(entry: dict, base: Path, line_number: int, path: Path) -> SequenceRecord:
    try:
        sequence_id = str(entry["sequence_id"])
        subject_id = str(entry["subject_id"])
        view = entry["view"]
        frames = entry["frames"]
        labels = entry["labels"]
    except KeyError as e:
        raise ManifestError(f"missing field {e}", line_number, str(path))
    split = entry.get("split", "train")

    if view not in VIEWS + ("dual",):
        raise ManifestError(f"unknown view '{view}'", line_number, str(path))
    if split not in SPLITS:
        raise ManifestError(f"unknown split '{split}'", line_number, str(path))
    if not isinstance(labels, list) or len(labels) != NUM_CLASSES or any(bit not in (0, 1) for bit in labels):
        raise ManifestError(f"labels must be {NUM_CLASSES} binary values, got {labels}", line_number, str(path))
    if not isinstance(frames, list) or len(frames) < 3:
        raise ManifestError("a sequence needs at least 3 frames", line_number, str(path))

    bboxes = None
    if entry.get("bboxes") is not None:
        if len(entry["bboxes"]) != len(frames):
            raise ManifestError("bboxes must give one box per frame", line_number, str(path))
        bboxes = [BBox(*map(int, box)) for box in entry["bboxes"]]
    crop_box = BBox(*map(int, entry["crop_box"])) if entry.get("crop_box") is not None else None

    frame_paths = [(base / frame).resolve() for frame in frames]
    for frame_path in frame_paths:
        if not frame_path.exists():
            raise FileNotFoundError(f"Frame listed at {path}:{line_number} not found: {frame_path}")
    return SequenceRecord(sequence_id, subject_id, view, frame_paths, tuple(int(bit) for bit in labels),
                          split, bboxes, crop_box)


def load_manifest(path: Union[str, Path]) -> list[SequenceRecord]:
    """Read a JSON Lines manifest. Frame paths are relative to the manifest."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", line_number, str(path))
            records.append(_parse_manifest_line(entry, base, line_number, path))
    logger.info(f"Loaded {len(records)} records from {path}")
    return records


def write_manifest(records: Sequence[SequenceRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            entry = {
                "sequence_id": record.sequence_id,
                "subject_id": record.subject_id,
                "view": record.view,
                "frames": [Path(p).resolve().relative_to(base).as_posix() for p in record.frame_paths],
                "labels": list(record.labels),
                "split": record.split,
            }
            if record.bboxes is not None:
                entry["bboxes"] = [box.to_list() for box in record.bboxes]
            if record.crop_box is not None:
                entry["crop_box"] = record.crop_box.to_list()
            f.write(json.dumps(entry) + "\n")


def write_preprocessed(records: Sequence[SequenceRecord], out_dir: Union[str, Path]) -> list[SequenceRecord]:
    """Write cropped frames as PGM plus a manifest; returns records pointing at them."""
    out_dir = Path(out_dir)
    written = []
    for record in records:
        frame_dir = out_dir / "frames" / f"{record.sequence_id}_{record.view}"
        paths = []
        for index, frame in enumerate(record.frames):
            frame_path = frame_dir / f"frame_{index:03d}.pgm"
            write_pgm(frame_path, frame)
            paths.append(frame_path.resolve())
        written.append(replace(record, frame_paths=paths))
    write_manifest(written, out_dir / "manifest.jsonl")
    return written


# Splits

def assign_splits(records: Sequence[SequenceRecord], val_fraction: float = 0.2, test_fraction: float = 0.2,
                  seed: int = 0, protocol: str = "subject") -> list[SequenceRecord]:
    """Assign train/val/test to whole subjects (default) or to whole instances."""
    if protocol not in ("subject", "random"):
        raise ConfigurationError(f"Unknown split protocol '{protocol}'")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ConfigurationError("split fractions must be non-negative and sum to less than 1")

    group_of = (lambda r: r.subject_id) if protocol == "subject" else (lambda r: r.sequence_id)
    groups = sorted({group_of(r) for r in records})
    order = [groups[i] for i in np.random.default_rng(seed).permutation(len(groups))]
    n_test = int(round(test_fraction * len(groups)))
    n_val = int(round(val_fraction * len(groups)))
    assignment = {}
    for position, group in enumerate(order):
        if position < n_test:
            assignment[group] = "test"
        elif position < n_test + n_val:
            assignment[group] = "val"
        else:
            assignment[group] = "train"
    return [replace(r, split=assignment[group_of(r)]) for r in records]


def check_subject_disjoint(records: Sequence[SequenceRecord]) -> None:
    seen: dict[str, str] = {}
    for record in records:
        previous = seen.setdefault(record.subject_id, record.split)
        if previous != record.split:
            raise DataError(f"subject {record.subject_id} appears in both {previous} and {record.split}")


# Feature extraction

def extract_view(record: SequenceRecord, params: FarnebackParams, border_exclusion: int = 2) -> ViewExtraction:
    frames = record.load_frames()
    apex = detect_apex(frames, params, border_exclusion)
    phases = extract_phase_features(frames, apex.index, params)
    return ViewExtraction(record=record, apex=apex, phases=phases)


def _extract_record(record: SequenceRecord, params: FarnebackParams, border_exclusion: int) -> list[ViewExtraction]:
    return [extract_view(view, params, border_exclusion) for view in preprocess_record(record)]


def extract_records(records: Sequence[SequenceRecord], params: FarnebackParams, border_exclusion: int = 2,
                    workers: int = 1) -> tuple[list[ViewExtraction], list[tuple[str, str]]]:
    """Extract phase features for every record.

    Failures are logged and collected as (sequence_id, message) pairs so the
    remaining records are still processed.

    Returns:
        Extractions in record order and the list of failures.
    """
    extractions: list[ViewExtraction] = []
    failures: list[tuple[str, str]] = []

    def collect(record: SequenceRecord, compute) -> None:
        try:
            extractions.extend(compute())
        except (DataError, OSError) as e:
            logger.error(f"Feature extraction failed for {record.sequence_id}: {e}")
            failures.append((record.sequence_id, str(e)))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_extract_record, record, params, border_exclusion) for record in records]
            for record, future in tqdm(list(zip(records, futures)), desc="extract", unit="seq"):
                collect(record, future.result)
    else:
        for record in tqdm(records, desc="extract", unit="seq"):
            collect(record, lambda: _extract_record(record, params, border_exclusion))
    return extractions, failures


# Samples

def build_samples(views: Sequence[ViewExtraction], mode: str, phase_policy: str = "both") -> list[TrainingSample]:
    """Samples of one expression instance.

    Train mode emits both phases per view (onset_apex only under that
    policy); eval mode emits onset_apex per view. A degenerate apex-offset
    phase is skipped with a warning.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"Unknown sample mode '{mode}'")
    if phase_policy not in ("both", "onset_apex"):
        raise ConfigurationError(f"Unknown phase policy '{phase_policy}'")
    samples = []
    for view in views:
        record = view.record

        def make(phase: str, feature: np.ndarray) -> TrainingSample:
            return TrainingSample(record.sequence_id, record.subject_id, record.view, phase, tuple(record.labels),
                                  record.split, feature, view.apex.index, view.apex.low_confidence)

        samples.append(make("onset_apex", view.phases.onset_apex))
        if mode == "train" and phase_policy == "both":
            if view.phases.apex_offset_degenerate:
                logger.warning(f"{record.sequence_id}/{record.view}: skipping degenerate apex-offset sample")
            else:
                samples.append(make("apex_offset", view.phases.apex_offset))
    return samples


def canonical_order(samples: Sequence[TrainingSample]) -> list[TrainingSample]:
    return sorted(samples, key=lambda s: s.key)


def select_samples(samples: Sequence[TrainingSample], split: str, mode: str,
                   phase_policy: str = "both") -> list[TrainingSample]:
    """Filter stored samples of one split to what build_samples emits for mode."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"Unknown sample mode '{mode}'")
    allowed = {"onset_apex"} if mode == "eval" or phase_policy == "onset_apex" else {"onset_apex", "apex_offset"}
    return canonical_order([s for s in samples if s.split == split and s.phase in allowed])


def save_feature_set(samples: Sequence[TrainingSample], directory: Union[str, Path]) -> None:
    """Write features.bin plus a samples.jsonl index in the same order."""
    directory = Path(directory)
    samples = canonical_order(samples)
    write_feature_dump(directory / FEATURES_FILE, (
        FeatureRecord(s.sequence_id, s.view, s.phase, s.apex, s.feature) for s in samples
    ))
    with open(directory / SAMPLES_FILE, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({
                "sequence_id": s.sequence_id,
                "subject_id": s.subject_id,
                "view": s.view,
                "phase": s.phase,
                "labels": list(s.labels),
                "split": s.split,
                "apex": s.apex,
                "low_confidence": s.low_confidence,
            }) + "\n")


def load_feature_set(directory: Union[str, Path], side: Optional[int] = None) -> list[TrainingSample]:
    """Read a saved feature set, resizing every feature to side x side if given."""
    directory = Path(directory)
    records = read_feature_dump(directory / FEATURES_FILE)
    with open(directory / SAMPLES_FILE, "r", encoding="utf-8") as f:
        index = [json.loads(line) for line in f if line.strip()]
    if len(index) != len(records):
        raise DataError(f"{directory}: {len(records)} features but {len(index)} index entries")

    samples = []
    for entry, record in zip(index, records):
        if (entry["sequence_id"], entry["view"], entry["phase"]) != (record.sequence_id, record.view, record.phase):
            raise DataError(f"{directory}: index and features disagree at {record.sequence_id}")
        feature = resize_feature(record.feature, side) if side else record.feature
        samples.append(TrainingSample(
            sequence_id=record.sequence_id,
            subject_id=entry["subject_id"],
            view=record.view,
            phase=record.phase,
            labels=tuple(entry["labels"]),
            split=entry["split"],
            feature=feature,
            apex=record.apex,
            low_confidence=entry.get("low_confidence", False),
        ))
    return samples


# Normalization

def resize_feature(feature: np.ndarray, side: int) -> np.ndarray:
    """Resize each channel to side x side; displacement values are not rescaled."""
    if feature.shape[1:] == (side, side):
        return feature
    return np.stack([resize_bilinear(channel, side, side) for channel in feature]).astype(feature.dtype)


def compute_norm_stats(samples: Sequence[TrainingSample]) -> NormStats:
    """Per-channel mean and std over training samples only (two passes)."""
    if not samples:
        raise DataError("cannot compute normalization statistics from no samples")
    leaked = [s for s in samples if s.split != "train"]
    if leaked:
        raise DataError(f"normalization statistics must use training samples only, got {leaked[0].split} data")

    channels = samples[0].feature.shape[0]
    count = sum(s.feature[0].size for s in samples)
    mean = sum(s.feature.astype(np.float64).sum(axis=(1, 2)) for s in samples) / count
    var = sum(((s.feature.astype(np.float64) - mean.reshape(channels, 1, 1)) ** 2).sum(axis=(1, 2))
              for s in samples) / count
    std = np.maximum(np.sqrt(var), STD_FLOOR)

    digest = hashlib.sha256()
    for s in canonical_order(samples):
        digest.update(f"{s.sequence_id}|{s.view}|{s.phase}\n".encode("utf-8"))
    return NormStats(mean=mean, std=std, source_hash=digest.hexdigest(), sample_count=len(samples))


def normalize(feature: np.ndarray, stats: NormStats) -> np.ndarray:
    return (feature - stats.mean.reshape(-1, 1, 1)) / stats.std.reshape(-1, 1, 1)


def samples_to_arrays(samples: Sequence[TrainingSample], stats: NormStats,
                      dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack normalized features (B, 3, S, S) and label bits (B, 5)."""
    if not samples:
        return np.zeros((0, 3, 0, 0), dtype=dtype), np.zeros((0, NUM_CLASSES), dtype=dtype)
    shape = samples[0].feature.shape
    if any(s.feature.shape != shape for s in samples):
        raise DimensionError("samples must share one feature shape; load them with a fixed side")
    features = np.stack([normalize(s.feature, stats) for s in samples]).astype(dtype)
    labels = np.array([s.labels for s in samples], dtype=dtype)
    return features, labels


def save_norm_stats(stats: NormStats, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps({
        "mean": [float(m) for m in stats.mean],
        "std": [float(s) for s in stats.std],
        "source_hash": stats.source_hash,
        "sample_count": stats.sample_count,
    }, indent=2) + "\n", encoding="utf-8")


def load_norm_stats(path: Union[str, Path]) -> NormStats:
    try:
        entry = json.loads(Path(path).read_text(encoding="utf-8"))
        return NormStats(np.array(entry["mean"]), np.array(entry["std"]), entry["source_hash"], entry["sample_count"])
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{path}: malformed normalization statistics ({e})")
