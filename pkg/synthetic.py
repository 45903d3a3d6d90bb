"""Synthetic dual-view micro-expression sequences with known apex and labels.

Each instance renders a textured face, moves one or two facial regions
along a bell-shaped amplitude profile and places the mirrored face beside
it so every composite frame carries both views. The apex frame, the motif
classes and the displacement of every frame are known exactly.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from errors import ConfigurationError
from evaluation import uf1
from microattnet import decide_bits
from optflow import FlowField, resize_bilinear
from pipeline import NUM_CLASSES, SequenceRecord, assign_splits, quantize, write_manifest, write_pgm

logger = logging.getLogger(__name__)

MIN_PEAK_DISPLACEMENT = 0.5
MOTIF_SIGMA = 0.09
BACKGROUND = 0.08
FACE_CEILING = 0.75

GROUND_TRUTH_HEADERS = ["sequence_id", "apex", "classes", "peak_amplitude", "bell_width", "frame_count"]

# (row, col) anchor in view-relative coordinates and (dy, dx) direction per anchor.
MOTIFS = {
    0: [((0.33, 0.35), (1.0, 0.0)), ((0.33, 0.65), (1.0, 0.0))],
    1: [((0.72, 0.38), (-0.7, -0.7)), ((0.72, 0.62), (-0.7, 0.7))],
    2: [((0.72, 0.38), (0.0, 1.0)), ((0.72, 0.62), (0.0, -1.0))],
    3: [((0.33, 0.35), (-0.8, -0.6)), ((0.33, 0.65), (-0.8, 0.6))],
    4: [((0.45, 0.35), (0.0, 1.0)), ((0.45, 0.65), (0.0, 1.0))],
}
CANCELLING_PAIRS = {frozenset((0, 3)), frozenset((1, 2))}


@dataclass
class SynthConfig:
    per_class: int = 40
    frames_min: int = 10
    frames_max: int = 14
    side: int = 64
    peak_min: float = 1.0
    peak_max: float = 2.5
    width_min: float = 1.2
    width_max: float = 2.2
    multi_label_fraction: float = 0.2
    subjects: int = 20
    noise_sigma: float = 0.0
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.peak_min < MIN_PEAK_DISPLACEMENT:
            raise ConfigurationError(
                f"peak displacement {self.peak_min} px is below the flow sensitivity of {MIN_PEAK_DISPLACEMENT} px"
            )
        if self.peak_max < self.peak_min or self.width_max < self.width_min:
            raise ConfigurationError("synthetic ranges must have max >= min")
        if self.frames_min < 7 or self.frames_max < self.frames_min:
            raise ConfigurationError("synthetic sequences need at least 7 frames")
        if self.side < 32 or self.per_class < 1 or self.subjects < 1:
            raise ConfigurationError("synthetic side must be >= 32 with at least one instance and subject")

    @property
    def total(self) -> int:
        return self.per_class * NUM_CLASSES


@dataclass
class SynthInstance:
    sequence_id: str
    subject_id: str
    classes: tuple[int, ...]
    n_frames: int
    apex: int
    peak: float
    width: float
    amplitudes: np.ndarray = field(repr=False, compare=False)
    motif_field: np.ndarray = field(repr=False, compare=False)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(int(k in self.classes) for k in range(NUM_CLASSES))


@dataclass
class SynthDataset:
    config: SynthConfig
    seed: int
    instances: list[SynthInstance]
    records: list[SequenceRecord]


def bell_profile(n_frames: int, apex: int, width: float, peak: float) -> np.ndarray:
    """Gaussian bell shifted so frame 0 is neutral and the apex reaches peak."""
    t = np.arange(n_frames, dtype=np.float64)
    bell = np.exp(-(t - apex) ** 2 / (2 * width ** 2))
    return peak * (bell - bell[0]) / (bell[apex] - bell[0])


def motif_field(classes: Sequence[int], side: int) -> np.ndarray:
    """Unit-peak displacement field (dy, dx) of the given motif classes."""
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    sigma = MOTIF_SIGMA * side
    displacement = np.zeros((2, side, side))
    for k in classes:
        single = np.zeros((2, side, side))
        for (anchor_r, anchor_c), (dy, dx) in MOTIFS[k]:
            envelope = np.exp(-((rows - anchor_r * side) ** 2 + (cols - anchor_c * side) ** 2) / (2 * sigma ** 2))
            norm = np.hypot(dy, dx)
            single[0] += envelope * dy / norm
            single[1] += envelope * dx / norm
        displacement += single / np.hypot(single[0], single[1]).max()
    return displacement


def render_face(side: int, rng: np.random.Generator) -> np.ndarray:
    """Textured ellipse with darker brows, eyes and mouth on a dark background."""
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    center_r = side * (0.5 + rng.uniform(-0.02, 0.02))
    center_c = side * (0.5 + rng.uniform(-0.02, 0.02))
    radius_r = side * rng.uniform(0.42, 0.46)
    radius_c = side * rng.uniform(0.34, 0.38)
    inside = ((rows - center_r) / radius_r) ** 2 + ((cols - center_c) / radius_c) ** 2 <= 1.0

    texture = gaussian_filter(rng.standard_normal((side, side)), 1.5)
    texture /= texture.std()
    face = 0.55 + 0.08 * texture

    def blob(r: float, c: float, sr: float, sc: float, depth: float) -> np.ndarray:
        return depth * np.exp(-(((rows - r * side) / (sr * side)) ** 2 + ((cols - c * side) / (sc * side)) ** 2) / 2)

    for c in (0.35, 0.65):
        face -= blob(0.30, c, 0.025, 0.08, 0.18)
        face -= blob(0.45, c, 0.03, 0.05, 0.22)
    face -= blob(0.72, 0.5, 0.03, 0.12, 0.2)

    face = np.clip(face, 0.2, FACE_CEILING)
    return np.where(inside, face, BACKGROUND)


def warp(face: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Backward warp so that frame(p + d) ≈ face(p)."""
    side = face.shape[0]
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    return map_coordinates(face, [rows - displacement[0], cols - displacement[1]], order=3, mode="nearest")


def _pick_classes(primary: int, rng: np.random.Generator, fraction: float) -> tuple[int, ...]:
    if rng.random() >= fraction:
        return (primary,)
    partners = [k for k in range(NUM_CLASSES) if k != primary and frozenset((primary, k)) not in CANCELLING_PAIRS]
    return tuple(sorted((primary, int(rng.choice(partners)))))


def synth_generate(config: Optional[SynthConfig] = None, seed: int = 0) -> SynthDataset:
    """Render a deterministic synthetic dataset of dual-view records."""
    config = config or SynthConfig()
    rng = np.random.default_rng(seed)
    faces = [render_face(config.side, rng) for _ in range(config.subjects)]
    primaries = np.repeat(np.arange(NUM_CLASSES), config.per_class)
    primaries = primaries[rng.permutation(len(primaries))]

    instances, records = [], []
    for index, primary in enumerate(primaries):
        subject = index % config.subjects
        classes = _pick_classes(int(primary), rng, config.multi_label_fraction)
        n_frames = int(rng.integers(config.frames_min, config.frames_max + 1))
        apex = int(rng.integers(3, n_frames - 2))
        peak = float(rng.uniform(config.peak_min, config.peak_max))
        width = float(rng.uniform(config.width_min, config.width_max))
        amplitudes = bell_profile(n_frames, apex, width, peak)
        unit_field = motif_field(classes, config.side)

        frames = []
        for amplitude in amplitudes:
            view = warp(faces[subject], amplitude * unit_field)
            if config.noise_sigma > 0:
                view = view + rng.normal(0.0, config.noise_sigma, view.shape)
            view = quantize(view)
            frames.append(np.concatenate([view, view[:, ::-1]], axis=1))

        instance = SynthInstance(f"syn{index:04d}", f"s{subject:02d}", classes, n_frames, apex, peak, width,
                                 amplitudes, unit_field)
        instances.append(instance)
        records.append(SequenceRecord(instance.sequence_id, instance.subject_id, "dual", [], instance.labels,
                                      frames=frames))

    records = assign_splits(records, config.val_fraction, config.test_fraction, seed=seed, protocol="subject")
    logger.info(f"Generated {len(records)} synthetic sequences for {config.subjects} subjects (seed {seed})")
    return SynthDataset(config=config, seed=seed, instances=instances, records=records)


def displacement_field(instance: SynthInstance, frame: int, view: str = "left") -> FlowField:
    """Exact displacement of a frame relative to frame 0 in view coordinates."""
    scaled = instance.amplitudes[frame] * instance.motif_field
    if view == "right":
        return FlowField(u=-scaled[1][:, ::-1], v=scaled[0][:, ::-1])
    return FlowField(u=scaled[1], v=scaled[0])


def write_synthetic_dataset(dataset: SynthDataset, out_dir: Union[str, Path]) -> list[SequenceRecord]:
    """Write PGM frames, manifest.jsonl and ground_truth.csv.

    Returns:
        Records whose frame paths point at the written files.
    """
    out_dir = Path(out_dir)
    written = []
    for record in dataset.records:
        paths = []
        for index, frame in enumerate(record.frames):
            path = out_dir / "frames" / record.sequence_id / f"frame_{index:03d}.pgm"
            write_pgm(path, frame)
            paths.append(path.resolve())
        written.append(SequenceRecord(record.sequence_id, record.subject_id, record.view, paths, record.labels,
                                      record.split, frames=record.frames))
    write_manifest(written, out_dir / "manifest.jsonl")

    with open(out_dir / "ground_truth.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=GROUND_TRUTH_HEADERS)
        writer.writeheader()
        for instance in dataset.instances:
            writer.writerow({
                "sequence_id": instance.sequence_id,
                "apex": instance.apex,
                "classes": " ".join(str(k) for k in instance.classes),
                "peak_amplitude": f"{instance.peak:.6f}",
                "bell_width": f"{instance.width:.6f}",
                "frame_count": instance.n_frames,
            })
    logger.info(f"Wrote synthetic dataset to {out_dir}")
    return written


def read_ground_truth(path: Union[str, Path]) -> dict[str, dict]:
    with open(path, "r", encoding="utf-8") as f:
        return {row["sequence_id"]: row for row in csv.DictReader(f)}


def linear_readout_uf1(dataset: SynthDataset, grid: int = 8) -> float:
    """Macro-F1 of a least-squares one-vs-rest readout on apex displacement fields."""
    features = []
    for instance in dataset.instances:
        field_at_apex = displacement_field(instance, instance.apex)
        pooled = np.concatenate([
            resize_bilinear(field_at_apex.u, grid, grid).ravel(),
            resize_bilinear(field_at_apex.v, grid, grid).ravel(),
        ])
        features.append(pooled / np.linalg.norm(pooled))
    design = np.hstack([np.array(features), np.ones((len(features), 1))])
    labels = np.array([instance.labels for instance in dataset.instances], dtype=np.float64)
    weights, *_ = np.linalg.lstsq(design, 2 * labels - 1, rcond=None)
    scores = design @ weights
    predicted = decide_bits((scores + 1) / 2, threshold=0.5)
    return uf1(predicted, labels.astype(int))
