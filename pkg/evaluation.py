"""Multi-label metrics, threshold sweep, ablation table and report files."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from errors import ConfigurationError, DataError, DimensionError, UsageError  # noqa: E402
from microattnet import DEFAULT_THRESHOLD, ModelState, predict_multilabel, predict_probabilities  # noqa: E402
from pipeline import CLASS_NAMES, NormStats, TrainingSample, samples_to_arrays  # noqa: E402

logger = logging.getLogger(__name__)

SWEEP_START = 0.10
SWEEP_STOP = 0.30
SWEEP_POINTS = 21

ABLATION_ORDER = (
    ("Full model", True, True),
    ("Without Fusion Attention", False, True),
    ("Without SE block", True, False),
    ("Without both", False, False),
)

METRICS_FILE = "metrics.csv"
SWEEP_CSV = "sweep.csv"
SWEEP_SVG = "sweep.svg"
ABLATION_FILE = "ablation.md"


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricReport:
    per_class_f1: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    uf1: float
    threshold: float
    counts: ConfusionCounts
    class_names: tuple[str, ...] = CLASS_NAMES


@dataclass
class SweepResult:
    best_threshold: float
    best_uf1: float
    thresholds: np.ndarray
    curve: np.ndarray


@dataclass
class AblationRun:
    name: str
    fusion_attention: bool
    se_block: bool
    uf1: float
    seed: Optional[int] = None


@dataclass
class AblationRow:
    name: str
    fusion_attention: bool
    se_block: bool
    uf1: float
    runs: int = 1
    seeds: list = field(default_factory=list)


def _ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Elementwise division with 0/0 defined as 0."""
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator != 0)
    return out


def confusion_counts(predicted_bits: np.ndarray, label_bits: np.ndarray) -> ConfusionCounts:
    predicted = np.atleast_2d(np.asarray(predicted_bits)).astype(bool)
    labels = np.atleast_2d(np.asarray(label_bits)).astype(bool)
    if predicted.shape != labels.shape:
        raise DimensionError(f"predictions {predicted.shape} and labels {labels.shape} differ in shape")
    return ConfusionCounts(
        tp=(predicted & labels).sum(axis=0),
        fp=(predicted & ~labels).sum(axis=0),
        fn=(~predicted & labels).sum(axis=0),
        tn=(~predicted & ~labels).sum(axis=0),
    )


def precision_recall(counts: ConfusionCounts) -> tuple[np.ndarray, np.ndarray]:
    return _ratio(counts.tp, counts.tp + counts.fp), _ratio(counts.tp, counts.tp + counts.fn)


def f1_per_class(counts: ConfusionCounts) -> np.ndarray:
    precision, recall = precision_recall(counts)
    return _ratio(2 * precision * recall, precision + recall)


def macro_f1(per_class: Sequence[float]) -> float:
    return float(np.mean(per_class))


def uf1(predicted_bits: np.ndarray, label_bits: np.ndarray) -> float:
    return macro_f1(f1_per_class(confusion_counts(predicted_bits, label_bits)))


def evaluate_sequences(probability_sets: Sequence[np.ndarray], labels: np.ndarray,
                       threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    """Score fused per-sequence predictions against per-sequence labels."""
    bits = predict_multilabel(probability_sets, threshold)
    counts = confusion_counts(bits, labels)
    precision, recall = precision_recall(counts)
    per_class = f1_per_class(counts)
    return MetricReport(per_class_f1=per_class, precision=precision, recall=recall, uf1=macro_f1(per_class),
                        threshold=float(threshold), counts=counts)


def group_by_sequence(samples: Sequence[TrainingSample],
                      probabilities: np.ndarray) -> tuple[list[str], list[np.ndarray], np.ndarray]:
    """Collect sample probabilities per sequence id, in sorted id order."""
    if len(samples) != len(probabilities):
        raise DimensionError(f"{len(samples)} samples but {len(probabilities)} probability rows")
    grouped: dict[str, list[int]] = {}
    for row, sample in enumerate(samples):
        grouped.setdefault(sample.sequence_id, []).append(row)
    ids = sorted(grouped)
    probability_sets = [probabilities[grouped[i]] for i in ids]
    labels = np.array([samples[grouped[i][0]].labels for i in ids], dtype=int)
    return ids, probability_sets, labels


def predict_sequence_probabilities(state: ModelState, samples: Sequence[TrainingSample], stats: NormStats,
                                   batch_size: int = 32) -> tuple[list[str], list[np.ndarray], np.ndarray]:
    if not samples:
        raise UsageError("no samples to evaluate")
    features, _ = samples_to_arrays(samples, stats, state.config.dtype)
    return group_by_sequence(samples, predict_probabilities(state, features, batch_size))


def default_threshold_grid() -> np.ndarray:
    return np.round(np.linspace(SWEEP_START, SWEEP_STOP, SWEEP_POINTS), 2)


def threshold_sweep(probability_sets: Sequence[np.ndarray], labels: np.ndarray,
                    grid: Optional[Sequence[float]] = None) -> SweepResult:
    """UF1 at every threshold of the grid; the best threshold prefers the smaller on ties."""
    thresholds = default_threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if thresholds.size == 0 or np.any((thresholds <= 0) | (thresholds >= 1)):
        raise ConfigurationError("threshold grid must be non-empty and inside (0, 1)")
    curve = np.array([evaluate_sequences(probability_sets, labels, theta).uf1 for theta in thresholds])
    best = 0
    for index in range(1, len(thresholds)):
        if curve[index] > curve[best] or (curve[index] == curve[best] and thresholds[index] < thresholds[best]):
            best = index
    return SweepResult(best_threshold=float(thresholds[best]), best_uf1=float(curve[best]),
                       thresholds=thresholds, curve=curve)


def ablation_table(runs: Sequence[AblationRun]) -> list[AblationRow]:
    """Average repeated runs per toggle combination, in the canonical row order."""
    if not runs:
        raise UsageError("ablation_table needs at least one run")
    rows = []
    for name, attention, se in ABLATION_ORDER:
        matching = [r for r in runs if r.fusion_attention == attention and r.se_block == se]
        if not matching:
            logger.warning(f"Ablation row '{name}' omitted: no run with attention={attention}, se={se}")
            continue
        rows.append(AblationRow(name, attention, se, float(np.mean([r.uf1 for r in matching])), len(matching),
                                [r.seed for r in matching]))
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    def mark(flag: bool) -> str:
        return "yes" if flag else "no"

    lines = ["| Configuration | Fusion Attention | SE block | UF1 | Runs |", "|---|---|---|---|---|"]
    for row in rows:
        lines.append(f"| {row.name} | {mark(row.fusion_attention)} | {mark(row.se_block)} | {row.uf1:.3f} | {row.runs} |")
    return "\n".join(lines) + "\n"


def write_ablation_markdown(rows: Sequence[AblationRow], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# Ablation\n\n" + format_ablation_table(rows), encoding="utf-8")


def write_metrics_csv(report: MetricReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1"])
        for i, name in enumerate(report.class_names):
            writer.writerow([name, int(report.counts.tp[i]), int(report.counts.fp[i]), int(report.counts.fn[i]),
                             f"{report.precision[i]:.6f}", f"{report.recall[i]:.6f}", f"{report.per_class_f1[i]:.6f}"])
        writer.writerow(["UF1", "", "", "", "", "", f"{report.uf1:.6f}"])


def read_metrics_uf1(path: Union[str, Path]) -> float:
    """UF1 from the last row of a metrics.csv written by write_metrics_csv."""
    with open(path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["class"] == "UF1":
                return float(row["f1"])
    raise DataError(f"{path}: no UF1 row")


def write_sweep_csv(sweep: SweepResult, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["theta", "uf1"])
        for theta, value in zip(sweep.thresholds, sweep.curve):
            writer.writerow([f"{theta:.2f}", f"{value:.6f}"])


def plot_sweep(sweep: SweepResult, path: Union[str, Path]) -> None:
    """Line plot of UF1 against threshold with the best threshold marked."""
    plt.rcParams["svg.hashsalt"] = "threshold-sweep"
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        ax.plot(sweep.thresholds, sweep.curve, marker="o", color="tab:blue", label="UF1")
        ax.axvline(sweep.best_threshold, color="tab:red", linestyle="--",
                   label=f"best θ = {sweep.best_threshold:.2f}")
        ax.set_xlabel("Threshold θ")
        ax.set_ylabel("UF1")
        ax.set_ylim(0.0, 1.0)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


def emit_report(report: MetricReport, sweep: Optional[SweepResult], out_dir: Union[str, Path]) -> list[Path]:
    """Write metrics.csv and, when a sweep is given, sweep.csv and sweep.svg.

    Returns:
        Paths of the files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / METRICS_FILE]
    write_metrics_csv(report, written[0])
    if sweep is not None:
        write_sweep_csv(sweep, out_dir / SWEEP_CSV)
        plot_sweep(sweep, out_dir / SWEEP_SVG)
        written += [out_dir / SWEEP_CSV, out_dir / SWEEP_SVG]
    logger.info(f"UF1 {report.uf1:.3f} at θ={report.threshold:.2f}; reports in {out_dir}")
    return written
