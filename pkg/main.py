"""Command-line entry point for the micro-expression recognition pipeline."""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from tqdm import tqdm

import config
from config import RunConfig, resolve_run_config, with_model_toggles, write_resolved_config
from errors import CheckpointFormatError, ConfigurationError, DataError, MerError
from evaluation import (
    ABLATION_FILE,
    ABLATION_ORDER,
    METRICS_FILE,
    AblationRun,
    ablation_table,
    emit_report,
    evaluate_sequences,
    predict_sequence_probabilities,
    read_metrics_uf1,
    threshold_sweep,
    write_ablation_markdown,
)
from microattnet import check_model_gradients, export_attention_trace, forward, parameter_hash
from optflow import FeatureRecord, export_feature_text
from pipeline import (
    SPLITS,
    TrainingSample,
    ViewExtraction,
    assign_splits,
    build_samples,
    check_subject_disjoint,
    compute_norm_stats,
    extract_records,
    load_feature_set,
    load_manifest,
    load_norm_stats,
    preprocess_record,
    samples_to_arrays,
    save_feature_set,
    save_norm_stats,
    select_samples,
    write_preprocessed,
)
from stage_tracker import StageTracker, hash_inputs, hash_text, stage_key
from synthetic import linear_readout_uf1, synth_generate, write_synthetic_dataset
from tensorgrad import no_grad
from training import checkpoint, restore, restore_training, train, write_history_csv, write_run_manifest

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIGURATION = 2

GRADCHECK_TOLERANCE = 1e-5
ABLATION_MARGIN = 0.02
ATTENTION_SAMPLES = 32

DATASET_DIR = "dataset"
PREPROCESSED_DIR = "preprocessed"
FEATURES_DIR = "features"
EVAL_DIR = "eval"
SWEEP_DIR = "sweep"
ABLATION_DIR = "ablation"
MODEL_FILE = "model.matn"
TRAIN_STATE_FILE = "train_state.matn"
NORM_STATS_FILE = "norm_stats.json"
HISTORY_FILE = "history.csv"
RUN_MANIFEST_FILE = "run_manifest.json"
APEX_FILE = "apex.csv"
FEATURE_TEXT_FILE = "features.txt"
ATTENTION_FILE = "attention.tsv"

APEX_HEADERS = ["sequence_id", "view", "apex", "peak_intensity", "low_confidence"]
SPLIT_KEYS = ("SEED", "SPLIT_PROTOCOL", "VAL_FRACTION", "TEST_FRACTION")


# Stage bookkeeping

def _settings_lines(run_config: RunConfig, sections: Sequence[str] = (), keys: Sequence[str] = ()) -> list[str]:
    """Resolved KEY=value lines of whole sections plus individual keys."""
    lines = run_config.to_env_lines(tuple(sections)) if sections else []
    lines += [line for line in run_config.to_env_lines() if line.split("=", 1)[0] in keys]
    return lines


def run_stage(tracker: StageTracker, name: str, inputs: Iterable[Path], settings: list[str], output: Path,
              work: Callable[[], None]) -> bool:
    """
    Run a stage unless the same inputs and settings already produced its output.

    Returns:
        True if the stage ran, False if a cached output was reused.
    """
    inputs_hash = hash_inputs(inputs)
    config_hash = hash_text(settings)
    key = stage_key(name, inputs_hash, config_hash)
    if tracker.is_completed(key):
        logger.info(f"Stage {name}: reusing {output} (inputs and settings unchanged)")
        return False

    tracker.record_start(key, name, inputs_hash, config_hash, output)
    try:
        work()
    except Exception as e:
        failures = tracker.record_error(key, f"{type(e).__name__}: {e}")
        logger.error(f"Stage {name} failed (attempt {failures}): {e}")
        raise
    if tracker.record_completion(key):
        logger.info(f"Stage {name} succeeded after earlier failures")
    return True


# Stage bodies

def _write_apex_csv(extractions: Sequence[ViewExtraction], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=APEX_HEADERS, lineterminator="\n")
        writer.writeheader()
        for view in sorted(extractions, key=lambda e: (e.record.sequence_id, e.record.view)):
            writer.writerow({
                "sequence_id": view.record.sequence_id,
                "view": view.record.view,
                "apex": view.apex.index,
                "peak_intensity": f"{view.apex.intensities[view.apex.index]:.6f}",
                "low_confidence": int(view.apex.low_confidence),
            })


def synthesize(run_config: RunConfig, out_dir: Path) -> None:
    dataset = synth_generate(run_config.synth, seed=run_config.seed)
    write_synthetic_dataset(dataset, out_dir)
    logger.info(f"Linear readout UF1 on exact apex displacements: {linear_readout_uf1(dataset):.3f}")


def preprocess(manifest: Path, out_dir: Path) -> None:
    records = load_manifest(manifest)
    processed = []
    failures = 0
    for record in tqdm(records, desc="preprocess", unit="seq"):
        try:
            processed.extend(preprocess_record(record))
        except (DataError, OSError) as e:
            logger.error(f"Preprocessing failed for {record.sequence_id}: {e}")
            failures += 1
    write_preprocessed(processed, out_dir)
    logger.info(f"Preprocessed {len(processed)} view(s) into {out_dir}")
    if failures:
        raise DataError(f"{failures} of {len(records)} sequence(s) failed preprocessing")


def extract(run_config: RunConfig, manifest: Path, out_dir: Path, text_export: bool) -> None:
    records = load_manifest(manifest)
    if all(record.split == "train" for record in records):
        records = assign_splits(records, run_config.synth.val_fraction, run_config.synth.test_fraction,
                                seed=run_config.seed, protocol=run_config.run.split_protocol)
        logger.info(f"Manifest has no held-out records; assigned {run_config.run.split_protocol} splits")
    if run_config.run.split_protocol == "subject":
        check_subject_disjoint(records)

    extractions, failures = extract_records(records, run_config.farneback, run_config.run.border_exclusion,
                                            workers=run_config.run.workers)
    samples = build_samples(extractions, mode="train", phase_policy="both")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_feature_set(samples, out_dir)
    _write_apex_csv(extractions, out_dir / APEX_FILE)
    low = sum(view.apex.low_confidence for view in extractions)
    logger.info(f"Extracted {len(samples)} samples from {len(extractions)} view(s); {low} low-confidence apex")
    if text_export:
        export_feature_text(out_dir / FEATURE_TEXT_FILE, (
            FeatureRecord(s.sequence_id, s.view, s.phase, s.apex, s.feature) for s in samples
        ))
    if failures:
        raise DataError(f"{len(failures)} of {len(records)} sequence(s) failed extraction")


def train_model(run_config: RunConfig, samples: Sequence[TrainingSample], run_dir: Path) -> Path:
    """Train on the train split, validate on val, and write the model with its provenance."""
    run_dir.mkdir(parents=True, exist_ok=True)
    train_config = run_config.train
    model_config = run_config.model
    train_samples = select_samples(samples, "train", "train", train_config.phase_policy)
    val_samples = select_samples(samples, "val", "eval")
    stats = compute_norm_stats(train_samples)
    logger.info(f"Training on {len(train_samples)} samples, validating on {len(val_samples)}")

    state_path = run_dir / TRAIN_STATE_FILE
    resume = None
    if state_path.exists():
        try:
            resume = restore_training(state_path)
        except CheckpointFormatError as e:
            logger.warning(f"Ignoring unreadable training state {state_path}: {e}")
        if resume is not None and (resume.train_config != train_config or resume.state.config != model_config):
            logger.warning(f"Training state {state_path} was written with other settings; starting fresh")
            resume = None

    best_state, history = train(train_samples, val_samples, model_config, train_config, stats,
                                checkpoint_path=state_path, resume_from=resume)
    model_path = run_dir / MODEL_FILE
    checkpoint(best_state, history, model_path)
    save_norm_stats(stats, run_dir / NORM_STATS_FILE)
    write_history_csv(history, run_dir / HISTORY_FILE)
    write_run_manifest(run_dir / RUN_MANIFEST_FILE, best_state.config, train_config, {
        "seed": run_config.seed,
        "parameter_hash": parameter_hash(best_state),
        "norm_source_hash": stats.source_hash,
        "best_epoch": history.best_epoch,
        "epochs_run": len(history.epochs),
        "stopped_early": history.stopped_early,
    })
    return model_path


def _load_scored_split(model_path: Path, features_dir: Path, split: str):
    state, _ = restore(model_path)
    stats = load_norm_stats(model_path.parent / NORM_STATS_FILE)
    samples = select_samples(load_feature_set(features_dir, side=state.config.input_side), split, "eval")
    if not samples:
        raise DataError(f"no {split} samples in {features_dir}")
    ids, probability_sets, labels = predict_sequence_probabilities(state, samples, stats)
    logger.info(f"Scored {len(ids)} {split} sequence(s) from {len(samples)} samples")
    return state, stats, samples, probability_sets, labels


def evaluate(run_config: RunConfig, model_path: Path, features_dir: Path, split: str, out_dir: Path) -> None:
    state, stats, samples, probability_sets, labels = _load_scored_split(model_path, features_dir, split)
    report = evaluate_sequences(probability_sets, labels, run_config.run.threshold)
    emit_report(report, None, out_dir)
    if state.config.fusion_attention:
        head = samples[:ATTENTION_SAMPLES]
        features, _ = samples_to_arrays(head, stats, state.config.dtype)
        with no_grad():
            trace = forward(features, state, training=False).trace
        export_attention_trace(trace, out_dir / ATTENTION_FILE, [f"{s.sequence_id}/{s.view}" for s in head])


def sweep(run_config: RunConfig, model_path: Path, features_dir: Path, split: str, out_dir: Path) -> None:
    _, _, _, probability_sets, labels = _load_scored_split(model_path, features_dir, split)
    result = threshold_sweep(probability_sets, labels, run_config.sweep_grid)
    report = evaluate_sequences(probability_sets, labels, result.best_threshold)
    emit_report(report, result, out_dir)
    logger.info(f"Best threshold {result.best_threshold:.2f} with UF1 {result.best_uf1:.3f}")


def _check_ablation_direction(rows) -> None:
    by_name = {row.name: row for row in rows}
    full = by_name.get(ABLATION_ORDER[0][0])
    if full is None:
        return
    for name, _, _ in ABLATION_ORDER[1:3]:
        variant = by_name.get(name)
        if variant is not None and full.uf1 < variant.uf1 - ABLATION_MARGIN:
            logger.warning(f"Finding: full model UF1 {full.uf1:.3f} trails '{name}' ({variant.uf1:.3f})")


def ablate(run_config: RunConfig, tracker: StageTracker, features_dir: Path, out_dir: Path, seeds: int) -> None:
    samples = load_feature_set(features_dir, side=run_config.model.input_side)
    runs = []
    for name, attention, se in ABLATION_ORDER:
        for seed in range(run_config.seed, run_config.seed + seeds):
            variant = with_model_toggles(run_config, attention, se, seed)
            run_dir = out_dir / f"attention{int(attention)}_se{int(se)}_seed{seed}"
            metrics_path = run_dir / METRICS_FILE

            def work(variant=variant, run_dir=run_dir) -> None:
                model_path = train_model(variant, samples, run_dir)
                evaluate(variant, model_path, features_dir, "test", run_dir)

            logger.info(f"Ablation '{name}', seed {seed}")
            settings = _settings_lines(variant, ("model", "train"), ("THRESHOLD",)) + [f"TRAIN_SEED={seed}"]
            run_stage(tracker, "ablate-run", [features_dir], settings, metrics_path, work)
            runs.append(AblationRun(name, attention, se, read_metrics_uf1(metrics_path), seed))

    rows = ablation_table(runs)
    write_ablation_markdown(rows, out_dir / ABLATION_FILE)
    _check_ablation_direction(rows)
    for row in rows:
        logger.info(f"{row.name}: UF1 {row.uf1:.3f} over {row.runs} run(s)")


# Commands

def cmd_synth(args, run_config: RunConfig, tracker: StageTracker) -> int:
    out_dir = run_config.out_dir / DATASET_DIR
    run_stage(tracker, "synth", [], _settings_lines(run_config, ("synth",), ("SEED",)), out_dir,
              lambda: synthesize(run_config, out_dir))
    return EXIT_OK


def _manifest_inputs(args, run_config: RunConfig) -> tuple[Path, list[Path]]:
    """The manifest path and every file it depends on."""
    manifest = Path(args.manifest) if args.manifest else run_config.out_dir / DATASET_DIR / "manifest.jsonl"
    frames = [path for record in load_manifest(manifest) for path in record.frame_paths]
    return manifest, [manifest] + frames


def cmd_preprocess(args, run_config: RunConfig, tracker: StageTracker) -> int:
    manifest, inputs = _manifest_inputs(args, run_config)
    out_dir = run_config.out_dir / PREPROCESSED_DIR
    run_stage(tracker, "preprocess", inputs, [], out_dir, lambda: preprocess(manifest, out_dir))
    return EXIT_OK


def cmd_extract(args, run_config: RunConfig, tracker: StageTracker) -> int:
    manifest, inputs = _manifest_inputs(args, run_config)
    out_dir = run_config.out_dir / FEATURES_DIR
    settings = _settings_lines(run_config, ("farneback",), SPLIT_KEYS + ("BORDER_EXCLUSION",))
    settings.append(f"TEXT_EXPORT={bool(args.text_export)}")
    run_stage(tracker, "extract", inputs, settings, out_dir,
              lambda: extract(run_config, manifest, out_dir, args.text_export))
    return EXIT_OK


def _features_dir(args, run_config: RunConfig) -> Path:
    return Path(args.features) if args.features else run_config.out_dir / FEATURES_DIR


def _model_path(args, run_config: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else run_config.out_dir / MODEL_FILE


def cmd_train(args, run_config: RunConfig, tracker: StageTracker) -> int:
    features_dir = _features_dir(args, run_config)

    def work() -> None:
        samples = load_feature_set(features_dir, side=run_config.model.input_side)
        train_model(run_config, samples, run_config.out_dir)

    run_stage(tracker, "train", [features_dir], _settings_lines(run_config, ("model", "train"), ("SEED",)),
              run_config.out_dir / MODEL_FILE, work)
    return EXIT_OK


def cmd_eval(args, run_config: RunConfig, tracker: StageTracker) -> int:
    features_dir = _features_dir(args, run_config)
    model_path = _model_path(args, run_config)
    out_dir = run_config.out_dir / EVAL_DIR
    settings = _settings_lines(run_config, keys=("THRESHOLD",)) + [f"SPLIT={args.split}"]
    run_stage(tracker, "eval", [features_dir, model_path, model_path.parent / NORM_STATS_FILE], settings,
              out_dir / METRICS_FILE, lambda: evaluate(run_config, model_path, features_dir, args.split, out_dir))
    return EXIT_OK


def cmd_sweep(args, run_config: RunConfig, tracker: StageTracker) -> int:
    features_dir = _features_dir(args, run_config)
    model_path = _model_path(args, run_config)
    out_dir = run_config.out_dir / SWEEP_DIR
    settings = _settings_lines(run_config, keys=("SWEEP_START", "SWEEP_STOP", "SWEEP_POINTS"))
    settings.append(f"SPLIT={args.split}")
    run_stage(tracker, "sweep", [features_dir, model_path, model_path.parent / NORM_STATS_FILE], settings,
              out_dir / METRICS_FILE, lambda: sweep(run_config, model_path, features_dir, args.split, out_dir))
    return EXIT_OK


def cmd_ablate(args, run_config: RunConfig, tracker: StageTracker) -> int:
    seeds = args.seeds if args.seeds is not None else run_config.run.ablation_seeds
    if seeds < 1:
        raise ConfigurationError(f"--seeds must be >= 1, got {seeds}")
    ablate(run_config, tracker, _features_dir(args, run_config), run_config.out_dir / ABLATION_DIR, seeds)
    return EXIT_OK


def cmd_gradcheck(args, run_config: RunConfig, tracker: StageTracker) -> int:
    result = check_model_gradients(seed=run_config.seed)
    if result.max_rel_error > GRADCHECK_TOLERANCE:
        logger.error(f"Gradient check failed: relative error {result.max_rel_error:.3e} at input "
                     f"{result.worst_input}, index {result.worst_index}")
        return EXIT_FAILURE
    logger.info(f"Gradient check passed ({result.max_rel_error:.3e} <= {GRADCHECK_TOLERANCE:.0e})")
    return EXIT_OK


def cmd_status(args, run_config: RunConfig, tracker: StageTracker) -> int:
    records = tracker.get_all_records()
    if not records:
        logger.info(f"No stages recorded in {tracker.csv_path}")
        return EXIT_OK
    for record in records:
        logger.info(f"  {record['stage']:<12} {record['status']:<11} {record['stage_key']}  {record['output_path']}")
    pending = tracker.get_records_for_retry()
    for record in pending:
        reason = record["error_message"] or "interrupted while running"
        logger.warning(f"Needs a rerun: {record['stage']} ({record['stage_key']}), "
                       f"{record['failure_count'] or 0} failure(s): {reason}")
    logger.info(f"{len(records)} stage(s) recorded, {len(pending)} need a rerun")
    return EXIT_FAILURE if pending else EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "Generate the synthetic benchmark dataset"),
    "preprocess": (cmd_preprocess, "Split views, detect faces and crop sequences"),
    "extract": (cmd_extract, "Detect apex frames and extract phase flow features"),
    "train": (cmd_train, "Train MicroAttNet on extracted features"),
    "eval": (cmd_eval, "Evaluate a trained model at a fixed threshold"),
    "sweep": (cmd_sweep, "Sweep the decision threshold and report the best UF1"),
    "ablate": (cmd_ablate, "Train and evaluate every attention/SE combination"),
    "gradcheck": (cmd_gradcheck, "Verify model gradients against finite differences"),
    "status": (cmd_status, "List recorded stages and those that failed or were interrupted"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration file (KEY=value lines)")
    common.add_argument("--seed", type=int, help="Seed for data generation, splits and training")
    common.add_argument("--out", help="Run directory for outputs, logs and the stage record")
    common.add_argument("--threshold", type=float, help="Decision threshold for multi-label predictions")
    common.add_argument("--no-attention", action="store_true", help="Disable Fusion Attention")
    common.add_argument("--no-se", action="store_true", help="Disable the SE block")
    common.add_argument("--input-side", type=int, help="Network input side length S")
    common.add_argument("--precision", choices=("f32", "f64"), help="Floating-point precision")
    common.add_argument("--verbose", action="store_true", help="Increase logging verbosity")

    parser = argparse.ArgumentParser(description="Dual-view phase-aware micro-expression recognition")
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands = {name: subparsers.add_parser(name, parents=[common], help=text)
                for name, (_, text) in COMMANDS.items()}

    for name in ("preprocess", "extract"):
        commands[name].add_argument("--manifest", help="JSON Lines manifest (default: <out>/dataset/manifest.jsonl)")
    commands["extract"].add_argument("--workers", type=int, help="Parallel extraction processes")
    commands["extract"].add_argument("--text-export", action="store_true", help="Also write features.txt")
    for name in ("train", "eval", "sweep", "ablate"):
        commands[name].add_argument("--features", help="Feature directory (default: <out>/features)")
    for name in ("eval", "sweep"):
        commands[name].add_argument("--checkpoint", help="Model checkpoint (default: <out>/model.matn)")
        commands[name].add_argument("--split", choices=SPLITS, default="test", help="Split to score")
    commands["ablate"].add_argument("--seeds", type=int, help="Training seeds per configuration")
    return parser


def _overrides(args) -> dict:
    return {
        "SEED": args.seed,
        "OUT_DIR": args.out,
        "THRESHOLD": args.threshold,
        "INPUT_SIDE": args.input_side,
        "PRECISION": args.precision,
        "FUSION_ATTENTION": False if args.no_attention else None,
        "SE_BLOCK": False if args.no_se else None,
        "WORKERS": getattr(args, "workers", None),
    }


def _configure_logging(out_dir: Path, verbose: bool) -> list[logging.Handler]:
    out_dir.mkdir(parents=True, exist_ok=True)
    handlers = [
        logging.FileHandler(out_dir / config.LOG_FILE_NAME),
        logging.StreamHandler(sys.stdout),
    ]
    logging.basicConfig(
        level=logging.DEBUG if verbose else config.LOG_LEVEL,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    return handlers


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map failures to exit statuses."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        run_config = resolve_run_config(args.config, _overrides(args))
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIGURATION

    handlers = _configure_logging(run_config.out_dir, args.verbose)
    try:
        logger.info("=" * 60)
        logger.info(f"Micro-expression recognition: {args.command}")
        logger.info(f"  Run directory: {run_config.out_dir}")
        logger.info(f"  Seed: {run_config.seed}")
        logger.info("=" * 60)
        write_resolved_config(run_config, run_config.out_dir / config.RESOLVED_CONFIG_NAME)
        tracker = StageTracker(run_config.out_dir / config.STAGES_FILE_NAME)
        command, _ = COMMANDS[args.command]
        status = command(args, run_config, tracker)
        logger.info(f"{args.command} finished with status {status}")
        return status
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIGURATION
    except (MerError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.verbose)
        return EXIT_FAILURE
    except Exception:
        logger.exception(f"{args.command} failed with an unexpected error")
        return EXIT_FAILURE
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()


def main() -> None:
    """Main entry point."""
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
