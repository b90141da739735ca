import typer
import os
import json
import traceback
from typing import Optional

from core.logging_utils import log_info, log_warning, log_error, log_debug, log_success, log_step
from core.cli_helpers import resolve_experiment_config
from core.data_ingest import load_table
from core.errors import NoiseLabError, StorageError
from core.harness import RUNNERS, load_dataset, split_for_seed
from core.knn_core import build_index_set
from core.recover import repair_table
from core.report import emit_report, load_report

app = typer.Typer(help="kNN-based noisy feature detection, recoverability and correction experiments.",
                  no_args_is_help=True)

CONFIG_OPTION = typer.Option(..., "--config", "-c", help="Path to the experiment config JSON.")
SEED_OPTION = typer.Option(None, "--seed", "-s", help="Master seed; overrides 'master_seed' in the config.")
OUT_OPTION = typer.Option(None, "--out", "-o", help="Output directory; overrides 'output_dir' in the config.")
THREADS_OPTION = typer.Option(None, "--threads", "-t", min=1, help="Worker threads; overrides 'threads' in the config.")
FEATURES_OPTION = typer.Option(None, "--features", "-f",
                               help="Kept-feature list (one name per line); overrides 'kept_features_path'.")


def _ensure_base_folder(folder_path: str) -> str:
    """Ensures a base folder exists, creating it if necessary."""
    abs_folder_path = os.path.abspath(folder_path)
    if not os.path.exists(abs_folder_path):
        try:
            os.makedirs(abs_folder_path, exist_ok=True)
            log_debug(f"Base folder created/confirmed: {abs_folder_path}")
        except OSError as e:
            raise StorageError(f"Error creating base folder '{abs_folder_path}': {e}") from e
    else:
        log_debug(f"Using existing base folder: {abs_folder_path}")
    return abs_folder_path


def _fail(error: Exception) -> typer.Exit:
    """Logs an error escaping a command and returns the Exit to raise."""
    if isinstance(error, NoiseLabError):
        log_error(f"Error: {error}")
        return typer.Exit(code=error.exit_code)
    log_error(f"An unexpected error occurred: {error}")
    log_debug(traceback.format_exc())
    return typer.Exit(code=1)


def _write_json(path: str, payload) -> None:
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e


def _run_experiment(kind: str, config: str, seed: Optional[int], out: Optional[str],
                    threads: Optional[int], features: Optional[str]) -> None:
    try:
        resolved = resolve_experiment_config(config, seed=seed, out=out, threads=threads, features=features)
        output_dir = _ensure_base_folder(resolved.output_dir)
        report = RUNNERS[kind](resolved)
        written = emit_report(report, output_dir)
        for path in written:
            log_info(f"  {path}")
        log_success(f"\n{kind.capitalize()} experiment completed successfully.")
    except Exception as e:
        raise _fail(e)


@app.command(name="ingest")
def ingest_command(
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """
    Prunes correlated features, splits the data for every configured seed and
    min-max scales each subset. Writes the scaled subsets, their scaler bounds
    and the list of pruned features.
    """
    try:
        resolved = resolve_experiment_config(config, seed=seed, out=out, features=features)
        output_dir = _ensure_base_folder(os.path.join(resolved.output_dir, "ingest"))
        dataset = load_dataset(resolved)
        _write_json(os.path.join(output_dir, "dropped_features.json"), [
            {'name': d.name, 'correlated_with': d.correlated_with, 'correlation': d.correlation}
            for d in dataset.dropped
        ])
        for split_seed in resolved.seeds:
            split = split_for_seed(dataset, resolved, split_seed)
            seed_dir = _ensure_base_folder(os.path.join(output_dir, f"seed{split_seed}"))
            for name, subset in split.subsets().items():
                try:
                    subset.to_frame().to_csv(os.path.join(seed_dir, f"{name}.csv"), index=False, lineterminator="\n")
                except OSError as e:
                    raise StorageError(f"Could not write {name}.csv for seed {split_seed}: {e}") from e
            _write_json(os.path.join(seed_dir, "scalers.json"),
                        {name: params.to_dict() for name, params in split.scalers.items()})
            log_info(f"Seed {split_seed}: {split.train.n_rows}/{split.validation.n_rows}/{split.test.n_rows} "
                     f"rows -> {seed_dir}")
        log_success(f"\nIngest completed successfully at: {output_dir}")
    except Exception as e:
        raise _fail(e)


@app.command(name="baseline")
def baseline_command(
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """Baseline imputation R² per feature across the train-size ladder, plus correlation vs R²."""
    _run_experiment("baseline", config, seed, out, threads, features)


@app.command(name="detect-sweep")
def detect_sweep_command(
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """Noisy-feature detectability over the (sigma, train size, seed) grid."""
    _run_experiment("detection", config, seed, out, threads, features)


@app.command(name="recover-sweep")
def recover_sweep_command(
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """Per-feature recoverability across the sigma ladder at the full train size."""
    _run_experiment("recoverability", config, seed, out, threads, features)


@app.command(name="correct-eval")
def correct_eval_command(
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """MAPE of corrected recoverable samples at the configured correction sigma."""
    _run_experiment("correction", config, seed, out, threads, features)


@app.command(name="report")
def report_command(
    report_path: str = typer.Argument(..., help="Path to a report JSON written by one of the sweep commands."),
    out: Optional[str] = typer.Option(None, "--out", "-o",
                                      help="Directory to re-emit into. Defaults to the report's own folder."),
):
    """Re-emits the JSON and tidy CSV of a saved report."""
    try:
        report = load_report(report_path)
        output_dir = _ensure_base_folder(out or os.path.dirname(os.path.abspath(report_path)))
        log_info(f"Loaded {report.kind} report (version {report.version}, input {report.input_sha256[:12]})")
        for path in emit_report(report, output_dir):
            log_info(f"  {path}")
        log_success("\nReport re-emitted successfully.")
    except Exception as e:
        raise _fail(e)


@app.command(name="repair")
def repair_command(
    noisy: str = typer.Option(..., "--noisy", "-n", help="CSV with the same columns as the input, one feature corrupted."),
    config: str = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[str] = OUT_OPTION,
    features: Optional[str] = FEATURES_OPTION,
):
    """
    Detects the corrupted feature of a noisy table, flags its recoverable rows
    and re-imputes them from the clean features. Models are trained on the
    input data split with the first configured seed.
    """
    try:
        resolved = resolve_experiment_config(config, seed=seed, out=out, features=features)
        output_dir = _ensure_base_folder(resolved.output_dir)
        dataset = load_dataset(resolved)
        split = split_for_seed(dataset, resolved, resolved.seeds[0])
        log_step(f"Training {dataset.table.n_features} imputation models on {split.train.n_rows} rows")
        index_set = build_index_set(split.train, resolved.knn)

        noisy_table = load_table(noisy, resolved.target_column).select(dataset.table.feature_names)
        if noisy_table.n_rows < resolved.knn.k:
            log_warning(f"Warning: only {noisy_table.n_rows} rows in the noisy table.")
        result = repair_table(index_set, split.validation, noisy_table, resolved.criterion,
                              split.scalers["train"], absolute_emd=resolved.emd_on_absolute)

        stem = os.path.splitext(os.path.basename(noisy))[0]
        repaired_path = os.path.join(output_dir, f"{stem}_repaired.csv")
        try:
            result.repaired.to_frame().to_csv(repaired_path, index=False, lineterminator="\n")
        except OSError as e:
            raise StorageError(f"Could not write {repaired_path}: {e}") from e
        detection_path = os.path.join(output_dir, f"{stem}_detection.json")
        _write_json(detection_path, {
            **result.detection.to_dict(),
            'threshold': result.threshold,
            'recoverability': result.recoverability,
            'flagged_row_ids': result.flagged_ids,
        })
        log_success(f"\nRepaired '{result.feature}' in {len(result.flagged_ids)} rows: {repaired_path}")
    except Exception as e:
        raise _fail(e)


if __name__ == "__main__":
    app()
