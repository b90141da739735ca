import datetime
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import __version__
from core.config import ExperimentConfig
from core.data_ingest import (DataSplit, DroppedFeature, FeatureTable, feature_profile, load_feature_list,
                              load_table, pearson_matrix, prepare_split, prune_correlated, select_features)
from core.detect import (DeltaDistribution, DetectionReport, compute_deltas, detect_noisy_feature,
                         detectability_rate)
from core.errors import ConfigError, DataError, StorageError
from core.knn_core import build_index, build_index_set, impute_feature
from core.logging_utils import log_debug, log_info, log_step, log_warning
from core.noise_lab import derive_seed, inject_gaussian, noise_spec_for_cell
from core.recover import (MAPE_GOOD_PCT, baseline_threshold, evaluate_recovery, flag_recoverable, r2)

EXPERIMENT_KINDS = ("baseline", "detection", "recoverability", "correction")

# Fields that order a kind's cells; emitted reports are sorted on them.
CELL_KEYS = {
    "baseline": ("feature", "train_size", "seed"),
    "detection": ("sigma", "train_size", "seed", "injected_feature"),
    "recoverability": ("feature", "sigma", "seed"),
    "correction": ("feature", "seed"),
}


@dataclass
class SweepReport:
    kind: str
    cells: List[Dict[str, Any]]
    summary: List[Dict[str, Any]]
    config: Dict[str, Any]
    master_seed: int
    input_sha256: str
    created_at: str
    version: str = __version__
    extras: Dict[str, Any] = field(default_factory=dict)
    samples: Optional[pd.DataFrame] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'version': self.version,
            'created_at': self.created_at,
            'input_sha256': self.input_sha256,
            'master_seed': self.master_seed,
            'config': self.config,
            'cells': self.cells,
            'summary': self.summary,
            'extras': self.extras,
        }


@dataclass(frozen=True)
class Dataset:
    """The pruned table every experiment of one config starts from."""
    table: FeatureTable
    dropped: List[DroppedFeature]
    input_sha256: str


@dataclass(frozen=True)
class CorrelationPoint:
    feature: str
    mean_abs_correlation: float
    r2_at_min_size: float

    def to_dict(self) -> Dict[str, Any]:
        return {'feature': self.feature, 'mean_abs_correlation': self.mean_abs_correlation,
                'r2_at_min_size': _none_if_nan(self.r2_at_min_size)}


def _none_if_nan(value: Optional[float]) -> Optional[float]:
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def train_size_ladder(full: int, start: int) -> List[int]:
    """start, 2*start, 4*start, ... with the first size reaching `full` clamped to it."""
    if start <= 0 or full <= 0:
        raise ConfigError(f"Train sizes must be positive, got start={start}, full={full}")
    if start > full:
        raise ConfigError(f"Smallest train size {start} exceeds the full train split ({full})")
    sizes = []
    size = start
    while size < full:
        sizes.append(size)
        size *= 2
    sizes.append(full)
    return sizes


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 20), b''):
                digest.update(chunk)
    except OSError as e:
        raise StorageError(f"Could not read {path}: {e}") from e
    return digest.hexdigest()


def report_timestamp() -> str:
    """ISO timestamp from SOURCE_DATE_EPOCH, the Unix epoch when unset."""
    raw = os.getenv('SOURCE_DATE_EPOCH', '0')
    try:
        epoch = int(raw)
    except ValueError:
        raise ConfigError(f"SOURCE_DATE_EPOCH must be an integer, got '{raw}'") from None
    return datetime.datetime.fromtimestamp(epoch, tz=datetime.timezone.utc).isoformat()


def load_dataset(config: ExperimentConfig) -> Dataset:
    log_step(f"Loading {config.input_path}")
    table = load_table(config.input_path, config.target_column)
    if config.kept_features_path:
        table = select_features(table, load_feature_list(config.kept_features_path))
    pruned, dropped = prune_correlated(table, config.prune_threshold)
    log_info(f"{pruned.n_rows} rows, {pruned.n_features} features kept, {len(dropped)} pruned "
             f"at |r| > {config.prune_threshold}")
    if pruned.n_features < 2:
        raise DataError("At least two features are needed to impute one from the others")
    return Dataset(table=pruned, dropped=dropped, input_sha256=file_sha256(config.input_path))


def split_for_seed(dataset: Dataset, config: ExperimentConfig, seed: int) -> DataSplit:
    return prepare_split(dataset.table, config.split_ratios, derive_seed(config.master_seed, 'split', seed))


def subsample_train(train: FeatureTable, size: int, master_seed: int, seed: int) -> FeatureTable:
    """
    First `size` rows of one seeded permutation of the train split, so a
    larger size always contains every smaller one for the same seed.
    """
    if size > train.n_rows:
        raise ConfigError(f"Train size {size} exceeds the train split ({train.n_rows} rows)")
    if size == train.n_rows:
        return train
    order = np.random.default_rng(derive_seed(master_seed, 'subsample', seed)).permutation(train.n_rows)
    return train.take(np.sort(order[:size]))


def resolve_train_sizes(config: ExperimentConfig, n_train: int) -> List[int]:
    sizes = list(config.train_sizes) or train_size_ladder(n_train, config.train_size_start)
    too_big = [size for size in sizes if size > n_train]
    if too_big:
        raise ConfigError(f"Train sizes {too_big} exceed the train split ({n_train} rows)")
    if sizes[0] < config.knn.k:
        raise ConfigError(f"Train size {sizes[0]} is smaller than k={config.knn.k}")
    return sizes


def run_units(units: Sequence, work: Callable[[Any], List[Dict[str, Any]]], threads: int) -> List[Dict[str, Any]]:
    """Runs independent work units, on a thread pool when threads > 1, and concatenates their rows."""
    if threads <= 1 or len(units) <= 1:
        results = [work(unit) for unit in units]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(work, units))
    return [row for rows in results for row in rows]


def sort_cells(kind: str, cells: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    keys = CELL_KEYS[kind]
    return sorted(cells, key=lambda cell: tuple(cell[key] for key in keys))


def _mean_std(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None and np.isfinite(v)]
    if not present:
        return None, None
    return float(np.mean(present)), float(np.std(present))


def _group(cells: List[Dict[str, Any]], keys: Sequence[str]) -> Dict[Tuple, List[Dict[str, Any]]]:
    groups: Dict[Tuple, List[Dict[str, Any]]] = {}
    for cell in cells:
        groups.setdefault(tuple(cell[key] for key in keys), []).append(cell)
    return dict(sorted(groups.items()))


def _new_report(kind: str, config: ExperimentConfig, dataset: Dataset, cells, summary, **extra) -> SweepReport:
    return SweepReport(
        kind=kind,
        cells=sort_cells(kind, cells),
        summary=summary,
        config=config.to_dict(),
        master_seed=config.master_seed,
        input_sha256=dataset.input_sha256,
        created_at=report_timestamp(),
        **extra,
    )


def _prepare(config: ExperimentConfig, dataset: Optional[Dataset]) -> Tuple[Dataset, Dict[int, DataSplit]]:
    dataset = dataset or load_dataset(config)
    splits = {seed: split_for_seed(dataset, config, seed) for seed in config.seeds}
    return dataset, splits


# --- baseline -------------------------------------------------------------

def _baseline_unit(config: ExperimentConfig, splits: Dict[int, DataSplit]):
    def work(unit: Tuple[int, int]) -> List[Dict[str, Any]]:
        size, seed = unit
        split = splits[seed]
        train = subsample_train(split.train, size, config.master_seed, seed)
        rows = []
        for feature in train.feature_names:
            index = build_index(train, feature, config.knn)
            imputed = impute_feature(index, index.project(split.validation))
            try:
                score = r2(imputed, split.validation.column(feature))
            except DataError:
                log_warning(f"R² undefined for '{feature}' (constant on validation, seed {seed})")
                score = None
            rows.append({'feature': feature, 'train_size': size, 'seed': seed, 'r2': score})
        log_debug(f"Baseline unit size={size} seed={seed} done")
        return rows
    return work


def correlation_points(splits: Dict[int, DataSplit], cells: List[Dict[str, Any]]) -> List[CorrelationPoint]:
    """Mean |r| of each feature against the others on the train split, against its R² at the smallest size."""
    seeds = sorted(splits)
    features = splits[seeds[0]].train.feature_names
    mean_abs = np.zeros(len(features))
    for seed in seeds:
        corr = np.abs(pearson_matrix(splits[seed].train))
        np.fill_diagonal(corr, np.nan)
        mean_abs += np.nanmean(corr, axis=1)
    mean_abs /= len(seeds)

    min_size = min(cell['train_size'] for cell in cells)
    points = []
    for position, feature in enumerate(features):
        scores = [c['r2'] for c in cells if c['feature'] == feature and c['train_size'] == min_size]
        mean, _ = _mean_std(scores)
        points.append(CorrelationPoint(feature=feature, mean_abs_correlation=float(mean_abs[position]),
                                       r2_at_min_size=float('nan') if mean is None else mean))
    return points


def correlation_association(points: Sequence[CorrelationPoint]) -> float:
    """Pearson r between mean |r| and R² at the smallest size, over features with a defined R²."""
    usable = [p for p in points if np.isfinite(p.r2_at_min_size)]
    if len(usable) < 2:
        raise DataError("Correlation association needs at least two features with a defined R²")
    x = np.array([p.mean_abs_correlation for p in usable])
    y = np.array([p.r2_at_min_size for p in usable])
    if x.std() == 0.0 or y.std() == 0.0:
        raise DataError("Correlation association is undefined for a constant series")
    return float(np.corrcoef(x, y)[0, 1])


def run_baseline_eval(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> SweepReport:
    dataset, splits = _prepare(config, dataset)
    sizes = resolve_train_sizes(config, splits[config.seeds[0]].train.n_rows)
    units = [(size, seed) for size in sizes for seed in config.seeds]
    log_step(f"Baseline R²: {len(sizes)} sizes x {len(config.seeds)} seeds x {dataset.table.n_features} features")
    cells = run_units(units, _baseline_unit(config, splits), config.threads)

    summary = []
    for (feature, size), group in _group(cells, ('feature', 'train_size')).items():
        mean, std = _mean_std([c['r2'] for c in group])
        summary.append({'feature': feature, 'train_size': size, 'n_seeds': len(group),
                        'r2_mean': mean, 'r2_std': std})

    points = correlation_points(splits, cells)
    extras: Dict[str, Any] = {'correlation_vs_r2': [p.to_dict() for p in points],
                              'dropped_features': [asdict(d) for d in dataset.dropped]}
    try:
        extras['correlation_association'] = correlation_association(points)
    except DataError as e:
        log_warning(str(e))
        extras['correlation_association'] = None
    return _new_report("baseline", config, dataset, cells, summary, extras=extras)


def correlation_vs_r2(config: ExperimentConfig, baseline: Optional[SweepReport] = None,
                      dataset: Optional[Dataset] = None) -> List[CorrelationPoint]:
    """Per-feature correlation-vs-R² points; runs the baseline at the smallest size when none is given."""
    dataset, splits = _prepare(config, dataset)
    if baseline is None:
        sizes = resolve_train_sizes(config, splits[config.seeds[0]].train.n_rows)
        units = [(sizes[0], seed) for seed in config.seeds]
        cells = run_units(units, _baseline_unit(config, splits), config.threads)
    else:
        cells = baseline.cells
    return correlation_points(splits, cells)


# --- detection ------------------------------------------------------------

def _violin(dist: DeltaDistribution, **keys) -> Dict[str, Any]:
    return {**keys, **dist.describe()}


def _pop_violins(cells: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Strips the per-cell delta summaries, in cell order."""
    return [row for cell in cells for row in cell.pop('_violins')]


def _detection_unit(config: ExperimentConfig, splits: Dict[int, DataSplit]):
    def work(unit: Tuple[int, int]) -> List[Dict[str, Any]]:
        size, seed = unit
        split = splits[seed]
        train = subsample_train(split.train, size, config.master_seed, seed)
        index_set = build_index_set(train, config.knn)
        base = compute_deltas(index_set, split.validation, 'base')
        violins = [_violin(dist, train_size=size, seed=seed) for dist in base]
        rows = []
        for sigma in config.sigma_ladder:
            for feature in split.test.feature_names:
                spec = noise_spec_for_cell(config.master_seed, feature, sigma, size, seed, clip=config.clip_noise)
                noisy = inject_gaussian(split.test, spec)
                noise = compute_deltas(index_set, noisy, 'noise')
                report = detect_noisy_feature(base, noise, injected_feature=feature,
                                              absolute=config.emd_on_absolute)
                injected = next(dist for dist in noise if dist.feature == feature)
                violins.append(_violin(injected, sigma=sigma, train_size=size, seed=seed))
                rows.append({'sigma': sigma, 'train_size': size, 'seed': seed,
                             'injected_feature': feature, 'detected_feature': report.detected_feature,
                             'hit': report.hit, 'per_feature_emd': report.per_feature_emd,
                             '_violins': violins})
                violins = []
        log_debug(f"Detection unit size={size} seed={seed} done")
        return rows
    return work


def _as_detection_reports(cells: Sequence[Dict[str, Any]]) -> List[DetectionReport]:
    return [DetectionReport(injected_feature=c['injected_feature'], per_feature_emd=c['per_feature_emd'],
                            detected_feature=c['detected_feature'], hit=c['hit']) for c in cells]


def run_detection_sweep(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> SweepReport:
    dataset, splits = _prepare(config, dataset)
    sizes = resolve_train_sizes(config, splits[config.seeds[0]].train.n_rows)
    units = [(size, seed) for size in sizes for seed in config.seeds]
    log_step(f"Detection sweep: {len(config.sigma_ladder)} sigmas x {len(sizes)} sizes x "
             f"{len(config.seeds)} seeds x {dataset.table.n_features} features")
    cells = sort_cells("detection", run_units(units, _detection_unit(config, splits), config.threads))
    violins = _pop_violins(cells)

    summary = []
    per_seed = _group(cells, ('sigma', 'train_size', 'seed'))
    for (sigma, size, seed), group in per_seed.items():
        summary.append({'level': 'seed', 'sigma': sigma, 'train_size': size, 'seed': seed,
                        'detectability': detectability_rate(_as_detection_reports(group))})
    for (sigma, size), group in _group(summary[:], ('sigma', 'train_size')).items():
        mean, std = _mean_std([row['detectability'] for row in group])
        summary.append({'level': 'grid', 'sigma': sigma, 'train_size': size, 'n_seeds': len(group),
                        'detectability_mean': mean, 'detectability_std': std})
    return _new_report("detection", config, dataset, cells, summary, extras={'delta_summaries': violins})


# --- recoverability -------------------------------------------------------

def _recoverability_unit(config: ExperimentConfig, splits: Dict[int, DataSplit]):
    def work(seed: int) -> List[Dict[str, Any]]:
        split = splits[seed]
        size = split.train.n_rows
        index_set = build_index_set(split.train, config.knn)
        base = {dist.feature: dist for dist in compute_deltas(index_set, split.validation, 'base')}
        rows = []
        for feature in split.test.feature_names:
            threshold = baseline_threshold(base[feature], config.criterion)
            violins = [_violin(base[feature], seed=seed, threshold=threshold)]
            for sigma in config.sigma_ladder:
                spec = noise_spec_for_cell(config.master_seed, feature, sigma, size, seed, clip=config.clip_noise)
                noisy = inject_gaussian(split.test, spec)
                noise = compute_deltas(index_set, noisy, 'noise', features=[feature])[0]
                ids, recoverability = flag_recoverable(noise, threshold, config.criterion)
                violins.append(_violin(noise, sigma=sigma, seed=seed, threshold=threshold))
                rows.append({'feature': feature, 'sigma': sigma, 'seed': seed, 'threshold': threshold,
                             'n_recoverable': len(ids), 'recoverability': recoverability,
                             '_violins': violins})
                violins = []
        log_debug(f"Recoverability unit seed={seed} done")
        return rows
    return work


def run_recoverability_sweep(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> SweepReport:
    dataset, splits = _prepare(config, dataset)
    log_step(f"Recoverability sweep: {dataset.table.n_features} features x {len(config.sigma_ladder)} sigmas x "
             f"{len(config.seeds)} seeds")
    cells = sort_cells("recoverability", run_units(list(config.seeds), _recoverability_unit(config, splits),
                                                   config.threads))
    violins = _pop_violins(cells)

    summary = []
    for (feature, sigma), group in _group(cells, ('feature', 'sigma')).items():
        mean, std = _mean_std([c['recoverability'] for c in group])
        summary.append({'feature': feature, 'sigma': sigma, 'n_seeds': len(group),
                        'recoverability_mean': mean, 'recoverability_std': std})
    profiles = feature_profile(splits[config.seeds[0]].train)
    return _new_report("recoverability", config, dataset, cells, summary,
                       extras={'feature_profiles': [p.to_dict() for p in profiles],
                               'delta_summaries': violins})


# --- correction -----------------------------------------------------------

def _correction_unit(config: ExperimentConfig, splits: Dict[int, DataSplit]):
    sigma = config.correction_sigma

    def work(seed: int) -> List[Dict[str, Any]]:
        split = splits[seed]
        size = split.train.n_rows
        index_set = build_index_set(split.train, config.knn)
        base = {dist.feature: dist for dist in compute_deltas(index_set, split.validation, 'base')}
        rows = []
        for feature in split.test.feature_names:
            spec = noise_spec_for_cell(config.master_seed, feature, sigma, size, seed, clip=config.clip_noise)
            noisy = inject_gaussian(split.test, spec)
            outcome = evaluate_recovery(index_set[feature], base[feature], split.test, noisy,
                                        feature, sigma, config.criterion)
            samples = outcome.samples.assign(feature=feature, seed=seed)
            rows.append({
                'feature': feature, 'seed': seed, 'sigma': sigma,
                'threshold': outcome.threshold,
                'n_recoverable': outcome.n_recoverable,
                'recoverability': outcome.recoverability,
                'aggregate_mape': _none_if_nan(outcome.aggregate_mape),
                'fraction_under_20pct': _none_if_nan(outcome.fraction_under_20pct),
                'n_mape_excluded': outcome.n_mape_excluded,
                '_samples': samples,
            })
        log_debug(f"Correction unit seed={seed} done")
        return rows
    return work


def _pooled_row(label: str, samples: pd.DataFrame, n_cells: int) -> Dict[str, Any]:
    scored = samples['mape'].dropna()
    return {
        'feature': label,
        'n_cells': n_cells,
        'n_recoverable': int(len(samples)),
        'n_scored': int(len(scored)),
        'mape_mean': _none_if_nan(float(scored.mean())) if len(scored) else None,
        'mape_median': _none_if_nan(float(scored.median())) if len(scored) else None,
        'fraction_under_20pct': float((scored < MAPE_GOOD_PCT).mean()) if len(scored) else None,
    }


def run_correction_eval(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> SweepReport:
    dataset, splits = _prepare(config, dataset)
    log_step(f"Correction eval at sigma={config.correction_sigma}: {dataset.table.n_features} features x "
             f"{len(config.seeds)} seeds")
    rows = run_units(list(config.seeds), _correction_unit(config, splits), config.threads)
    rows = sort_cells("correction", rows)
    frames = [row.pop('_samples') for row in rows]
    samples = pd.concat(frames, ignore_index=True)
    samples = samples[['feature', 'seed', 'row_id', 'clean', 'noisy', 'corrected', 'mape']]

    summary = [_pooled_row('__all__', samples, len(rows))]
    for feature, group in _group(rows, ('feature',)).items():
        subset = samples[samples['feature'] == feature[0]]
        summary.append(_pooled_row(feature[0], subset, len(group)))
    pooled = summary[0]['fraction_under_20pct']
    if pooled is not None:
        log_info(f"{pooled:.1%} of recoverable samples corrected to under {MAPE_GOOD_PCT:g}% MAPE")
    return _new_report("correction", config, dataset, rows, summary,
                       samples=samples if config.write_samples else None)


RUNNERS = {
    "baseline": run_baseline_eval,
    "detection": run_detection_sweep,
    "recoverability": run_recoverability_sweep,
    "correction": run_correction_eval,
}
