import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.data_ingest import FeatureTable, ScalerParams, minmax_scale
from core.detect import DeltaDistribution, DetectionReport, compute_deltas, detect_noisy_feature
from core.errors import ConfigError, DataError
from core.knn_core import NeighborIndex, impute_feature
from core.logging_utils import log_info, log_warning

MAPE_ZERO_EPS = 1e-8
MAPE_GOOD_PCT = 20.0


@dataclass(frozen=True)
class RecoverabilityCriterion:
    percentile: float = 95.0
    on_absolute: bool = True

    def __post_init__(self):
        if not 0.0 < self.percentile < 100.0:
            raise ConfigError(f"Recoverability percentile must be inside (0, 100), got {self.percentile}")

    def to_dict(self) -> Dict:
        return {'percentile': self.percentile, 'on_absolute': self.on_absolute}


@dataclass(frozen=True)
class MapeResult:
    per_sample: Dict[int, float]
    aggregate: float
    n_excluded: int


@dataclass(frozen=True)
class RecoveryReport:
    feature: str
    sigma: float
    threshold: float
    recoverable_ids: List[int]
    recoverability: float
    per_sample_mape: Dict[int, float]
    fraction_under_20pct: float
    aggregate_mape: float = float('nan')
    n_mape_excluded: int = 0
    samples: Optional[pd.DataFrame] = field(default=None, compare=False)

    @property
    def n_recoverable(self) -> int:
        return len(self.recoverable_ids)

    def to_dict(self) -> Dict:
        return {
            'feature': self.feature,
            'sigma': self.sigma,
            'threshold': self.threshold,
            'recoverability': self.recoverability,
            'n_recoverable': self.n_recoverable,
            'aggregate_mape': _finite_or_none(self.aggregate_mape),
            'fraction_under_20pct': _finite_or_none(self.fraction_under_20pct),
        }


@dataclass(frozen=True)
class RepairResult:
    detection: DetectionReport
    feature: str
    threshold: float
    flagged_ids: List[int]
    recoverability: float
    repaired: FeatureTable
    corrected_values: Dict[int, float]


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


def _criterion_values(deltas: np.ndarray, criterion: RecoverabilityCriterion) -> np.ndarray:
    return np.abs(deltas) if criterion.on_absolute else deltas


def baseline_threshold(base: DeltaDistribution, criterion: RecoverabilityCriterion) -> float:
    """Percentile of the baseline error, linear between order statistics (rank q*(n-1)/100)."""
    if base.n == 0:
        raise DataError("Baseline distribution is empty")
    values = _criterion_values(base.deltas, criterion)
    return float(np.percentile(values, criterion.percentile, method='linear'))


def flag_recoverable(noise: DeltaDistribution, threshold: float,
                     criterion: RecoverabilityCriterion) -> Tuple[List[int], float]:
    """Rows whose noisy error strictly exceeds the threshold, and their share of all rows."""
    values = _criterion_values(noise.deltas, criterion)
    flagged = values > threshold
    ids = [int(row_id) for row_id in noise.row_ids[flagged]]
    return ids, len(ids) / noise.n


def correct_samples(index: NeighborIndex, noisy_test: FeatureTable, feature: str,
                    ids: Sequence[int]) -> Dict[int, float]:
    """Re-imputes `feature` for the flagged rows from their other (uncorrupted) columns."""
    if index.target_feature != feature:
        raise DataError(f"Index imputes '{index.target_feature}', not '{feature}'")
    noisy_test.column_index(feature)
    if len(ids) == 0:
        return {}
    positions = noisy_test.positions_of(ids)
    queries = index.project(noisy_test)[positions]
    corrected = impute_feature(index, queries)
    return {int(row_id): float(value) for row_id, value in zip(ids, corrected)}


def mape(corrected: Mapping[int, float], clean: Mapping[int, float]) -> MapeResult:
    """
    Per-sample 100*|corrected - clean|/|clean|. Rows with |clean| < 1e-8 are
    left out of both the per-sample map and the aggregate, and counted.
    """
    if set(corrected) != set(clean):
        raise DataError("MAPE needs corrected and clean values for the same row ids")
    per_sample = {}
    excluded = 0
    for row_id in sorted(corrected):
        reference = clean[row_id]
        if abs(reference) < MAPE_ZERO_EPS:
            excluded += 1
            continue
        per_sample[row_id] = 100.0 * abs(corrected[row_id] - reference) / abs(reference)
    aggregate = float(np.mean(list(per_sample.values()))) if per_sample else float('nan')
    return MapeResult(per_sample=per_sample, aggregate=aggregate, n_excluded=excluded)


def r2(predicted: Sequence[float], actual: Sequence[float]) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or actual.size == 0:
        raise DataError("R² needs two equal-length, non-empty sequences")
    ss_tot = float(((actual - actual.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("R² is undefined for a constant actual series")
    ss_res = float(((actual - predicted) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def evaluate_recovery(index: NeighborIndex, base: DeltaDistribution, clean_test: FeatureTable,
                      noisy_test: FeatureTable, feature: str, sigma: float,
                      criterion: RecoverabilityCriterion) -> RecoveryReport:
    """Threshold, flag, correct and score one corrupted feature of the test set."""
    if index.target_feature != feature:
        raise DataError(f"Index imputes '{index.target_feature}', not '{feature}'")
    imputed = impute_feature(index, index.project(noisy_test))
    noise = DeltaDistribution(feature=feature, deltas=imputed - noisy_test.column(feature),
                              source='noise', row_ids=noisy_test.row_ids)
    threshold = baseline_threshold(base, criterion)
    ids, recoverability = flag_recoverable(noise, threshold, criterion)
    corrected = correct_samples(index, noisy_test, feature, ids)

    positions = clean_test.positions_of(ids)
    clean_values = clean_test.column(feature)[positions]
    noisy_values = noisy_test.column(feature)[noisy_test.positions_of(ids)]
    clean = {row_id: float(value) for row_id, value in zip(ids, clean_values)}
    scored = mape(corrected, clean)
    if scored.n_excluded:
        log_warning(f"MAPE for '{feature}' excluded {scored.n_excluded} row(s) with a zero clean value")

    under = [value < MAPE_GOOD_PCT for value in scored.per_sample.values()]
    fraction = float(np.mean(under)) if under else float('nan')
    samples = pd.DataFrame({
        'row_id': ids,
        'clean': clean_values,
        'noisy': noisy_values,
        'corrected': [corrected[row_id] for row_id in ids],
        'mape': [scored.per_sample.get(row_id, float('nan')) for row_id in ids],
    })
    return RecoveryReport(
        feature=feature,
        sigma=float(sigma),
        threshold=threshold,
        recoverable_ids=ids,
        recoverability=recoverability,
        per_sample_mape=scored.per_sample,
        fraction_under_20pct=fraction,
        aggregate_mape=scored.aggregate,
        n_mape_excluded=scored.n_excluded,
        samples=samples,
    )


def repair_table(index_set: Mapping[str, NeighborIndex], validation: FeatureTable, noisy: FeatureTable,
                 criterion: RecoverabilityCriterion, train_scaler: ScalerParams,
                 absolute_emd: bool = False) -> RepairResult:
    """
    Full workflow on a table with one unknown corrupted feature: detect it,
    flag recoverable rows, correct them. `noisy` is in its original units and
    is scaled on its own bounds for the search. Imputed values live in the
    training scale, so `train_scaler` maps them back; unflagged cells come
    back bit-identical.
    """
    if tuple(train_scaler.feature_names) != noisy.feature_names:
        raise DataError("Train scaler and noisy table cover different features")
    scaled, _ = minmax_scale(noisy)
    base = compute_deltas(index_set, validation, 'base')
    noise = compute_deltas(index_set, scaled, 'noise')
    detection = detect_noisy_feature(base, noise, absolute=absolute_emd)
    feature = detection.detected_feature
    log_info(f"Detected noisy feature: '{feature}' (EMD {detection.per_feature_emd[feature]:.6g})")

    noise_by_feature = {dist.feature: dist for dist in noise}
    base_by_feature = {dist.feature: dist for dist in base}
    threshold = baseline_threshold(base_by_feature[feature], criterion)
    ids, recoverability = flag_recoverable(noise_by_feature[feature], threshold, criterion)
    corrected_scaled = correct_samples(index_set[feature], scaled, feature, ids)

    position = train_scaler.feature_names.index(feature)
    lo = train_scaler.per_feature_min[position]
    hi = train_scaler.per_feature_max[position]
    corrected_raw = {row_id: float(value * (hi - lo) + lo) for row_id, value in corrected_scaled.items()}
    column = np.array(noisy.column(feature), copy=True)
    if ids:
        column[noisy.positions_of(ids)] = [corrected_raw[row_id] for row_id in ids]
    log_info(f"Corrected {len(ids)} of {noisy.n_rows} rows (recoverability {recoverability:.3f})")
    return RepairResult(
        detection=detection,
        feature=feature,
        threshold=threshold,
        flagged_ids=ids,
        recoverability=recoverability,
        repaired=noisy.with_column(feature, column),
        corrected_values=corrected_raw,
    )
