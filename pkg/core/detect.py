from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import wasserstein_distance

from core.data_ingest import FeatureTable
from core.errors import DataError
from core.knn_core import NeighborIndex, impute_feature

SOURCES = ("base", "noise")
DESCRIBE_PERCENTILES = (5, 25, 50, 75, 95)


@dataclass(frozen=True)
class DeltaDistribution:
    """Signed imputation errors (imputed - observed) for one feature, keyed by row id."""
    feature: str
    deltas: np.ndarray
    source: str
    row_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        deltas = np.array(self.deltas, dtype=float, copy=True).reshape(-1)
        if deltas.size == 0:
            raise DataError(f"Empty delta distribution for '{self.feature}'")
        if not np.all(np.isfinite(deltas)):
            raise DataError(f"Non-finite deltas for '{self.feature}'")
        if self.source not in SOURCES:
            raise DataError(f"Delta source must be one of {SOURCES}, got '{self.source}'")
        row_ids = self.row_ids
        if row_ids is None:
            row_ids = np.arange(deltas.size)
        row_ids = np.array(row_ids, dtype=np.int64, copy=True)
        if row_ids.shape != deltas.shape:
            raise DataError("Delta row ids and values differ in length")
        deltas.setflags(write=False)
        row_ids.setflags(write=False)
        object.__setattr__(self, 'deltas', deltas)
        object.__setattr__(self, 'row_ids', row_ids)

    @property
    def n(self) -> int:
        return self.deltas.size

    def describe(self) -> Dict:
        """Violin-plot summary: mean, std and a fixed set of percentiles."""
        quantiles = np.percentile(self.deltas, DESCRIBE_PERCENTILES)
        summary = {'feature': self.feature, 'source': self.source, 'n': self.n,
                   'mean': float(self.deltas.mean()), 'std': float(self.deltas.std())}
        for pct, value in zip(DESCRIBE_PERCENTILES, quantiles):
            summary[f'p{pct}'] = float(value)
        return summary


@dataclass(frozen=True)
class DetectionReport:
    injected_feature: Optional[str]
    per_feature_emd: Dict[str, float]
    detected_feature: str
    hit: Optional[bool]

    def to_dict(self) -> Dict:
        return {
            'injected_feature': self.injected_feature,
            'detected_feature': self.detected_feature,
            'hit': self.hit,
            'per_feature_emd': dict(self.per_feature_emd),
        }


def compute_deltas(index_set: Mapping[str, NeighborIndex], observed: FeatureTable, source: str,
                   features: Optional[Sequence[str]] = None) -> List[DeltaDistribution]:
    """
    Imputes each feature of `observed` from that row's other observed columns
    and records imputed - observed. `features` restricts the work to a subset;
    by default every feature of the table is covered, in table order.
    """
    if set(index_set) != set(observed.feature_names):
        missing = sorted(set(observed.feature_names) - set(index_set))
        extra = sorted(set(index_set) - set(observed.feature_names))
        raise DataError(f"Index set does not match table features (missing {missing}, extra {extra})")
    targets = observed.feature_names if features is None else tuple(features)

    distributions = []
    for feature in targets:
        index = index_set[feature]
        if index.target_feature != feature:
            raise DataError(f"Index keyed '{feature}' imputes '{index.target_feature}'")
        imputed = impute_feature(index, index.project(observed))
        distributions.append(DeltaDistribution(
            feature=feature,
            deltas=imputed - observed.column(feature),
            source=source,
            row_ids=observed.row_ids,
        ))
    return distributions


def _samples(dist: Union[DeltaDistribution, Sequence[float]]) -> np.ndarray:
    values = dist.deltas if isinstance(dist, DeltaDistribution) else np.asarray(dist, dtype=float)
    if values.size == 0:
        raise DataError("EMD needs non-empty samples")
    return values


def emd_1d(a: Union[DeltaDistribution, Sequence[float]], b: Union[DeltaDistribution, Sequence[float]],
           absolute: bool = False) -> float:
    """
    Wasserstein-1 distance between the two empirical distributions, i.e. the
    integral of |F_a - F_b|. With `absolute` the magnitudes |delta| are compared.
    """
    u, v = _samples(a), _samples(b)
    if absolute:
        u, v = np.abs(u), np.abs(v)
    return float(wasserstein_distance(u, v))


def detect_noisy_feature(base: Sequence[DeltaDistribution], noise: Sequence[DeltaDistribution],
                         injected_feature: Optional[str] = None, absolute: bool = False) -> DetectionReport:
    """Flags the feature whose error distribution moved furthest (largest EMD) from its baseline."""
    base_features = [d.feature for d in base]
    noise_features = [d.feature for d in noise]
    if base_features != noise_features:
        raise DataError("Base and noise distributions must cover the same features in the same order")
    if not base_features:
        raise DataError("No distributions to compare")

    emds = np.array([emd_1d(b, n, absolute=absolute) for b, n in zip(base, noise)])
    detected = base_features[int(np.argmax(emds))]
    hit = None if injected_feature is None else detected == injected_feature
    return DetectionReport(
        injected_feature=injected_feature,
        per_feature_emd={feature: float(value) for feature, value in zip(base_features, emds)},
        detected_feature=detected,
        hit=hit,
    )


def detectability_rate(reports: Sequence[DetectionReport]) -> float:
    if not reports:
        raise DataError("Detectability needs at least one detection report")
    if any(report.hit is None for report in reports):
        raise DataError("Detectability needs reports with a known injected feature")
    return sum(1 for report in reports if report.hit) / len(reports)
