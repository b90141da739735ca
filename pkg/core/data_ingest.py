import os
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import ConfigError, DataError, StorageError, UnknownFeatureError
from core.logging_utils import log_debug, log_info, log_warning

# Tokens treated as an empty cell; rows holding one are rejected, not parsed.
MISSING_TOKENS = {"", "na", "nan", "null", "none", "n/a"}
DISCRETE_MAX_DISTINCT = 20


@dataclass(frozen=True)
class FeatureTable:
    """
    Rows x features matrix of reals with stable row identities.

    The target column, when present, rides along in `target` and is never
    part of `feature_names`, so it stays out of every feature mask.
    """
    feature_names: Tuple[str, ...]
    values: np.ndarray
    row_ids: np.ndarray
    target_name: Optional[str] = None
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        names = tuple(str(name) for name in self.feature_names)
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1 and len(names) == 0:
            values = values.reshape(len(values), 0)
        if values.ndim != 2:
            raise DataError(f"Table values must be 2-D, got shape {values.shape}")
        if len(set(names)) != len(names):
            duplicates = sorted({name for name in names if names.count(name) > 1})
            raise DataError(f"Duplicate feature names: {duplicates}")
        if values.shape[1] != len(names):
            raise DataError(f"{len(names)} feature names for {values.shape[1]} columns")
        if not np.all(np.isfinite(values)):
            raise DataError("Table contains NaN or infinite values")

        row_ids = np.array(self.row_ids, dtype=np.int64, copy=True)
        if row_ids.shape != (values.shape[0],):
            raise DataError(f"{len(row_ids)} row ids for {values.shape[0]} rows")
        if len(np.unique(row_ids)) != len(row_ids):
            raise DataError("Row ids must be unique")

        target = self.target
        if target is not None:
            target = np.array(target, dtype=float, copy=True)
            if target.shape != (values.shape[0],):
                raise DataError(f"Target has {len(target)} entries for {values.shape[0]} rows")
            target.setflags(write=False)

        values.setflags(write=False)
        row_ids.setflags(write=False)
        object.__setattr__(self, 'feature_names', names)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'row_ids', row_ids)
        object.__setattr__(self, 'target', target)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise UnknownFeatureError(name, self.feature_names) from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """Values of `names`, in that order, as a (rows x len(names)) array."""
        positions = [self.column_index(name) for name in names]
        return self.values[:, positions]

    def other_features(self, name: str) -> Tuple[str, ...]:
        self.column_index(name)
        return tuple(f for f in self.feature_names if f != name)

    def positions_of(self, row_ids: Sequence[int]) -> np.ndarray:
        """Row positions for the given row ids; unknown ids raise DataError."""
        lookup = {int(row_id): pos for pos, row_id in enumerate(self.row_ids)}
        missing = [int(r) for r in row_ids if int(r) not in lookup]
        if missing:
            raise DataError(f"Unknown row ids: {missing[:10]}{'...' if len(missing) > 10 else ''}")
        return np.array([lookup[int(r)] for r in row_ids], dtype=np.int64)

    def take(self, positions: Sequence[int]) -> 'FeatureTable':
        positions = np.asarray(positions, dtype=np.int64)
        return FeatureTable(
            feature_names=self.feature_names,
            values=self.values[positions],
            row_ids=self.row_ids[positions],
            target_name=self.target_name,
            target=None if self.target is None else self.target[positions],
        )

    def select(self, names: Sequence[str]) -> 'FeatureTable':
        return FeatureTable(
            feature_names=tuple(names),
            values=self.columns(names),
            row_ids=self.row_ids,
            target_name=self.target_name,
            target=self.target,
        )

    def with_column(self, name: str, new_values: np.ndarray) -> 'FeatureTable':
        """Copy of the table with one feature column replaced."""
        position = self.column_index(name)
        values = np.array(self.values, copy=True)
        values[:, position] = new_values
        return FeatureTable(self.feature_names, values, self.row_ids, self.target_name, self.target)

    def with_values(self, new_values: np.ndarray) -> 'FeatureTable':
        return FeatureTable(self.feature_names, new_values, self.row_ids, self.target_name, self.target)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.feature_names))
        frame.insert(0, 'row_id', self.row_ids)
        if self.target is not None:
            frame[self.target_name] = self.target
        return frame


@dataclass(frozen=True)
class ScalerParams:
    feature_names: Tuple[str, ...]
    per_feature_min: np.ndarray
    per_feature_max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.per_feature_min, dtype=float, copy=True)
        hi = np.array(self.per_feature_max, dtype=float, copy=True)
        if lo.shape != hi.shape or lo.shape != (len(self.feature_names),):
            raise DataError("Scaler bounds must have one entry per feature")
        if np.any(lo > hi):
            raise DataError("Scaler min exceeds max for some feature")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, 'feature_names', tuple(self.feature_names))
        object.__setattr__(self, 'per_feature_min', lo)
        object.__setattr__(self, 'per_feature_max', hi)

    @property
    def degenerate(self) -> np.ndarray:
        return self.per_feature_max == self.per_feature_min

    def transform(self, values: np.ndarray) -> np.ndarray:
        span = self.per_feature_max - self.per_feature_min
        safe_span = np.where(self.degenerate, 1.0, span)
        scaled = (np.asarray(values, dtype=float) - self.per_feature_min) / safe_span
        scaled[..., self.degenerate] = 0.0
        return scaled

    def inverse(self, values: np.ndarray) -> np.ndarray:
        span = self.per_feature_max - self.per_feature_min
        return np.asarray(values, dtype=float) * span + self.per_feature_min

    def to_dict(self) -> Dict:
        return {
            name: {'min': float(lo), 'max': float(hi)}
            for name, lo, hi in zip(self.feature_names, self.per_feature_min, self.per_feature_max)
        }


@dataclass(frozen=True)
class DroppedFeature:
    name: str
    correlated_with: str
    correlation: float


@dataclass(frozen=True)
class DataSplit:
    train: FeatureTable
    validation: FeatureTable
    test: FeatureTable
    seed: int
    scalers: Dict[str, ScalerParams] = field(default_factory=dict)

    def subsets(self) -> Dict[str, FeatureTable]:
        return {'train': self.train, 'validation': self.validation, 'test': self.test}


@dataclass(frozen=True)
class FeatureProfile:
    feature: str
    std: float
    iqr: float
    n_distinct: int
    distinct_fraction: float
    discrete: bool

    def to_dict(self) -> Dict:
        return {
            'feature': self.feature,
            'std': self.std,
            'iqr': self.iqr,
            'n_distinct': self.n_distinct,
            'distinct_fraction': self.distinct_fraction,
            'discrete': self.discrete,
        }


def load_table(path: str, target_column: Optional[str]) -> FeatureTable:
    """
    Loads a headered numeric CSV into a FeatureTable.

    Rows with an empty (or NaN/inf) cell are rejected with a warning; a cell
    that is present but not a number is an error naming its data-row index
    and column. Row ids are assigned 0..n-1 over the accepted rows.
    """
    if not os.path.isfile(path):
        raise StorageError(f"Input file not found: {path}")
    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False,
                          skip_blank_lines=True, encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise StorageError(f"Could not read {path}: {e}") from e
    except pd.errors.ParserError as e:
        raise DataError(f"Malformed CSV {path}: {e}") from e
    except pd.errors.EmptyDataError:
        raise DataError(f"CSV file {path} is empty") from None

    header = [str(name).strip() for name in raw.iloc[0].tolist()]
    body = raw.iloc[1:].reset_index(drop=True)
    body.columns = range(len(header))

    seen = set()
    duplicates = []
    for name in header:
        if name in seen:
            duplicates.append(name)
        seen.add(name)
    if duplicates:
        raise DataError(f"Duplicate header names in {path}: {sorted(set(duplicates))}")
    if target_column is not None and target_column not in header:
        raise DataError(f"Target column '{target_column}' not found in header of {path}")

    numeric = np.empty((len(body), len(header)), dtype=float)
    missing = np.zeros(len(body), dtype=bool)
    for col_pos, name in enumerate(header):
        cells = body[col_pos].fillna('').str.strip()
        is_missing = cells.str.lower().isin(MISSING_TOKENS)
        parsed = pd.to_numeric(cells.where(~is_missing), errors='coerce')
        bad = parsed.isna() & ~is_missing
        if bad.any():
            row_index = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"Non-numeric value '{cells.iloc[row_index]}' at row {row_index}, column '{name}' in {path}"
            )
        column = parsed.to_numpy(dtype=float)
        missing |= ~np.isfinite(column)
        numeric[:, col_pos] = column

    if missing.any():
        log_warning(f"Rejected {int(missing.sum())} row(s) with missing or non-finite cells from {path}")
    numeric = numeric[~missing]

    feature_positions = [i for i, name in enumerate(header) if name != target_column]
    target = None
    if target_column is not None:
        target = numeric[:, header.index(target_column)]

    table = FeatureTable(
        feature_names=tuple(header[i] for i in feature_positions),
        values=numeric[:, feature_positions],
        row_ids=np.arange(numeric.shape[0]),
        target_name=target_column,
        target=target,
    )
    log_info(f"Loaded {table.n_rows} rows x {table.n_features} features from {path}")
    return table


def load_feature_list(path: str) -> List[str]:
    """Reads a kept-feature list: one name per line, '#' comments and blank lines ignored."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise StorageError(f"Feature list not found: {path}") from None
    except OSError as e:
        raise StorageError(f"Could not read feature list {path}: {e}") from e

    names = [line.strip() for line in lines]
    names = [name for name in names if name and not name.startswith('#')]
    if len(set(names)) != len(names):
        raise DataError(f"Feature list {path} contains duplicate names")
    if not names:
        raise DataError(f"Feature list {path} is empty")
    return names


def select_features(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    selected = table.select(names)
    log_debug(f"Selected {selected.n_features} of {table.n_features} features")
    return selected


def pearson_matrix(table: FeatureTable) -> np.ndarray:
    """
    Pairwise Pearson correlation of the feature columns.

    A zero-variance column correlates 0 with every other column; the
    diagonal is always 1.
    """
    if table.n_rows < 2:
        raise DataError("Pearson correlation needs at least 2 rows")
    centered = table.values - table.values.mean(axis=0)
    norms = np.sqrt(np.einsum('ij,ij->j', centered, centered))
    constant = norms == 0.0
    safe = np.where(constant, 1.0, norms)
    normalized = centered / safe
    corr = normalized.T @ normalized
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def prune_correlated(table: FeatureTable, threshold: float) -> Tuple[FeatureTable, List[DroppedFeature]]:
    """
    Greedy left-to-right pruning: a feature is dropped when |r| exceeds
    `threshold` against any feature already retained; the earlier column wins.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"Prune threshold must be in (0, 1], got {threshold}")
    corr = np.abs(pearson_matrix(table))
    retained: List[int] = []
    dropped: List[DroppedFeature] = []
    for j in range(table.n_features):
        over = [i for i in retained if corr[i, j] > threshold]
        if over:
            trigger = over[0]
            dropped.append(DroppedFeature(
                name=table.feature_names[j],
                correlated_with=table.feature_names[trigger],
                correlation=float(corr[trigger, j]),
            ))
        else:
            retained.append(j)

    pruned = table.select([table.feature_names[j] for j in retained])
    log_info(f"Correlation pruning at {threshold}: kept {pruned.n_features}, dropped {len(dropped)}")
    return pruned, dropped


def split_sizes(n_rows: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Train and validation get floor(ratio * n); the test subset takes the remainder."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"Split ratios must be three positive numbers, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"Split ratios must sum to 1, got {sum(ratios)}")
    n_train = int(math.floor(ratios[0] * n_rows + 1e-9))
    n_validation = int(math.floor(ratios[1] * n_rows + 1e-9))
    n_test = n_rows - n_train - n_validation
    if min(n_train, n_validation, n_test) <= 0:
        raise DataError(
            f"Split of {n_rows} rows by {list(ratios)} leaves an empty subset "
            f"({n_train}/{n_validation}/{n_test})"
        )
    return n_train, n_validation, n_test


def split_dataset(table: FeatureTable, ratios: Sequence[float], seed: int) -> DataSplit:
    n_train, n_validation, _ = split_sizes(table.n_rows, ratios)
    permutation = np.random.default_rng(seed).permutation(table.n_rows)
    train = table.take(permutation[:n_train])
    validation = table.take(permutation[n_train:n_train + n_validation])
    test = table.take(permutation[n_train + n_validation:])
    log_debug(f"Split seed {seed}: {train.n_rows}/{validation.n_rows}/{test.n_rows}")
    return DataSplit(train=train, validation=validation, test=test, seed=seed)


def minmax_scale(table: FeatureTable) -> Tuple[FeatureTable, ScalerParams]:
    """Fits min-max bounds on `table` and applies them to the same table."""
    if table.n_rows == 0:
        raise DataError("Cannot scale an empty table")
    params = ScalerParams(
        feature_names=table.feature_names,
        per_feature_min=table.values.min(axis=0),
        per_feature_max=table.values.max(axis=0),
    )
    return table.with_values(params.transform(table.values)), params


def inverse_scale(table: FeatureTable, params: ScalerParams) -> FeatureTable:
    if tuple(params.feature_names) != table.feature_names:
        raise DataError("Scaler was fitted on a different feature set")
    return table.with_values(params.inverse(table.values))


def prepare_split(table: FeatureTable, ratios: Sequence[float], seed: int) -> DataSplit:
    """Seeded 3-way split, then each subset min-max scaled on its own bounds."""
    raw = split_dataset(table, ratios, seed)
    scaled = {}
    scalers = {}
    for name, subset in raw.subsets().items():
        scaled[name], scalers[name] = minmax_scale(subset)
    return DataSplit(
        train=scaled['train'],
        validation=scaled['validation'],
        test=scaled['test'],
        seed=seed,
        scalers=scalers,
    )


def feature_profile(table: FeatureTable) -> List[FeatureProfile]:
    """Distribution breadth per feature: spread, IQR and how discrete the values are."""
    profiles = []
    for position, name in enumerate(table.feature_names):
        column = table.values[:, position]
        q25, q75 = np.percentile(column, [25, 75])
        n_distinct = int(len(np.unique(column)))
        profiles.append(FeatureProfile(
            feature=name,
            std=float(column.std()),
            iqr=float(q75 - q25),
            n_distinct=n_distinct,
            distinct_fraction=n_distinct / max(table.n_rows, 1),
            discrete=n_distinct <= DISCRETE_MAX_DISTINCT,
        ))
    return profiles
