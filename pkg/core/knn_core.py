from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from core.data_ingest import FeatureTable
from core.errors import ConfigError, DataError

WEIGHTINGS = ("inverse_distance", "uniform")
ALGORITHMS = ("kd_tree", "brute")

# Slack on the k-th tree distance when gathering tie candidates, so rounding
# inside the tree can never hide a row the shared kernel ranks in the top k.
_TIE_SLACK_REL = 1e-9
_TIE_SLACK_ABS = 1e-12


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    minkowski_p: int = 1
    leaf_size: int = 30
    weighting: str = "inverse_distance"
    algorithm: str = "kd_tree"

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if not isinstance(self.minkowski_p, int) or self.minkowski_p < 1:
            raise ConfigError(f"minkowski_p must be a positive integer, got {self.minkowski_p}")
        if not isinstance(self.leaf_size, int) or self.leaf_size < 1:
            raise ConfigError(f"leaf_size must be a positive integer, got {self.leaf_size}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got '{self.weighting}'")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got '{self.algorithm}'")

    def to_dict(self) -> Dict:
        return {
            'k': self.k,
            'minkowski_p': self.minkowski_p,
            'leaf_size': self.leaf_size,
            'weighting': self.weighting,
            'algorithm': self.algorithm,
        }


@dataclass(frozen=True)
class Neighbor:
    row_id: int
    distance: float


def minkowski_distances(points: np.ndarray, query: np.ndarray, p: int) -> np.ndarray:
    """Distance from `query` to every row of `points`. Both search paths rank with this kernel."""
    diff = np.abs(points - query)
    if p == 1:
        return diff.sum(axis=1)
    return np.power(np.power(diff, p).sum(axis=1), 1.0 / p)


def _rank(distances: np.ndarray, row_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest distances; equal distances go to the lower row id."""
    order = np.lexsort((row_ids, distances))
    return order[:k]


class NeighborIndex:
    """
    kd-tree over training rows projected onto every feature except the target.

    Read-only after construction. Ranking is exact under `minkowski_distances`
    with ties broken by lower row id, whichever algorithm is configured.
    """

    def __init__(self, train: FeatureTable, target_feature: str, config: KnnConfig):
        input_features = train.other_features(target_feature)
        if train.n_rows < config.k:
            raise DataError(
                f"Index for '{target_feature}' needs at least k={config.k} rows, got {train.n_rows}"
            )
        points = np.ascontiguousarray(train.columns(input_features))
        points.setflags(write=False)
        target_values = np.array(train.column(target_feature), copy=True)
        target_values.setflags(write=False)

        self.target_feature = target_feature
        self.input_features: Tuple[str, ...] = input_features
        self.points = points
        self.target_values = target_values
        self.row_ids = train.row_ids
        self.config = config
        self.tree = None
        if config.algorithm == "kd_tree" and points.shape[1] > 0:
            self.tree = cKDTree(points, leafsize=config.leaf_size, balanced_tree=True, copy_data=True)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def project(self, table: FeatureTable) -> np.ndarray:
        """Query coordinates for every row of `table`: its values on this index's input features."""
        return table.columns(self.input_features)

    def _check_query(self, queries: np.ndarray, k: int) -> np.ndarray:
        queries = np.asarray(queries, dtype=float)
        if queries.ndim == 1:
            queries = queries.reshape(1, -1)
        if queries.shape[1] != self.dimension:
            raise DataError(
                f"Query has {queries.shape[1]} coordinates, index over '{self.target_feature}' expects {self.dimension}"
            )
        if k < 1 or k > self.size:
            raise DataError(f"k={k} outside 1..{self.size} for index over '{self.target_feature}'")
        return queries

    def kneighbors(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Batch search. Returns (distances, positions), each (n_queries x k),
        rows sorted ascending by distance then row id.
        """
        queries = self._check_query(queries, k)
        n_queries = queries.shape[0]
        distances = np.empty((n_queries, k))
        positions = np.empty((n_queries, k), dtype=np.int64)
        if n_queries == 0:
            return distances, positions

        if self.tree is None:
            for i, query in enumerate(queries):
                d = minkowski_distances(self.points, query, self.config.minkowski_p)
                best = _rank(d, self.row_ids, k)
                distances[i], positions[i] = d[best], best
            return distances, positions

        tree_distances, _ = self.tree.query(queries, k=k, p=self.config.minkowski_p)
        tree_distances = np.asarray(tree_distances).reshape(n_queries, k)
        radii = tree_distances[:, -1] * (1.0 + _TIE_SLACK_REL) + _TIE_SLACK_ABS
        found = self.tree.query_ball_point(queries, r=radii, p=self.config.minkowski_p)
        for i, query in enumerate(queries):
            candidates = np.asarray(found[i], dtype=np.int64)
            if len(candidates) < k:
                candidates = np.arange(self.size)
            d = minkowski_distances(self.points[candidates], query, self.config.minkowski_p)
            best = _rank(d, self.row_ids[candidates], k)
            distances[i], positions[i] = d[best], candidates[best]
        return distances, positions


def build_index(train: FeatureTable, target_feature: str, config: KnnConfig) -> NeighborIndex:
    return NeighborIndex(train, target_feature, config)


def build_index_set(train: FeatureTable, config: KnnConfig) -> Dict[str, NeighborIndex]:
    """One index per feature, each over the remaining N-1 features."""
    return {feature: build_index(train, feature, config) for feature in train.feature_names}


def query_neighbors(index: NeighborIndex, query: Sequence[float], k: int) -> List[Neighbor]:
    distances, positions = index.kneighbors(np.asarray(query, dtype=float).reshape(1, -1), k)
    return [
        Neighbor(row_id=int(index.row_ids[pos]), distance=float(dist))
        for dist, pos in zip(distances[0], positions[0])
    ]


def weighted_average(distances: np.ndarray, targets: np.ndarray, weighting: str) -> np.ndarray:
    """
    Per-row neighbor average. Inverse-distance weights, except that a row with
    any zero-distance neighbor gets the plain mean of those exact matches.
    """
    if weighting == "uniform":
        return targets.mean(axis=1)
    exact = distances == 0.0
    has_exact = exact.any(axis=1)
    # 1/d rescaled by the row's nearest distance: stays finite for subnormal d
    nearest = np.where(exact, np.inf, distances).min(axis=1, keepdims=True)
    weights = np.where(exact, 0.0, nearest / np.where(exact, 1.0, distances))
    weights = np.where(has_exact[:, None], exact.astype(float), weights)
    return (weights * targets).sum(axis=1) / weights.sum(axis=1)


def impute_feature(index: NeighborIndex, queries: np.ndarray) -> np.ndarray:
    distances, positions = index.kneighbors(queries, index.config.k)
    return weighted_average(distances, index.target_values[positions], index.config.weighting)


def brute_force_neighbors(train: FeatureTable, target_feature: str, query: Sequence[float], k: int,
                          config: KnnConfig) -> List[Neighbor]:
    """Exhaustive scan; the reference ranking the kd-tree path must reproduce."""
    points = np.ascontiguousarray(train.columns(train.other_features(target_feature)))
    query = np.asarray(query, dtype=float)
    if query.shape != (points.shape[1],):
        raise DataError(f"Query has {query.size} coordinates, expected {points.shape[1]}")
    if k < 1 or k > train.n_rows:
        raise DataError(f"k={k} outside 1..{train.n_rows}")
    d = minkowski_distances(points, query, config.minkowski_p)
    best = _rank(d, train.row_ids, k)
    return [Neighbor(row_id=int(train.row_ids[pos]), distance=float(d[pos])) for pos in best]
