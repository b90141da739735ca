import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from core.data_ingest import (FeatureTable, ScalerParams, feature_profile, inverse_scale, load_feature_list,
                              load_table, minmax_scale, pearson_matrix, prepare_split, prune_correlated,
                              select_features, split_dataset, split_sizes)
from core.errors import ConfigError, DataError, StorageError, UnknownFeatureError
from tests.synthetic import latent_factor_table, uniform_table


def _table(columns, names=None):
    values = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    names = names or [f"c{j}" for j in range(values.shape[1])]
    return FeatureTable(feature_names=tuple(names), values=values, row_ids=np.arange(values.shape[0]))


class TestLoadTable(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="data_ingest_test_")

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def _write(self, name, text):
        path = os.path.join(self.test_dir, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def test_loads_features_and_target(self):
        path = self._write("ok.csv", "a,b,y\n1,2,10\n3,4.5,20\n")
        table = load_table(path, "y")
        self.assertEqual(table.feature_names, ("a", "b"))
        np.testing.assert_array_equal(table.values, [[1.0, 2.0], [3.0, 4.5]])
        np.testing.assert_array_equal(table.target, [10.0, 20.0])
        np.testing.assert_array_equal(table.row_ids, [0, 1])

    def test_rows_with_missing_cells_are_rejected(self):
        path = self._write("gaps.csv", "a,b\n1,2\n,3\n4,NaN\n5,6\n")
        table = load_table(path, None)
        self.assertEqual(table.n_rows, 2)
        np.testing.assert_array_equal(table.values, [[1.0, 2.0], [5.0, 6.0]])
        np.testing.assert_array_equal(table.row_ids, [0, 1])

    def test_non_numeric_cell_names_row_and_column(self):
        path = self._write("bad.csv", "a,b\n1,2\n3,oops\n")
        with self.assertRaises(DataError) as ctx:
            load_table(path, None)
        self.assertIn("row 1", str(ctx.exception))
        self.assertIn("'b'", str(ctx.exception))

    def test_missing_file_is_storage_error(self):
        with self.assertRaises(StorageError):
            load_table(os.path.join(self.test_dir, "nope.csv"), None)

    def test_missing_target_column(self):
        path = self._write("t.csv", "a,b\n1,2\n")
        with self.assertRaises(DataError):
            load_table(path, "y")

    def test_duplicate_header(self):
        path = self._write("dup.csv", "a,a\n1,2\n")
        with self.assertRaises(DataError):
            load_table(path, None)

    def test_feature_list_skips_comments_and_blank_lines(self):
        path = self._write("keep.txt", "# kept\nb\n\na\n")
        self.assertEqual(load_feature_list(path), ["b", "a"])

    def test_feature_list_rejects_duplicates(self):
        path = self._write("keep.txt", "a\na\n")
        with self.assertRaises(DataError):
            load_feature_list(path)

    def test_select_features_keeps_list_order(self):
        table = _table([[1, 2], [3, 4], [5, 6]], names=["a", "b", "c"])
        selected = select_features(table, ["c", "a"])
        self.assertEqual(selected.feature_names, ("c", "a"))
        np.testing.assert_array_equal(selected.values, [[5, 1], [6, 2]])
        with self.assertRaises(UnknownFeatureError):
            select_features(table, ["zzz"])


class TestFeatureTable(unittest.TestCase):

    def test_values_are_read_only(self):
        table = _table([[1, 2], [3, 4]])
        with self.assertRaises(ValueError):
            table.values[0, 0] = 9.0

    def test_with_column_leaves_original_untouched(self):
        table = _table([[1, 2], [3, 4]])
        changed = table.with_column("c1", np.array([7.0, 8.0]))
        np.testing.assert_array_equal(table.column("c1"), [3, 4])
        np.testing.assert_array_equal(changed.column("c1"), [7, 8])
        np.testing.assert_array_equal(changed.column("c0"), [1, 2])

    def test_rejects_non_finite_and_duplicate_ids(self):
        with self.assertRaises(DataError):
            _table([[1, np.nan]])
        with self.assertRaises(DataError):
            FeatureTable(("a",), np.ones((2, 1)), row_ids=[3, 3])

    def test_positions_of_unknown_id(self):
        table = _table([[1, 2, 3]])
        np.testing.assert_array_equal(table.positions_of([2, 0]), [2, 0])
        with self.assertRaises(DataError):
            table.positions_of([5])


class TestPearsonAndPruning(unittest.TestCase):

    def test_known_values(self):
        corr = pearson_matrix(_table([[1, 2, 3], [-1, -2, -3], [1, 2, 4]]))
        self.assertAlmostEqual(corr[0, 0], 1.0)
        self.assertAlmostEqual(corr[0, 1], -1.0)
        self.assertAlmostEqual(corr[0, 2], 0.98198050606, places=9)
        np.testing.assert_allclose(corr, corr.T, atol=1e-12)

    def test_zero_variance_column_correlates_zero(self):
        corr = pearson_matrix(_table([[1, 2, 3], [5, 5, 5]]))
        self.assertEqual(corr[0, 1], 0.0)
        self.assertEqual(corr[1, 1], 1.0)

    def test_needs_two_rows(self):
        with self.assertRaises(DataError):
            pearson_matrix(_table([[1.0], [2.0]]))

    def test_affine_transform_of_one_column(self):
        table = uniform_table(50, 4, seed=3)
        moved = table.with_column("x2", 3.5 * table.column("x2") + 11.0)
        np.testing.assert_allclose(pearson_matrix(table), pearson_matrix(moved), atol=1e-9)

    def test_identical_columns_drop_the_second(self):
        x = [0.1, 0.5, 0.2, 0.9]
        pruned, dropped = prune_correlated(_table([x, [4, 1, 3, 2], x], names=["a", "b", "a2"]), 0.7)
        self.assertEqual(pruned.feature_names, ("a", "b"))
        self.assertEqual([(d.name, d.correlated_with) for d in dropped], [("a2", "a")])
        self.assertAlmostEqual(dropped[0].correlation, 1.0)

    def test_pruning_is_idempotent(self):
        table = latent_factor_table(n_rows=300, n_features=10, seed=5)
        once, _ = prune_correlated(table, 0.7)
        twice, dropped = prune_correlated(once, 0.7)
        self.assertEqual(twice.feature_names, once.feature_names)
        self.assertEqual(dropped, [])

    def test_threshold_range(self):
        with self.assertRaises(ConfigError):
            prune_correlated(_table([[1, 2, 3]]), 0.0)
        with self.assertRaises(ConfigError):
            prune_correlated(_table([[1, 2, 3]]), 1.5)


class TestSplitAndScale(unittest.TestCase):

    def test_split_sizes(self):
        self.assertEqual(split_sizes(1000, (0.8, 0.1, 0.1)), (800, 100, 100))
        self.assertEqual(split_sizes(71571, (0.8, 0.1, 0.1)), (57256, 7157, 7158))

    def test_split_errors(self):
        with self.assertRaises(ConfigError):
            split_sizes(100, (0.8, 0.1, 0.2))
        with self.assertRaises(DataError):
            split_sizes(5, (0.8, 0.1, 0.1))

    def test_split_is_a_seeded_partition(self):
        table = uniform_table(200, 3, seed=1)
        first = split_dataset(table, (0.8, 0.1, 0.1), seed=42)
        second = split_dataset(table, (0.8, 0.1, 0.1), seed=42)
        ids = np.concatenate([s.row_ids for s in first.subsets().values()])
        self.assertEqual(sorted(ids.tolist()), list(range(200)))
        for name in ("train", "validation", "test"):
            np.testing.assert_array_equal(first.subsets()[name].row_ids, second.subsets()[name].row_ids)
        other = split_dataset(table, (0.8, 0.1, 0.1), seed=43)
        self.assertFalse(np.array_equal(first.test.row_ids, other.test.row_ids))

    def test_minmax_examples(self):
        scaled, params = minmax_scale(_table([[2, 4, 6], [5, 5, 5]]))
        np.testing.assert_allclose(scaled.column("c0"), [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(scaled.column("c1"), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(params.degenerate, [False, True])
        restored = inverse_scale(scaled, params)
        np.testing.assert_array_equal(restored.column("c1"), [5.0, 5.0, 5.0])

    def test_prepare_split_scales_each_subset_on_itself(self):
        split = prepare_split(uniform_table(100, 3, seed=2, low=-5, high=5), (0.8, 0.1, 0.1), seed=0)
        for name, subset in split.subsets().items():
            np.testing.assert_allclose(subset.values.min(axis=0), 0.0)
            np.testing.assert_allclose(subset.values.max(axis=0), 1.0)
            self.assertIsInstance(split.scalers[name], ScalerParams)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=40),
           st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_scale_round_trip(self, column, seed):
        values = np.column_stack([column, np.random.default_rng(seed).normal(size=len(column))])
        table = FeatureTable(("a", "b"), values, np.arange(len(column)))
        scaled, params = minmax_scale(table)
        restored = inverse_scale(scaled, params).values
        span = np.where(params.degenerate, 1.0, params.per_feature_max - params.per_feature_min)
        np.testing.assert_allclose(restored, values, atol=1e-12 * float(np.max(np.abs(values)) + span.max()))


class TestFeatureProfile(unittest.TestCase):

    def test_discrete_and_continuous(self):
        discrete = np.tile([0.0, 0.5, 1.0], 40)
        continuous = np.linspace(0.0, 1.0, 120)
        profiles = {p.feature: p for p in feature_profile(_table([discrete, continuous], names=["d", "c"]))}
        self.assertTrue(profiles["d"].discrete)
        self.assertEqual(profiles["d"].n_distinct, 3)
        self.assertFalse(profiles["c"].discrete)
        self.assertAlmostEqual(profiles["c"].distinct_fraction, 1.0)
        self.assertAlmostEqual(profiles["c"].iqr, 0.5, places=6)


if __name__ == '__main__':
    unittest.main()
