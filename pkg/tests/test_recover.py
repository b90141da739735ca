import unittest

import numpy as np

from core.data_ingest import FeatureTable, prepare_split
from core.detect import DeltaDistribution, compute_deltas
from core.errors import ConfigError, DataError
from core.knn_core import KnnConfig, build_index, build_index_set
from core.noise_lab import NoiseSpec, inject_gaussian, noise_spec_for_cell
from core.recover import (RecoverabilityCriterion, baseline_threshold, correct_samples, evaluate_recovery,
                          flag_recoverable, mape, r2, repair_table)
from tests.synthetic import latent_factor_table, uniform_table


def _dist(deltas, source="base", row_ids=None):
    return DeltaDistribution("x0", np.asarray(deltas, dtype=float), source, row_ids=row_ids)


class TestThreshold(unittest.TestCase):

    def test_linear_interpolation_rule(self):
        self.assertEqual(baseline_threshold(_dist(np.arange(101)), RecoverabilityCriterion()), 95.0)

    def test_constant_deltas(self):
        self.assertEqual(baseline_threshold(_dist([-0.3] * 10), RecoverabilityCriterion()), 0.3)
        signed = RecoverabilityCriterion(on_absolute=False)
        self.assertEqual(baseline_threshold(_dist([-0.3] * 10), signed), -0.3)

    def test_standard_normal_quantile(self):
        deltas = np.random.default_rng(0).normal(size=1000)
        self.assertAlmostEqual(baseline_threshold(_dist(deltas), RecoverabilityCriterion()), 1.96, delta=0.15)

    def test_monotone_in_percentile(self):
        base = _dist(np.random.default_rng(1).normal(size=300))
        thresholds = [baseline_threshold(base, RecoverabilityCriterion(percentile=p)) for p in (50, 80, 90, 95, 99)]
        self.assertEqual(thresholds, sorted(thresholds))

    def test_percentile_bounds(self):
        for percentile in (0.0, 100.0, -5.0):
            with self.assertRaises(ConfigError):
                RecoverabilityCriterion(percentile=percentile)


class TestFlagRecoverable(unittest.TestCase):

    def test_nothing_above_threshold(self):
        ids, ratio = flag_recoverable(_dist(np.zeros(20), "noise"), 0.1, RecoverabilityCriterion())
        self.assertEqual(ids, [])
        self.assertEqual(ratio, 0.0)

    def test_everything_above_threshold(self):
        ids, ratio = flag_recoverable(_dist([0.5, -0.7, 0.2], "noise", row_ids=[10, 11, 12]), 0.1,
                                      RecoverabilityCriterion())
        self.assertEqual(ids, [10, 11, 12])
        self.assertEqual(ratio, 1.0)

    def test_comparison_is_strict(self):
        ids, ratio = flag_recoverable(_dist([0.1, 0.2, -0.1], "noise"), 0.1, RecoverabilityCriterion())
        self.assertEqual(ids, [1])
        self.assertAlmostEqual(ratio, 1 / 3)


class TestScores(unittest.TestCase):

    def test_mape_examples(self):
        self.assertEqual(mape({1: 2.0}, {1: 2.0}).aggregate, 0.0)
        result = mape({1: 2.5, 2: 1.0}, {1: 2.0, 2: 1.0})
        self.assertAlmostEqual(result.per_sample[1], 25.0)
        self.assertAlmostEqual(result.aggregate, 12.5)

    def test_mape_excludes_zero_clean_values(self):
        result = mape({1: 0.3, 2: 1.1}, {1: 0.0, 2: 1.0})
        self.assertEqual(list(result.per_sample), [2])
        self.assertEqual(result.n_excluded, 1)
        self.assertTrue(np.isnan(mape({1: 0.3}, {1: 0.0}).aggregate))

    def test_mape_key_mismatch(self):
        with self.assertRaises(DataError):
            mape({1: 1.0}, {2: 1.0})

    def test_mape_scale_invariance(self):
        rng = np.random.default_rng(2)
        clean = {i: float(v) for i, v in enumerate(rng.uniform(0.1, 1.0, size=50))}
        corrected = {i: v + float(rng.normal(scale=0.05)) for i, v in clean.items()}
        plain = mape(corrected, clean).per_sample
        scaled = mape({i: -3.7 * v for i, v in corrected.items()}, {i: -3.7 * v for i, v in clean.items()}).per_sample
        for row_id in plain:
            self.assertAlmostEqual(plain[row_id], scaled[row_id], delta=1e-9)

    def test_r2_examples(self):
        self.assertEqual(r2([1, 2, 3], [1, 2, 3]), 1.0)
        self.assertEqual(r2([2, 2, 2], [1, 2, 3]), 0.0)
        self.assertAlmostEqual(r2([1, 2, 4], [1, 2, 3]), 0.5)
        with self.assertRaises(DataError):
            r2([1, 2], [3, 3])
        with self.assertRaises(DataError):
            r2([1], [1, 2])


class TestCorrection(unittest.TestCase):

    def test_empty_ids(self):
        table = uniform_table(20, 3, seed=0)
        index = build_index(table, "x0", KnnConfig())
        self.assertEqual(correct_samples(index, table, "x0", []), {})

    def test_exact_match_restores_clean_value(self):
        table = uniform_table(40, 3, seed=0)
        index = build_index(table, "x0", KnnConfig())
        noisy = inject_gaussian(table, NoiseSpec("x0", 0.25, seed=1))
        corrected = correct_samples(index, noisy, "x0", [3, 17])
        self.assertEqual(corrected, {3: table.column("x0")[3], 17: table.column("x0")[17]})

    def test_feature_and_id_errors(self):
        table = uniform_table(20, 3, seed=0)
        index = build_index(table, "x0", KnnConfig())
        with self.assertRaises(DataError):
            correct_samples(index, table, "x1", [0])
        with self.assertRaises(DataError):
            correct_samples(index, table, "x0", [99])

    def test_linear_feature_is_pulled_back_towards_clean(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(size=(5500, 2))
        values = np.column_stack([xy, 0.5 * xy[:, 0] + 0.5 * xy[:, 1]])
        table = FeatureTable(("x", "y", "z"), values, np.arange(5500))
        train, test = table.take(range(5000)), table.take(range(5000, 5500))
        index = build_index(train, "z", KnnConfig())
        noisy = inject_gaussian(test, NoiseSpec("z", 0.25, seed=4))
        corrected = correct_samples(index, noisy, "z", test.row_ids.tolist())
        clean = test.column("z")
        fixed = np.array([corrected[int(i)] for i in test.row_ids])
        self.assertLess(np.median(np.abs(fixed - clean)), np.median(np.abs(noisy.column("z") - clean)))

    def test_corrected_values_stay_inside_the_neighbor_envelope(self):
        table = uniform_table(200, 4, seed=5)
        index = build_index(table, "x1", KnnConfig())
        queries = inject_gaussian(uniform_table(30, 4, seed=6), NoiseSpec("x1", 0.25, seed=7))
        corrected = correct_samples(index, queries, "x1", queries.row_ids.tolist())
        _, positions = index.kneighbors(index.project(queries), 5)
        targets = index.target_values[positions]
        for i, row_id in enumerate(queries.row_ids):
            self.assertGreaterEqual(corrected[int(row_id)], targets[i].min() - 1e-12)
            self.assertLessEqual(corrected[int(row_id)], targets[i].max() + 1e-12)


class TestEvaluateRecovery(unittest.TestCase):

    def test_test_rows_copied_from_training_correct_exactly(self):
        train = uniform_table(200, 4, seed=8, low=0.1, high=1.0)
        clean_test = train.take(range(60))
        noisy_test = inject_gaussian(clean_test, NoiseSpec("x0", 0.25, seed=9))
        index = build_index(train, "x0", KnnConfig())
        base = _dist(np.random.default_rng(10).normal(scale=0.02, size=100))
        report = evaluate_recovery(index, base, clean_test, noisy_test, "x0", 0.25, RecoverabilityCriterion())
        self.assertGreater(report.n_recoverable, 0)
        self.assertAlmostEqual(report.recoverability, report.n_recoverable / 60)
        self.assertTrue(all(value == 0.0 for value in report.per_sample_mape.values()))
        self.assertEqual(report.fraction_under_20pct, 1.0)
        self.assertEqual(report.aggregate_mape, 0.0)
        self.assertEqual(list(report.samples.columns), ['row_id', 'clean', 'noisy', 'corrected', 'mape'])
        self.assertEqual(len(report.samples), report.n_recoverable)
        self.assertEqual(report.to_dict()['n_recoverable'], report.n_recoverable)

    def test_recoverability_grows_with_sigma(self):
        split = prepare_split(latent_factor_table(n_rows=3000, n_features=6, seed=2), (0.8, 0.1, 0.1), seed=1)
        indices = build_index_set(split.train, KnnConfig())
        base = {d.feature: d for d in compute_deltas(indices, split.validation, "base")}
        criterion = RecoverabilityCriterion()
        averages = []
        for sigma in (0.015625, 0.03125, 0.0625, 0.125, 0.25):
            rates = []
            for seed in range(5):
                noisy = inject_gaussian(split.test, noise_spec_for_cell(0, "f1", sigma, 2400, seed))
                noise = compute_deltas(indices, noisy, "noise", features=["f1"])[0]
                _, rate = flag_recoverable(noise, baseline_threshold(base["f1"], criterion), criterion)
                rates.append(rate)
            averages.append(np.mean(rates))
        self.assertEqual(averages, sorted(averages))
        self.assertGreater(averages[-1], 0.6)


class TestRepairTable(unittest.TestCase):

    def test_finds_and_repairs_the_corrupted_feature(self):
        table = latent_factor_table(n_rows=4000, n_features=6, seed=3)
        split = prepare_split(table, (0.8, 0.1, 0.1), seed=2)
        indices = build_index_set(split.train, KnnConfig())

        raw_test = table.take(split.test.row_ids)
        spread = float(np.ptp(raw_test.column("f4")))
        noisy = inject_gaussian(raw_test, NoiseSpec("f4", 0.25 * spread, seed=5))
        result = repair_table(indices, split.validation, noisy, RecoverabilityCriterion(), split.scalers["train"])

        self.assertEqual(result.feature, "f4")
        self.assertEqual(result.detection.detected_feature, "f4")
        self.assertGreater(len(result.flagged_ids), 0)
        for name in table.feature_names:
            if name != "f4":
                np.testing.assert_array_equal(result.repaired.column(name), noisy.column(name))
        flagged = set(result.flagged_ids)
        untouched = [pos for pos, row_id in enumerate(noisy.row_ids) if int(row_id) not in flagged]
        np.testing.assert_array_equal(result.repaired.column("f4")[untouched], noisy.column("f4")[untouched])

        positions = noisy.positions_of(result.flagged_ids)
        clean = raw_test.column("f4")[positions]
        repaired_error = np.median(np.abs(result.repaired.column("f4")[positions] - clean))
        noisy_error = np.median(np.abs(noisy.column("f4")[positions] - clean))
        self.assertLess(repaired_error, noisy_error)


if __name__ == '__main__':
    unittest.main()
