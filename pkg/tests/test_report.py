import math
import unittest

import numpy as np

from deltasparse.exceptions import ConfigError, ShapeError
from deltasparse.matmul import Exactness, MacCounter, ScoreMatrix
from deltasparse.report import (
    FLAG_NOT_COMPARED, FLAG_SINGLE_POSITION, FLAG_WINDOW_EXCEEDS_LENGTH,
    AttentionReport, ErrorStats, Stage, build_report, combine_decode_steps,
    compare_to_oracle, computational_sparsity, merge_reports)


def make_report(nnz, elements, err_max=0.0, stage='prefill', n=16,
                window=4, mac=(0, 0, 0)):
    errors = ErrorStats(max_abs=err_max, count=1, abs_sum=err_max,
                        sq_err_sum=err_max ** 2, sq_ref_sum=1.0)
    return build_report(
        stage=stage, n=n, window=window, delta_nnz=nnz,
        delta_elements=elements, basis_elements=2,
        counter=MacCounter(*mac), errors=errors)


class TestComputationalSparsity(unittest.TestCase):

    def test_formula(self):
        self.assertAlmostEqual(computational_sparsity(0.8, 4, 16), 0.6)
        self.assertEqual(computational_sparsity(0.8, 4, 16, 'decode'),
                         0.8 * (1 - 4 / 16))

    def test_window_exceeds_length(self):
        with self.assertLogs('deltasparse.report', level='WARNING'):
            self.assertEqual(computational_sparsity(0.9, 20, 16), 0.0)

    def test_invalid_arguments(self):
        with self.assertRaises(ConfigError):
            computational_sparsity(1.5, 4, 16)

        with self.assertRaises(ConfigError):
            computational_sparsity(0.5, 0, 16)

        with self.assertRaises(ConfigError):
            computational_sparsity(0.5, 4, 16, 'training')


class TestCompareToOracle(unittest.TestCase):

    def test_identical(self):
        exact = np.arange(12, dtype=np.float32).reshape(3, 4)
        scores = ScoreMatrix(
            exact.copy(), np.full((3, 4), int(Exactness.FULL)), 0.5)
        stats = compare_to_oracle(scores, exact)
        self.assertEqual(stats.max_abs, 0.0)
        self.assertEqual(stats.mean_abs, 0.0)
        self.assertEqual(stats.frobenius_rel, 0.0)

    def test_one_perturbed_entry(self):
        exact = np.zeros((10, 10), dtype=np.float32)
        approx = exact.copy()
        approx[3, 7] += 0.1
        scores = ScoreMatrix(
            approx, np.full((10, 10), int(Exactness.APPROXIMATE)))
        stats = compare_to_oracle(scores, exact)
        self.assertEqual(stats.count, 100)
        self.assertAlmostEqual(stats.max_abs, 0.1, places=6)
        self.assertAlmostEqual(stats.mean_abs, 0.001, places=8)
        self.assertEqual(stats.frobenius_rel, math.inf)

    def test_masked_entries_are_ignored(self):
        exact = np.ones((2, 2), dtype=np.float32)
        approx = np.array([[1.0, 50.0], [1.0, 1.5]], dtype=np.float32)
        codes = np.array([[2, 0], [1, 2]])
        stats = compare_to_oracle(ScoreMatrix(approx, codes), exact)
        self.assertEqual(stats.count, 3)
        self.assertAlmostEqual(stats.max_abs, 0.5)
        self.assertAlmostEqual(stats.frobenius_rel, 0.5 / math.sqrt(3))

    def test_scale_applies_to_both(self):
        exact = np.full((1, 2), 4.0, dtype=np.float32)
        approx = np.full((1, 2), 6.0, dtype=np.float32)
        scores = ScoreMatrix(approx, np.ones((1, 2)), 0.5)
        self.assertEqual(compare_to_oracle(scores, exact).max_abs, 1.0)

    def test_shape_mismatch(self):
        scores = ScoreMatrix(
            np.zeros((2, 2), dtype=np.float32), np.ones((2, 2)))
        with self.assertRaises(ShapeError):
            compare_to_oracle(scores, np.zeros((2, 3)))


class TestBuildReport(unittest.TestCase):

    def test_fields(self):
        report = make_report(2, 10, mac=(30, 10, 5))
        self.assertEqual(report.stage, 'prefill')
        self.assertAlmostEqual(report.s_m, 0.8)
        self.assertEqual(report.s_c, computational_sparsity(0.8, 4, 16))
        self.assertAlmostEqual(report.s_m_with_basis, 1 - 4 / 12)
        self.assertEqual(report.mac_skipped_fraction, 10 / 35)

    def test_single_position(self):
        with self.assertLogs('deltasparse.report', level='WARNING'):
            report = build_report(
                Stage.PREFILL, 1, 1, 0, 0, 3, MacCounter(3, 0, 3))

        self.assertEqual(report.s_m, 1.0)
        self.assertEqual(report.s_c, 0.0)
        self.assertIn(FLAG_SINGLE_POSITION, report.flags)
        self.assertIn(FLAG_NOT_COMPARED, report.flags)

    def test_window_exceeds_length(self):
        with self.assertLogs('deltasparse.report', level='WARNING'):
            report = make_report(0, 6, stage='decode', n=3, window=4)

        self.assertEqual(report.s_c, 0.0)
        self.assertIn(FLAG_WINDOW_EXCEEDS_LENGTH, report.flags)

    def test_dict_round_trip(self):
        report = make_report(3, 10, err_max=0.25)
        self.assertEqual(AttentionReport.from_dict(report.as_dict()), report)


class TestMergeReports(unittest.TestCase):

    def test_identical(self):
        a = make_report(2, 10)
        merged = merge_reports([a, make_report(2, 10)])
        self.assertAlmostEqual(merged.s_m, a.s_m)
        self.assertEqual(merged.heads, 2)

    def test_weighted_sparsity(self):
        merged = merge_reports([make_report(2, 10), make_report(4, 10)])
        self.assertAlmostEqual(merged.s_m, 1 - 6 / 20)
        self.assertEqual(merged.s_c, computational_sparsity(
            merged.s_m, merged.window, merged.n))

    def test_errors_and_macs(self):
        merged = merge_reports([
            make_report(2, 10, err_max=0.1, mac=(10, 5, 2, 4)),
            make_report(4, 10, err_max=0.3, mac=(20, 1, 2, 8)),
        ])
        self.assertEqual(merged.err_max_abs, 0.3)
        self.assertAlmostEqual(merged.err_mean_abs, 0.2)
        self.assertEqual(merged.err_count, 2)
        self.assertEqual(
            (merged.mac_used, merged.mac_skipped, merged.mac_basis,
             merged.mac_exact),
            (30, 6, 4, 12))
        self.assertAlmostEqual(merged.mac_skipped_fraction, 6 / (30 - 16 + 6))

    def test_commutative_counts(self):
        a = make_report(1, 10, err_max=0.1, mac=(7, 3, 1))
        b = make_report(5, 10, err_max=0.2, mac=(9, 1, 1))
        ab = merge_reports([a, b])
        ba = merge_reports([b, a])
        self.assertEqual((ab.s_m, ab.mac_used, ab.err_max_abs),
                         (ba.s_m, ba.mac_used, ba.err_max_abs))

    def test_mixed_stages(self):
        with self.assertRaises(ConfigError):
            merge_reports([make_report(2, 10),
                           make_report(2, 10, stage='decode')])

    def test_mixed_lengths(self):
        with self.assertRaises(ConfigError):
            merge_reports([make_report(2, 10), make_report(2, 10, n=32)])

    def test_empty(self):
        with self.assertRaises(ConfigError):
            merge_reports([])


class TestCombineDecodeSteps(unittest.TestCase):

    def test_last_step_sparsity(self):
        steps = [
            make_report(0, 4, err_max=0.05, stage='decode', n=5,
                        mac=(10, 0, 2)),
            make_report(1, 8, err_max=0.02, stage='decode', n=5,
                        mac=(11, 3, 2)),
        ]
        combined = combine_decode_steps(steps)
        self.assertAlmostEqual(combined.s_m, 1 - 1 / 8)
        self.assertEqual(combined.mac_used, 21)
        self.assertEqual(combined.err_max_abs, 0.05)

    def test_prefill_steps(self):
        with self.assertRaises(ConfigError):
            combine_decode_steps([make_report(2, 10)])


if __name__ == '__main__':
    unittest.main()
