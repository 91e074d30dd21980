import unittest

import numpy as np
from numpy.testing import assert_allclose

from deltasparse.engine import DeltaAttentionHead, Scenario, run_head
from deltasparse.exceptions import CacheStateError, ConfigError, ShapeError
from deltasparse.hybrid import HybridConfig
from deltasparse.synthetic import make_generator, random_walk_keys
from deltasparse.tensor import dense_single_query


class TestDeltaAttentionHead(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        rng = make_generator(61)
        cls.q = rng.standard_normal((12, 4)).astype(np.float32)
        cls.k = random_walk_keys(rng, 12, 4, 0.05)
        cls.v = rng.standard_normal((12, 4)).astype(np.float32)

    def test_decode_from_empty_head(self):
        head = DeltaAttentionHead(HybridConfig(theta=0.1, w_d=2))
        output, report = head.decode(self.q[0], self.k[0], self.v[0])
        assert_allclose(output, self.v[0])
        self.assertEqual(report.n, 1)
        for t in range(1, 12):
            head.decode(self.q[t], self.k[t], self.v[t])

        self.assertEqual(head.cache.length, 12)
        self.assertEqual(head.cache.ring_positions(), [10, 11])

    def test_prefill_twice(self):
        head = DeltaAttentionHead(HybridConfig())
        head.prefill(self.q[:4], self.k[:4], self.v[:4])
        with self.assertRaises(CacheStateError):
            head.prefill(self.q[:4], self.k[:4], self.v[:4])

    def test_no_cache_after_query_prefill(self):
        head = DeltaAttentionHead(HybridConfig(strategy='top-down-query'))
        head.prefill(self.q[:6], self.k[:6], self.v[:6])
        with self.assertRaises(CacheStateError):
            head.decode(self.q[6], self.k[6], self.v[6])

    def test_dense_decoding(self):
        head = DeltaAttentionHead(
            HybridConfig(strategy='bottom-up-query'), dense_decode=True)
        head.prefill(self.q[:6], self.k[:6], self.v[:6])
        output, report = head.decode(self.q[6], self.k[6], self.v[6])
        assert_allclose(
            output, dense_single_query(self.q[6], self.k[:7], self.v[:7]))
        self.assertEqual(report.s_m, 0.0)
        self.assertEqual(report.mac_used, 7 * 4)


class TestRunHead(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        rng = make_generator(62)
        cls.q = rng.standard_normal((20, 8)).astype(np.float32)
        cls.k = random_walk_keys(rng, 20, 8, 0.05)
        cls.v = rng.standard_normal((20, 8)).astype(np.float32)

    def test_prefill_only_decodes_densely(self):
        result = run_head(self.q, self.k, self.v, 15, HybridConfig(),
                          scenario='prefill-only')
        for i, t in enumerate(range(15, 20)):
            assert_allclose(
                result.decode_outputs[i],
                dense_single_query(self.q[t], self.k[:t + 1], self.v[:t + 1]))

        self.assertIsNone(result.head.cache)
        self.assertEqual(result.decode_report.s_c, 0.0)

    def test_end_to_end(self):
        result = run_head(self.q, self.k, self.v, 15,
                          HybridConfig(theta=0.1, w_d=3))
        self.assertEqual(result.head.cache.length, 20)
        self.assertEqual(result.decode_report.window, 3)
        self.assertAlmostEqual(
            result.decode_report.s_c,
            result.decode_report.s_m * (1 - 3 / 20))

    def test_prompt_only(self):
        result = run_head(self.q[:10], self.k[:10], self.v[:10], 10,
                          HybridConfig())
        self.assertIsNone(result.decode_report)
        self.assertEqual(result.decode_outputs.shape, (0, 8))

    def test_invalid_prompt_length(self):
        with self.assertRaises(ShapeError):
            run_head(self.q, self.k, self.v, 0, HybridConfig())

        with self.assertRaises(ShapeError):
            run_head(self.q, self.k, self.v, 21, HybridConfig())

    def test_query_strategy_end_to_end(self):
        with self.assertRaises(ConfigError):
            run_head(self.q, self.k, self.v, 15,
                     HybridConfig(strategy='top-down-query'))

    def test_scenario_names(self):
        self.assertIs(Scenario.from_name('prefill_only'),
                      Scenario.PREFILL_ONLY)
        with self.assertRaises(ConfigError):
            Scenario.from_name('decode-only')


if __name__ == '__main__':
    unittest.main()
