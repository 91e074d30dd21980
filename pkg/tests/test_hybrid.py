import unittest

from hypothesis import given, settings, strategies as st
import numpy as np
from numpy.testing import assert_allclose

from deltasparse.cache import DeltaKVCache, cache_init
from deltasparse.encoding import ConstructionStrategy, element_sparsity
from deltasparse.engine import run_head
from deltasparse.exceptions import CacheStateError, ConfigError, ShapeError
from deltasparse.hybrid import (
    HybridConfig, cached_attention, cached_scores, decode_step, jigsaw_map,
    jigsaw_membership, prefill_attention, prefill_attention_ablation,
    prefill_window)
from deltasparse.matmul import Exactness
from deltasparse.report import (
    FLAG_SINGLE_POSITION, FLAG_WINDOW_CLAMPED)
from deltasparse.synthetic import make_generator, random_walk_keys
from deltasparse.tensor import (
    dense_attention, dense_scores, dense_single_query)


def make_streams(seed, n, d, sigma=None):
    rng = make_generator(seed)
    q = rng.standard_normal((n, d)).astype(np.float32)
    if sigma is None:
        k = rng.standard_normal((n, d)).astype(np.float32)
    else:
        k = random_walk_keys(rng, n, d, sigma)

    v = rng.standard_normal((n, d)).astype(np.float32)
    return q, k, v


class TestPrefillWindow(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(prefill_window(16, 0.25, 64), 4)
        self.assertEqual(prefill_window(1000, 0.1, 64), 64)

    def test_clamped_to_one(self):
        with self.assertLogs('deltasparse.hybrid', level='WARNING'):
            self.assertEqual(prefill_window(3, 0.1, 64), 1)

    def test_empty_sequence(self):
        with self.assertRaises(ShapeError):
            prefill_window(0, 0.1, 64)


class TestJigsaw(unittest.TestCase):

    def test_membership(self):
        self.assertIs(jigsaw_membership(3, 1, 4), Exactness.FULL)
        self.assertIs(jigsaw_membership(5, 3, 4), Exactness.APPROXIMATE)
        self.assertIs(jigsaw_membership(1, 3, 4), Exactness.MASKED)
        self.assertIs(jigsaw_membership(4, 4, 4), Exactness.FULL)

    def test_map_matches_membership(self):
        codes = jigsaw_map(11, 3)
        for i in range(11):
            for j in range(11):
                self.assertEqual(codes[i, j], int(jigsaw_membership(i, j, 3)))

    def test_window_of_one(self):
        codes = jigsaw_map(4, 1)
        self.assertEqual(codes.tolist(), [
            [2, 0, 0, 0],
            [1, 2, 0, 0],
            [1, 1, 2, 0],
            [1, 1, 1, 2],
        ])


class TestHybridConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = HybridConfig()
        self.assertEqual(cfg.w_d, 4)
        self.assertIs(cfg.strategy, ConstructionStrategy.TOP_DOWN_KEY)

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            HybridConfig(theta=-0.5)

        with self.assertRaises(ConfigError):
            HybridConfig(gamma=1.0)

        with self.assertRaises(ConfigError):
            HybridConfig(w_d=0)

    def test_strategy_by_name(self):
        cfg = HybridConfig(strategy='bottom-up-query')
        self.assertIs(cfg.strategy, ConstructionStrategy.BOTTOM_UP_QUERY)


class TestPrefillAttention(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.q, cls.k, cls.v = make_streams(31, 48, 16, sigma=0.05)
        cls.exact = dense_scores(cls.q, cls.k)

    @given(seed=st.integers(0, 2**32 - 1),
           n=st.integers(2, 64),
           d=st.integers(2, 64),
           gamma=st.sampled_from([0.05, 0.1, 0.25]),
           strategy=st.sampled_from(list(ConstructionStrategy)))
    @settings(max_examples=50, deadline=None)
    def test_zero_threshold_equals_dense(self, seed, n, d, gamma, strategy):
        q, k, v = make_streams(seed, n, d)
        cfg = HybridConfig(theta=0.0, gamma=gamma, strategy=strategy)
        result = prefill_attention(q, k, v, cfg, compare=False)
        assert_allclose(result.output, dense_attention(q, k, v), atol=1e-4)

    def test_exact_window_is_bit_exact(self):
        result = prefill_attention(
            self.q, self.k, self.v, HybridConfig(theta=0.3, gamma=0.1))
        full = result.scores.mask(Exactness.FULL)
        self.assertEqual(result.window, 4)
        self.assertEqual(self.exact[full].tobytes(),
                         result.scores.scores[full].tobytes())
        self.assertEqual(result.scores.scores[:, 0].tobytes(),
                         self.exact[:, 0].tobytes())

    @given(seed=st.integers(0, 2**32 - 1),
           n=st.integers(2, 64),
           d=st.integers(1, 32),
           theta=st.floats(0.01, 1.0),
           gamma=st.sampled_from([0.05, 0.1, 0.25]),
           sigma=st.sampled_from([None, 0.05, 0.2]))
    @settings(max_examples=100, deadline=None)
    def test_approximate_error_bound(self, seed, n, d, theta, gamma, sigma):
        q, k, v = make_streams(seed, n, d, sigma=sigma)
        result = prefill_attention(
            q, k, v, HybridConfig(theta=theta, gamma=gamma), compare=False)
        exact = dense_scores(q, k)
        full = result.scores.mask(Exactness.FULL)
        self.assertEqual(exact[full].tobytes(),
                         result.scores.scores[full].tobytes())

        approx = result.scores.mask(Exactness.APPROXIMATE)
        scale = float(result.scores.scale)
        gap = np.abs(result.scores.scores.astype(np.float64) -
                     exact.astype(np.float64)) * scale
        bound = theta * np.abs(q).astype(np.float64).sum(
            axis=1, keepdims=True) / np.sqrt(d)
        bound = np.broadcast_to(bound + 2e-4, gap.shape)
        self.assertTrue(np.all(gap[approx] <= bound[approx]))

    def test_approximate_entries_exist(self):
        result = prefill_attention(
            self.q, self.k, self.v, HybridConfig(theta=0.1, gamma=0.1))
        self.assertTrue(result.scores.mask(Exactness.APPROXIMATE).any())

    def test_masked_entries(self):
        result = prefill_attention(self.q, self.k, self.v)
        masked = result.scores.mask(Exactness.MASKED)
        self.assertTrue(np.all(masked == ~np.tri(48, dtype=bool)))
        self.assertTrue(np.all(result.scores.scores[masked] == 0.0))

    def test_report(self):
        cfg = HybridConfig(theta=0.1, gamma=0.25)
        result = prefill_attention(self.q, self.k, self.v, cfg)
        report = result.report
        self.assertEqual(report.window, 12)
        self.assertEqual(report.n, 48)
        self.assertEqual(report.delta_elements, 47 * 16)
        self.assertAlmostEqual(
            report.s_c, report.s_m * (1 - 12 / 48))
        self.assertEqual(
            report.mac_used + report.mac_skipped, 48 * 49 // 2 * 16)
        self.assertGreater(report.err_max_abs, 0.0)
        self.assertLess(report.err_frobenius_rel, 0.1)

    def test_cache_is_left_for_decoding(self):
        result = prefill_attention(
            self.q, self.k, self.v, HybridConfig(w_d=5))
        cache = result.cache
        self.assertEqual(cache.length, 48)
        self.assertEqual(len(cache.delta_columns), 47)
        self.assertEqual(cache.ring_positions(), [43, 44, 45, 46, 47])

    def test_single_position(self):
        q, k, v = make_streams(32, 1, 4)
        with self.assertLogs('deltasparse', level='WARNING'):
            result = prefill_attention(q, k, v)

        assert_allclose(result.output, v)
        self.assertEqual(result.report.s_c, 0.0)
        self.assertIn(FLAG_SINGLE_POSITION, result.report.flags)
        self.assertIn(FLAG_WINDOW_CLAMPED, result.report.flags)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            prefill_attention(self.q, self.k[:, :8], self.v)

        with self.assertRaises(ShapeError):
            prefill_attention(self.q, self.k, self.v[:10])


class TestConstructionStrategies(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.q, cls.k, cls.v = make_streams(33, 20, 8, sigma=0.05)
        cls.exact = dense_scores(cls.q, cls.k)

    def test_top_down_key(self):
        result = prefill_attention(
            self.q, self.k, self.v, HybridConfig(theta=0.2))
        self.assertEqual((result.basis_axis, result.basis_index),
                         ('column', 0))
        self.assertEqual(result.scores.scores[:, 0].tobytes(),
                         self.exact[:, 0].tobytes())

    def test_top_down_query(self):
        cfg = HybridConfig(theta=0.2, strategy='top-down-query')
        result = prefill_attention(self.q, self.k, self.v, cfg)
        self.assertEqual((result.basis_axis, result.basis_index), ('row', 0))
        self.assertIsNone(result.cache)
        self.assertEqual(result.delta_scores.scores[0].tobytes(),
                         self.exact[0].tobytes())

    def test_bottom_up_query(self):
        cfg = HybridConfig(theta=0.2, strategy='bottom-up-query')
        result = prefill_attention_ablation(self.q, self.k, self.v, cfg)
        self.assertEqual((result.basis_axis, result.basis_index),
                         ('row', 19))
        self.assertEqual(result.delta_scores.scores[19].tobytes(),
                         self.exact[19].tobytes())
        self.assertTrue(np.all(
            result.delta_scores.exactness[19] == int(Exactness.FULL)))

    @given(seed=st.integers(0, 2**32 - 1),
           n=st.integers(2, 40),
           d=st.integers(1, 16),
           theta=st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_key_basis_column(self, seed, n, d, theta):
        q, k, v = make_streams(seed, n, d, sigma=0.1)
        result = prefill_attention(q, k, v, HybridConfig(theta=theta),
                                   compare=False)
        exact = dense_scores(q, k)
        self.assertEqual(result.scores.scores[:, 0].tobytes(),
                         exact[:, 0].tobytes())

    @given(seed=st.integers(0, 2**32 - 1),
           n=st.integers(2, 40),
           d=st.integers(1, 16),
           theta=st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_bottom_up_basis_row(self, seed, n, d, theta):
        q, k, v = make_streams(seed, n, d, sigma=0.1)
        cfg = HybridConfig(theta=theta, strategy='bottom-up-query')
        result = prefill_attention(q, k, v, cfg, compare=False)
        exact = dense_scores(q, k)
        self.assertEqual(result.delta_scores.scores[n - 1].tobytes(),
                         exact[n - 1].tobytes())
        self.assertEqual(result.scores.scores[n - 1].tobytes(),
                         exact[n - 1].tobytes())

    @given(seed=st.integers(0, 2**32 - 1),
           n=st.integers(2, 40),
           d=st.integers(1, 16),
           theta=st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_top_down_basis_row(self, seed, n, d, theta):
        q, k, v = make_streams(seed, n, d, sigma=0.1)
        cfg = HybridConfig(theta=theta, strategy='top-down-query')
        result = prefill_attention(q, k, v, cfg, compare=False)
        exact = dense_scores(q, k)
        self.assertEqual(result.delta_scores.scores[0].tobytes(),
                         exact[0].tobytes())
        masked = result.scores.mask(Exactness.MASKED)
        self.assertFalse(masked[0, 0])
        self.assertTrue(np.all(masked[0, 1:]))
        self.assertEqual(result.scores.scores[0, 0], exact[0, 0])

    def test_ablation_counts_full_rectangle(self):
        cfg = HybridConfig(theta=0.2, strategy='top-down-query')
        result = prefill_attention(self.q, self.k, self.v, cfg)
        window = result.window
        exact_entries = sum(
            min(window, 20 - s) * (min(window, 20 - s) + 1) // 2
            for s in range(0, 20, window))
        self.assertEqual(result.counter.dense_equivalent,
                         (20 * 20 + exact_entries) * 8)

    def test_ablation_rejects_key_strategy(self):
        with self.assertRaises(ConfigError):
            prefill_attention_ablation(
                self.q, self.k, self.v, HybridConfig())


class TestMacAccounting(unittest.TestCase):

    def test_skipped_fraction_matches_sparsity(self):
        cfg = HybridConfig(theta=0.1, gamma=0.25)
        for seed in range(20):
            q, k, v = make_streams(seed, 128, 32, sigma=0.05)
            result = prefill_attention(q, k, v, cfg, compare=False)
            self.assertAlmostEqual(
                result.report.mac_skipped_fraction,
                element_sparsity(result.encoding), delta=0.02,
                msg="seed={}".format(seed))

    def test_exact_blocks_are_tallied(self):
        q, k, v = make_streams(35, 128, 32, sigma=0.05)
        result = prefill_attention(
            q, k, v, HybridConfig(theta=0.1, gamma=0.25), compare=False)
        report = result.report
        self.assertEqual(result.window, 32)
        self.assertEqual(report.mac_exact, 4 * (32 * 33 // 2) * 32)
        self.assertEqual(report.mac_basis, (128 - 32) * 32)
        delta_work = report.mac_used - report.mac_basis - report.mac_exact
        self.assertAlmostEqual(
            report.mac_skipped_fraction,
            report.mac_skipped / (delta_work + report.mac_skipped))


class TestDecode(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.q, cls.k, cls.v = make_streams(34, 24, 8, sigma=0.05)

    def test_short_history_is_dense(self):
        cfg = HybridConfig(theta=0.5, w_d=4)
        cache = cache_init(self.k[0], self.v[0], 4, 0.5)
        for t in range(1, 4):
            output, report = decode_step(
                self.q[t], self.k[t], self.v[t], cache, cfg)
            assert_allclose(
                output,
                dense_single_query(self.q[t], self.k[:t + 1], self.v[:t + 1]),
                atol=1e-6)
            self.assertEqual(report.mac_skipped, 0)

    def test_zero_threshold_equals_dense(self):
        cfg = HybridConfig(theta=0.0, w_d=2)
        cache = cache_init(self.k[0], self.v[0], 2, 0.0)
        for t in range(1, 24):
            output, _ = decode_step(
                self.q[t], self.k[t], self.v[t], cache, cfg)
            assert_allclose(
                output,
                dense_single_query(self.q[t], self.k[:t + 1], self.v[:t + 1]),
                atol=1e-4)

    def test_ring_keys_are_exact(self):
        # No delta fires, so only the ring and the basis cost MACs.
        cfg = HybridConfig(theta=100.0, w_d=4)
        cache = cache_init(self.k[0], self.v[0], 4, 100.0)
        for t in range(1, 10):
            _, report = decode_step(
                self.q[t], self.k[t], self.v[t], cache, cfg,
                oracle=(self.k[:t + 1], self.v[:t + 1]))

        self.assertEqual(cache.ring_positions(), [6, 7, 8, 9])
        self.assertEqual(report.mac_used, 5 * 8)
        self.assertEqual(report.mac_exact, 4 * 8)
        self.assertEqual(report.mac_skipped, 5 * 8)
        self.assertEqual(report.mac_skipped_fraction, 1.0)
        self.assertEqual(report.n, 10)
        self.assertEqual(report.s_m, 1.0)
        self.assertAlmostEqual(report.s_c, 1.0 - 4 / 10)
        self.assertGreater(report.err_max_abs, 0.0)

    @given(seed=st.integers(0, 2**32 - 1),
           d=st.integers(2, 16))
    @settings(max_examples=20, deadline=None)
    def test_decode_scores_against_oracle(self, seed, d):
        theta = 0.2
        q, k, v = make_streams(seed, 32, d, sigma=0.1)
        cfg = HybridConfig(theta=theta, w_d=4)
        cache = prefill_attention(
            q[:31], k[:31], v[:31], cfg, compare=False).cache
        decode_step(q[31], k[31], v[31], cache, cfg)

        scores = cached_scores(q[31], cache)
        exact = dense_scores(q[31:], k)
        self.assertEqual(scores.scores[0, 28:].tobytes(),
                         exact[0, 28:].tobytes())
        self.assertTrue(np.all(scores.mask(Exactness.FULL)[0, 28:]))
        self.assertTrue(np.all(scores.mask(Exactness.APPROXIMATE)[0, :28]))

        gap = np.abs(scores.scores[0, :28].astype(np.float64) -
                     exact[0, :28].astype(np.float64)) / np.sqrt(d)
        bound = theta * np.abs(q[31]).astype(np.float64).sum() / np.sqrt(d)
        self.assertTrue(np.all(gap <= bound + 2e-4))

    def test_decode_continues_prefill(self):
        cfg = HybridConfig(theta=0.1, gamma=0.1, w_d=4)
        result = run_head(self.q, self.k, self.v, 16, cfg)
        self.assertEqual(result.decode_outputs.shape, (8, 8))
        self.assertEqual(result.head.cache.length, 24)
        self.assertEqual(result.decode_report.n, 24)
        self.assertLess(result.decode_report.output_err_max, 0.5)

    @given(seed=st.integers(0, 2**32 - 1),
           total=st.integers(2, 64),
           prompt=st.floats(0.0, 1.0),
           d=st.integers(2, 64),
           gamma=st.sampled_from([0.05, 0.1, 0.25]),
           w_d=st.integers(1, 64))
    @settings(max_examples=50, deadline=None)
    def test_end_to_end_zero_threshold(
            self, seed, total, prompt, d, gamma, w_d):
        n = max(1, int(prompt * total))
        q, k, v = make_streams(seed, total, d)
        cfg = HybridConfig(theta=0.0, gamma=gamma, w_d=w_d)
        result = run_head(q, k, v, n, cfg, compare=False)
        assert_allclose(result.prefill.output, dense_attention(
            q[:n], k[:n], v[:n]), atol=1e-4)
        for i in range(total - n):
            t = n + i
            assert_allclose(
                result.decode_outputs[i],
                dense_single_query(q[t], k[:t + 1], v[:t + 1]),
                atol=1e-4)

    def test_query_strategy_cannot_decode(self):
        cache = cache_init(self.k[0], self.v[0], 4)
        cfg = HybridConfig(strategy='top-down-query')
        with self.assertRaises(ConfigError):
            decode_step(self.q[1], self.k[1], self.v[1], cache, cfg)

    def test_uninitialized_cache(self):
        with self.assertRaises(CacheStateError):
            decode_step(self.q[1], self.k[1], self.v[1],
                        DeltaKVCache(8, 4), HybridConfig())

    def test_theta_mismatch(self):
        cache = cache_init(self.k[0], self.v[0], 4, 0.1)
        with self.assertRaises(ConfigError):
            decode_step(self.q[1], self.k[1], self.v[1], cache,
                        HybridConfig(theta=0.2))

    def test_failed_append_keeps_state(self):
        cache = cache_init(self.k[0], self.v[0], 4, 0.1)
        state = cache.state.copy()
        with self.assertRaises(ShapeError):
            decode_step(self.q[1], self.k[1], self.v[1, :3], cache,
                        HybridConfig(theta=0.1))

        self.assertEqual(cache.state, state)
        self.assertEqual(cache.length, 1)

    def test_oracle_length(self):
        cfg = HybridConfig(theta=0.1)
        cache = cache_init(self.k[0], self.v[0], 4, 0.1)
        decode_step(self.q[1], self.k[1], self.v[1], cache, cfg)
        with self.assertRaises(ShapeError):
            cached_attention(self.q[1], cache, cfg,
                             oracle=(self.k[:3], self.v[:3]))

    def test_oracle_checked_before_append(self):
        cfg = HybridConfig(theta=0.1)
        cache = cache_init(self.k[0], self.v[0], 4, 0.1)
        state = cache.state.copy()
        with self.assertRaises(ShapeError):
            decode_step(self.q[1], self.k[1], self.v[1], cache, cfg,
                        oracle=(self.k[:3], self.v[:3]))

        self.assertEqual(cache.length, 1)
        self.assertEqual(cache.state, state)
        decode_step(self.q[1], self.k[1], self.v[1], cache, cfg,
                    oracle=(self.k[:2], self.v[:2]))
        self.assertEqual(cache.length, 2)


if __name__ == '__main__':
    unittest.main()
