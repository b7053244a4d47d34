import itertools
import math

import numpy as np
from django.test import SimpleTestCase, override_settings
from scipy.optimize import brentq
from scipy.special import expit, logit

from sampling import poisson_binomial as pb
from sampling.errors import ConvergenceError, DegenerateDesignError, DesignError
from sampling.exact import enumerate_plan
from sampling.schemes import SchemeSpec


def heterogeneous(size, n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size)
    return p * (n / p.sum())


def with_size(p, n):
    """Same rejective plan, odds shifted so the weights sum to n."""
    log_odds = logit(p)
    shift = brentq(lambda s: expit(log_odds + s).sum() - n, -60.0, 60.0, xtol=1e-14)
    return expit(log_odds + shift)


class PmfTableTests(SimpleTestCase):
    def test_two_fair_coins(self):
        np.testing.assert_allclose(pb.pmf_table([0.5, 0.5]).probs, [0.25, 0.5, 0.25], atol=1e-15)

    def test_empty_product(self):
        self.assertEqual(pb.pmf_table([]).probs.tolist(), [1.0])

    def test_three_units(self):
        np.testing.assert_allclose(pb.pmf_table([0.2, 0.3, 0.5]).probs, [0.28, 0.47, 0.22, 0.03], atol=1e-12)

    def test_index_outside_range_is_zero(self):
        table = pb.pmf_table([0.2, 0.3])
        self.assertEqual(table[-1], 0.0)
        self.assertEqual(table[3], 0.0)
        self.assertEqual(len(table), 3)

    def test_sums_to_one_for_long_sequences(self):
        table = pb.pmf_table(np.random.default_rng(1).uniform(0.01, 0.99, 500))
        self.assertAlmostEqual(math.fsum(table.probs), 1.0, delta=1e-12)
        self.assertTrue(np.all(table.probs >= 0.0))

    def test_log_table_agrees(self):
        p = np.random.default_rng(2).uniform(0.05, 0.95, 40)
        np.testing.assert_allclose(np.exp(pb.log_pmf_table(p)), pb.pmf_table(p).probs, rtol=1e-10, atol=1e-300)

    @override_settings(SAMPLING_LOG_DOMAIN_ABOVE_N=5)
    def test_log_domain_inclusions_agree(self):
        p = heterogeneous(12, 4, seed=3)
        with override_settings(SAMPLING_LOG_DOMAIN_ABOVE_N=10_000):
            linear = pb.first_order_inclusion(p, 4)
        np.testing.assert_allclose(pb.first_order_inclusion(p, 4), linear, atol=1e-12)

    def test_out_of_range_probability(self):
        with self.assertRaises(DesignError):
            pb.pmf_table([0.5, 1.5])


class SizeProbabilityTests(SimpleTestCase):
    def test_exact_mass(self):
        self.assertAlmostEqual(pb.size_probability([0.2, 0.3, 0.5], 1), 0.47, places=12)
        self.assertEqual(pb.size_probability([0.2, 0.3, 0.5], 4), 0.0)

    def test_local_limit_for_large_size_variance(self):
        ratio = pb.local_limit_ratio(np.full(200, 0.5), 100)
        self.assertLessEqual(abs(ratio - 1.0), 0.1)


class FirstOrderTests(SimpleTestCase):
    def test_symmetric(self):
        np.testing.assert_allclose(pb.first_order_inclusion([0.5, 0.5, 0.5], 2), [2 / 3] * 3, atol=1e-12)

    def test_singletons_follow_odds(self):
        odds = np.array([0.2 / 0.8, 0.3 / 0.7, 0.5 / 0.5])
        pi = pb.first_order_inclusion([0.2, 0.3, 0.5], 1)
        np.testing.assert_allclose(pi, odds / odds.sum(), atol=1e-12)
        np.testing.assert_allclose(pi, [0.148936, 0.255319, 0.595745], atol=1e-6)

    def test_uniform_weights_give_n_over_N(self):
        np.testing.assert_allclose(pb.first_order_inclusion(np.full(7, 3 / 7), 3), np.full(7, 3 / 7), atol=1e-12)

    def test_sum_is_n(self):
        pi = pb.first_order_inclusion(heterogeneous(30, 10, seed=4), 10)
        self.assertAlmostEqual(math.fsum(pi), 10.0, delta=1e-9)
        self.assertTrue(np.all((pi > 0) & (pi <= 1)))

    def test_size_must_be_inside_range(self):
        with self.assertRaises(DesignError):
            pb.first_order_inclusion([0.5, 0.5, 0.5], 3)
        with self.assertRaises(DesignError):
            pb.first_order_inclusion([0.5, 0.5, 0.5], 0)

    def test_impossible_size_is_degenerate(self):
        with self.assertRaises(DegenerateDesignError):
            pb.first_order_inclusion([1e-320, 1e-320, 0.5], 2)


class SecondOrderTests(SimpleTestCase):
    def test_uniform_pairs(self):
        table = pb.second_order_inclusion(np.full(4, 0.5), 2)
        off = table[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, 1 / 6, atol=1e-12)
        np.testing.assert_allclose(np.diag(table), 0.5, atol=1e-12)

    def test_matches_enumeration(self):
        p = np.array([0.2, 0.3, 0.5])
        odds = p / (1 - p)
        pairs = list(itertools.combinations(range(3), 2))
        weight = {s: odds[s[0]] * odds[s[1]] for s in pairs}
        norm = sum(weight.values())
        table = pb.second_order_inclusion(p, 2)
        for i, j in pairs:
            self.assertAlmostEqual(table[i, j], weight[(i, j)] / norm, delta=1e-12)
            self.assertEqual(table[i, j], table[j, i])

    def test_pairwise_negative_correlation(self):
        p = heterogeneous(8, 3, seed=5)
        table = pb.second_order_inclusion(p, 3)
        pi = np.diag(table)
        off = ~np.eye(8, dtype=bool)
        self.assertTrue(np.all(table[off] <= np.outer(pi, pi)[off] + 1e-15))
        self.assertTrue(np.all(table[off] <= np.minimum.outer(pi, pi)[off] + 1e-15))

    def test_fixed_size_has_no_size_variance(self):
        cov = pb.covariance_matrix(heterogeneous(9, 4, seed=6), 4)
        self.assertAlmostEqual(pb.size_variance(cov), 0.0, delta=1e-10)


class SolveCanonicalTests(SimpleTestCase):
    def test_symmetric_fixed_point(self):
        solution = pb.solve_canonical([2 / 3] * 3, 2)
        np.testing.assert_allclose(solution.p, [2 / 3] * 3, atol=1e-10)
        self.assertEqual(solution.forced, ())

    def test_round_trip(self):
        p_star = np.array([0.1, 0.4, 0.7, 0.8])
        solution = pb.solve_canonical(pb.first_order_inclusion(p_star, 2), 2)
        np.testing.assert_allclose(solution.p, p_star, atol=1e-8)
        self.assertAlmostEqual(math.fsum(solution.p), 2.0, delta=1e-9)

    def test_round_trip_fifty_units(self):
        p_star = heterogeneous(50, 20, seed=7)
        solution = pb.solve_canonical(pb.first_order_inclusion(p_star, 20), 20)
        np.testing.assert_allclose(solution.p, p_star, atol=1e-8)

    def test_forced_unit(self):
        solution = pb.solve_canonical([1.0, 0.5, 0.5], 2)
        self.assertEqual(solution.forced, (0,))
        self.assertEqual(solution.p[0], 1.0)
        np.testing.assert_allclose(solution.p[1:], [0.5, 0.5], atol=1e-10)

    def test_target_sum_must_match(self):
        with self.assertRaises(DesignError):
            pb.solve_canonical([0.5, 0.5, 0.5], 2)

    def test_reports_non_convergence(self):
        target = pb.first_order_inclusion(heterogeneous(20, 6, seed=8), 6)
        with self.assertRaises(ConvergenceError) as ctx:
            pb.solve_canonical(target, 6, max_iter=1, tol=1e-15)
        self.assertGreater(ctx.exception.residual, 0.0)


class HajekResidualTests(SimpleTestCase):
    def test_uniform_weights_have_no_residual(self):
        p = np.full(10, 0.3)
        diag = pb.hajek_residuals(p, p, 3)
        self.assertLess(np.max(np.abs(diag.rel1)), 1e-12)
        self.assertLess(np.max(np.abs(diag.rel2)), 1e-12)

    def test_bias_bound_holds(self):
        p = heterogeneous(40, 12, seed=9)
        pi = pb.first_order_inclusion(p, 12)
        diag = pb.hajek_residuals(p, pi, 12)
        self.assertGreaterEqual(diag.d_N, 1.0)
        self.assertTrue(diag.bias_bound_holds)
        self.assertTrue(np.all(diag.bias_slack >= -1e-12))

    def test_bias_bound_not_evaluated_below_unit_size_variance(self):
        p = np.array([0.05, 0.05, 0.9])
        diag = pb.hajek_residuals(p, pb.first_order_inclusion(p, 1), 1)
        self.assertLess(diag.d_N, 1.0)
        self.assertIsNone(diag.bias_bound_holds)


class EnumerationOracleTests(SimpleTestCase):
    def test_random_designs_match_enumeration(self):
        rng = np.random.default_rng(2024)
        for design in range(20):
            size = int(rng.integers(2, 11))
            base = rng.uniform(0.05, 0.95, size)
            for n in range(1, size):
                with self.subTest(design=design, size=size, n=n):
                    p = with_size(base, n)
                    plan = enumerate_plan(SchemeSpec.rejective(p, n))
                    first = pb.first_order_inclusion(p, n)
                    np.testing.assert_allclose(first, plan.marginals(), rtol=0, atol=1e-10)
                    np.testing.assert_allclose(pb.second_order_inclusion(p, n), plan.pair_marginals(),
                                               rtol=0, atol=1e-10)
                    self.assertAlmostEqual(math.fsum(first), n, delta=1e-9)

    def test_canonical_round_trip_on_fifty_units(self):
        for k, n in enumerate(range(4, 14)):
            with self.subTest(n=n):
                p_star = heterogeneous(50, n, seed=100 + k)
                solution = pb.solve_canonical(pb.first_order_inclusion(p_star, n), n)
                self.assertLessEqual(float(np.max(np.abs(solution.p - p_star))), 1e-8)


class RejectiveInclusionsTests(SimpleTestCase):
    def test_bundles_both_orders(self):
        p = heterogeneous(7, 3, seed=11)
        inclusions = pb.rejective_inclusions(p, 3)
        self.assertEqual(inclusions.sample_size, 3)
        np.testing.assert_array_equal(inclusions.first_order, pb.first_order_inclusion(p, 3))
        np.testing.assert_array_equal(inclusions.second_order, pb.second_order_inclusion(p, 3))

    def test_second_order_is_optional(self):
        inclusions = pb.rejective_inclusions(heterogeneous(5, 2, seed=12), 2, second_order=False)
        self.assertIsNone(inclusions.second_order)
