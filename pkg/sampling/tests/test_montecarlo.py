import io
import math

import numpy as np
from django.test import SimpleTestCase, override_settings

from sampling import montecarlo as mc
from sampling.bounds import BoundKind, bernstein_kernel
from sampling.errors import DesignError
from sampling.estimators import variance_profile
from sampling.management.commands._common import build_scheme, read_population, shipped_design
from sampling.population import Population
from sampling.schemes import SchemeSpec

P6 = (0.2, 0.3, 0.4, 0.6, 0.7, 0.8)
X6 = (1.5, 2.0, 3.5, 4.0, 6.0, 7.0)


def shipped(label, reps, **kwargs):
    design = shipped_design(label)
    pop, weights = read_population(str(design.path))
    spec = build_scheme(design.scheme, pop, weights, design.n)
    resolved = mc.resolve_design(spec)
    grid = mc.default_thresholds(variance_profile(pop, p=resolved.p, pi=resolved.pi))
    return mc.ExperimentConfig(scheme=spec, population=pop, replications=reps, thresholds=grid,
                               master_seed=20240101, label=label, **kwargs)


def check_values(report, check, name):
    return [r.value for r in report.results if r.check == check and r.name == name]


class ClopperPearsonTests(SimpleTestCase):
    def test_no_events(self):
        lower, upper = mc.clopper_pearson([0], 10, 0.95)
        self.assertEqual(lower[0], 0.0)
        self.assertAlmostEqual(upper[0], 1 - 0.025 ** (1 / 10), places=10)

    def test_all_events(self):
        lower, upper = mc.clopper_pearson([10], 10, 0.95)
        self.assertEqual(upper[0], 1.0)
        self.assertAlmostEqual(lower[0], 0.025 ** (1 / 10), places=10)

    def test_tail_estimates_count_strict_exceedances(self):
        rows = mc.tail_estimates([-1.0, 0.0, 1.0, 2.0], [-2.0, 0.0, 2.0], level=0.9)
        self.assertEqual([r.events for r in rows], [4, 2, 0])
        self.assertEqual([r.estimate for r in rows], [1.0, 0.5, 0.0])
        self.assertTrue(all(r.cp_lower <= r.estimate <= r.cp_upper for r in rows))

    def test_empirical_tail_from_stream(self):
        pop = Population([1.0, 2.0, 3.0, 4.0])
        spec = SchemeSpec.swor(4, 2)
        rows = mc.empirical_tail(mc.draw_stream(spec, 5), pop, [0.5] * 4, [-5.0, 5.0], reps=200)
        self.assertEqual([r.estimate for r in rows], [1.0, 0.0])


class ExperimentConfigTests(SimpleTestCase):
    def setUp(self):
        self.spec = SchemeSpec.rejective(P6, 3)
        self.pop = Population(X6)

    def config(self, **kwargs):
        values = dict(scheme=self.spec, population=self.pop, replications=10, thresholds=(0.0, 1.0),
                      master_seed=1)
        values.update(kwargs)
        return mc.ExperimentConfig(**values)

    def test_defaults(self):
        config = self.config()
        self.assertEqual(config.label, "rejective-sequential")
        self.assertEqual(config.checks, frozenset(mc.CHECKS))
        self.assertEqual(config.partitions, (((0, 2, 4), (1, 3, 5)), ((0,), (1,))))

    def test_rejects_bad_values(self):
        for kwargs in ({"replications": 0}, {"thresholds": ()}, {"thresholds": (1.0, 0.0)},
                       {"thresholds": (0.0, math.inf)}, {"checks": {"nope"}}, {"delta": 1.0},
                       {"confidence_level": 1.0}, {"master_seed": -1}, {"population": Population([1.0])}):
            with self.subTest(kwargs=kwargs), self.assertRaises(DesignError):
                self.config(**kwargs)

    def test_grid_helpers(self):
        self.assertEqual(mc.grid_from_spec((0.0, 2.0, 3)), (0.0, 1.0, 2.0))
        profile = variance_profile(Population([1.0, 2.0, 3.0]), p=[0.5] * 3, pi=[0.5] * 3)
        grid = mc.default_thresholds(profile)
        self.assertEqual(len(grid), 21)
        self.assertAlmostEqual(grid[-1], 4 * math.sqrt(14.0), places=12)


class ResolveDesignTests(SimpleTestCase):
    def test_swor(self):
        design = mc.resolve_design(SchemeSpec.swor(5, 2))
        self.assertEqual(design.pi.tolist(), [0.4] * 5)
        self.assertEqual(design.n, 2)

    def test_rao_sampford_recovers_canonical_weights(self):
        rejective = mc.resolve_design(SchemeSpec.rejective(P6, 3))
        rao_sampford = mc.resolve_design(SchemeSpec.rao_sampford(rejective.pi, 3))
        np.testing.assert_allclose(rao_sampford.p, P6, atol=1e-8)


class SimulateTests(SimpleTestCase):
    def test_same_draws_across_block_sizes(self):
        spec = SchemeSpec.rejective(P6, 3)
        pop = Population(X6)
        design = mc.resolve_design(spec)
        whole = mc.simulate(spec, pop, design, 3, 300, block_size=300, keep_masks=True)
        split = mc.simulate(spec, pop, design, 3, 300, block_size=70, keep_masks=True)
        self.assertTrue(np.array_equal(whole.masks, split.masks))
        self.assertTrue(np.all(whole.sizes == 3))
        np.testing.assert_allclose(whole.ht_pi, split.ht_pi, rtol=1e-12)

    def test_gap_and_p_weighted_total(self):
        spec = SchemeSpec.rejective(P6, 3)
        pop = Population(X6)
        design = mc.resolve_design(spec)
        sim = mc.simulate(spec, pop, design, 3, 50)
        np.testing.assert_array_equal(sim.ht_p, sim.ht_pi - sim.gap)
        self.assertEqual(sim.ht_p.shape, (50,))
        self.assertEqual(sim.replications, 50)


class ProbeTests(SimpleTestCase):
    def test_poisson_blocks_are_uncorrelated(self):
        spec = SchemeSpec.poisson((0.3, 0.6, 0.2, 0.9))
        for probe in mc.na_covariance_probe(spec, 4000, master_seed=8):
            with self.subTest(probe=probe.name):
                self.assertFalse(probe.flagged)
                self.assertAlmostEqual(probe.exact, 0.0, delta=1e-12)

    def test_rejective_blocks_are_negatively_associated(self):
        probes = mc.na_covariance_probe(SchemeSpec.rejective(P6, 3), 4000, master_seed=8)
        self.assertEqual([p.name for p in probes][:2], ["sum[0,2,4|1,3,5]", "any[0,2,4|1,3,5]"])
        for probe in probes:
            with self.subTest(probe=probe.name):
                self.assertFalse(probe.flagged)
                self.assertLessEqual(probe.exact, 1e-12)

    def test_overlapping_blocks(self):
        with self.assertRaises(DesignError):
            mc.na_covariance_probe(SchemeSpec.swor(4, 2), 10, partitions=[((0, 1), (1, 2))])


class CalibrationTests(SimpleTestCase):
    def setUp(self):
        self.profile = variance_profile(Population([1.0, 2.0, 3.0]), p=[0.5] * 3, pi=[0.5] * 3)

    def test_no_events_gives_zero(self):
        rows = [mc.TailEstimate(1.0, 0, 100, 0.0, 0.0, 0.03)]
        self.assertEqual(mc.calibrate_constant(self.profile, rows), 0.0)

    def test_ratio_to_kernel(self):
        rows = [mc.TailEstimate(1.0, 5, 100, 0.05, 0.01, 0.1), mc.TailEstimate(2.0, 0, 100, 0.0, 0.0, 0.03)]
        expected = 0.1 / bernstein_kernel(1.0, self.profile.sigma2_N, self.profile.c_p)
        self.assertAlmostEqual(mc.calibrate_constant(self.profile, rows, BoundKind.REJECTIVE_BERNSTEIN), expected,
                               places=12)

    def test_crossover(self):
        self.assertEqual(mc.crossover_point(self.profile, [0.0, 1.0, 2.0, 3.0]), 1.0)


class RunExperimentTests(SimpleTestCase):
    def test_small_rejective_design_passes(self):
        report = mc.run_experiment(shipped("rejective_6", 3000))
        self.assertEqual(report.failures(), [])
        self.assertLessEqual(check_values(report, "inclusion-oracle", "first_order_gap")[0], 1e-10)
        self.assertEqual(len(report.tail_rows), 21)
        self.assertTrue(all(row.exact is not None for row in report.tail_rows))

    def test_swor_design_passes(self):
        report = mc.run_experiment(shipped("swor_100", 2000))
        self.assertTrue(report.passed)
        self.assertEqual(check_values(report, "pathwise-bias", "skipped"), ["pi and p coincide for this scheme"])
        self.assertEqual(check_values(report, "inclusion-oracle", "skipped"), ["design too large to enumerate"])

    def test_large_rejective_design(self):
        report = mc.run_experiment(shipped("rejective_200", 2000, checks={"pathwise-bias", "local-limit"}))
        self.assertTrue(report.passed)
        self.assertEqual(check_values(report, "pathwise-bias", "violations"), [0])
        asserted = [r for r in report.results if r.check == "local-limit" and r.name == "ratio"]
        self.assertTrue(asserted[0].asserted)

    def test_poisson_coverage(self):
        report = mc.run_experiment(shipped("poisson_12", 2000, checks={"coverage", "envelope"}))
        self.assertTrue(report.passed)
        rate = check_values(report, "coverage", "rate")[0]
        self.assertGreaterEqual(rate, 0.95)

    def test_sampler_law_runs_both_rejective_samplers(self):
        report = mc.run_experiment(shipped("rejective_6", 500, checks={"sampler-law"}))
        names = {r.name for r in report.results if r.check == "sampler-law"}
        self.assertLessEqual({"l1_distance[rejective-sequential]", "l1_distance[rejective-rejection]",
                              "l1_between_samplers"}, names)
        self.assertFalse(any(r.asserted for r in report.results))

    def test_sampler_law_is_asserted_at_full_replications(self):
        report = mc.run_experiment(shipped("rejective_6", 100_000, checks={"sampler-law"}))
        asserted = {r.name for r in report.results if r.asserted}
        self.assertEqual(asserted, {"l1_distance[rejective-sequential]", "l1_distance[rejective-rejection]",
                                    "l1_between_samplers"})
        self.assertTrue(report.passed)

    def test_checks_subset(self):
        report = mc.run_experiment(shipped("rejective_6", 100, checks={"variance-identity"}))
        self.assertEqual({r.check for r in report.results}, {"variance-identity"})
        self.assertEqual(report.tail_rows, [])

    @override_settings(SAMPLING_BLOCK_SIZE=400)
    def test_report_is_identical_across_workers(self):
        outputs = []
        for workers in (1, 2):
            buffer = io.StringIO()
            mc.report_to_csv([mc.run_experiment(shipped("rao_sampford_6", 1200, workers=workers))], buffer)
            outputs.append(buffer.getvalue())
        self.assertEqual(outputs[0], outputs[1])


class ReportWriterTests(SimpleTestCase):
    def test_csv_and_summary(self):
        report = mc.run_experiment(shipped("rejective_6", 200, checks={"unbiasedness", "envelope"}))
        csv_buffer, summary = io.StringIO(), io.StringIO()
        mc.report_to_csv([report], csv_buffer)
        mc.report_summary([report], summary)
        lines = csv_buffer.getvalue().splitlines()
        self.assertEqual(lines[0], "design,check,t,name,value,asserted,passed")
        self.assertTrue(any(line.startswith("rejective_6,tail,0.0,empirical,") for line in lines))
        text = summary.getvalue()
        self.assertIn("rejective_6.scheme=rejective-sequential", text)
        self.assertIn("rejective_6.per_threshold.asserted=", text)
        self.assertTrue(text.endswith(f"status={'pass' if report.passed else 'fail'}\n"))

    def test_failures_make_the_status_fail(self):
        report = mc.VerificationReport("demo", "swor", 4, 2, 10, 1)
        report.results.append(mc.CheckResult("coverage", "rate", 0.5, asserted=True, passed=False))
        summary = io.StringIO()
        mc.report_summary([report], summary)
        self.assertIn("demo.status=fail", summary.getvalue())
        self.assertTrue(summary.getvalue().endswith("status=fail\n"))
