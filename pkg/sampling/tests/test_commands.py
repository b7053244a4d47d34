import csv
import io
import os
import tempfile
from pathlib import Path
from unittest import mock

from django.apps import apps
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from sampling import montecarlo as mc
from sampling.management.commands._common import FIXTURES_DIR

REJECTIVE_6 = str(FIXTURES_DIR / "rejective_6.csv")
RAO_SAMPFORD_6 = str(FIXTURES_DIR / "rao_sampford_6.csv")
POISSON_12 = str(FIXTURES_DIR / "poisson_12.csv")


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    def run_command(self, name, **options):
        out = io.StringIO()
        call_command(name, stdout=out, stderr=io.StringIO(), **options)
        return out.getvalue()

    def assertExitCode(self, code, name, **options):
        with self.assertRaises(CommandError) as ctx:
            self.run_command(name, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception


class InclusionCommandTests(CommandTestCase):
    def test_forward_symmetric(self):
        pop = self.write("pop.csv", "x,p\n1,0.5\n2,0.5\n3,0.5\n")
        table = rows(self.run_command("inclusion", pop=pop, n=2))
        self.assertEqual([r["unit"] for r in table], ["0", "1", "2"])
        for r in table:
            self.assertAlmostEqual(float(r["pi"]), 2 / 3, places=12)

    def test_second_order_columns(self):
        pop = self.write("pop.csv", "x,p\n1,0.5\n2,0.5\n3,0.5\n4,0.5\n")
        table = rows(self.run_command("inclusion", pop=pop, n=2, second_order=True))
        self.assertEqual(list(table[0]), ["unit", "p", "pi", "pi_0", "pi_1", "pi_2", "pi_3"])
        self.assertAlmostEqual(float(table[0]["pi_1"]), 1 / 6, places=12)

    def test_inverse_round_trip(self):
        forward = rows(self.run_command("inclusion", pop=REJECTIVE_6, n=3))
        pi_text = "x,pi\n" + "".join(f"1,{r['pi']}\n" for r in forward)
        inverse = rows(self.run_command("inclusion", pop=self.write("pi.csv", pi_text), n=3, direction="inverse"))
        for a, b in zip(forward, inverse):
            self.assertAlmostEqual(float(a["p"]), float(b["p"]), delta=1e-8)

    def test_size_must_be_below_population(self):
        pop = self.write("pop.csv", "x,p\n1,0.5\n2,0.5\n")
        error = self.assertExitCode(2, "inclusion", pop=pop, n=2)
        self.assertIn("n", str(error))

    def test_missing_file(self):
        self.assertExitCode(2, "inclusion", pop=str(self.tmp / "missing.csv"), n=1)

    def test_file_with_byte_order_mark(self):
        path = self.tmp / "bom.csv"
        path.write_bytes("x,p\n1,0.5\n2,0.5\n3,0.5\n".encode("utf-8-sig"))
        table = rows(self.run_command("inclusion", pop=str(path), n=2))
        self.assertEqual(len(table), 3)

    def test_malformed_file(self):
        self.assertExitCode(2, "inclusion", pop=self.write("bad.csv", "x,p\n1,zero\n"), n=1)

    def test_writes_to_file(self):
        out = self.tmp / "pi.csv"
        self.assertEqual(self.run_command("inclusion", pop=REJECTIVE_6, n=3, out=str(out)), "")
        self.assertTrue(out.read_text().startswith("unit,p,pi\n"))


class SampleCommandTests(CommandTestCase):
    def test_deterministic(self):
        first = self.run_command("sample", pop=REJECTIVE_6, n=3, seed=7, reps=25)
        second = self.run_command("sample", pop=REJECTIVE_6, n=3, seed=7, reps=25)
        self.assertEqual(first, second)
        table = rows(first)
        self.assertEqual(len(table), 25)
        self.assertEqual(table[4]["seed_trace"], "7:4")
        self.assertTrue(all(len(r["units"].split()) == 3 for r in table))

    def test_poisson_needs_no_size(self):
        table = rows(self.run_command("sample", pop=POISSON_12, scheme="poisson", seed=1, reps=5))
        self.assertEqual(len(table), 5)

    def test_fixed_size_scheme_needs_size(self):
        self.assertExitCode(2, "sample", pop=REJECTIVE_6, scheme="swor", seed=1, reps=5)


class EstimateCommandTests(CommandTestCase):
    def test_columns(self):
        table = rows(self.run_command("estimate", pop=RAO_SAMPFORD_6, scheme="rao-sampford", n=3, seed=3, reps=20))
        self.assertEqual(list(table[0]), ["replication", "size", "ht_pi", "ht_p"])
        self.assertTrue(all(r["size"] == "3" for r in table))

    def test_swor_weightings_coincide(self):
        table = rows(self.run_command("estimate", pop=REJECTIVE_6, scheme="swor", n=2, seed=3, reps=10))
        self.assertTrue(all(r["ht_pi"] == r["ht_p"] for r in table))


class BoundsCommandTests(CommandTestCase):
    def test_rejective_columns(self):
        table = rows(self.run_command("bounds", pop=REJECTIVE_6, n=3, t_grid="0:10:5"))
        self.assertEqual(len(table), 5)
        self.assertEqual(list(table[0])[:3], ["t", "poisson-bennett", "poisson-bernstein"])
        self.assertEqual(float(table[0]["na-bernstein"]), 2.0)

    def test_poisson_columns(self):
        table = rows(self.run_command("bounds", pop=POISSON_12, scheme="poisson", t_grid="0:4:3"))
        self.assertEqual(list(table[0]), ["t", "poisson-bennett", "poisson-bernstein", "na-bennett", "na-bernstein"])

    def test_bad_grid(self):
        self.assertExitCode(2, "bounds", pop=REJECTIVE_6, n=3, t_grid="5:1:3")
        self.assertExitCode(2, "bounds", pop=REJECTIVE_6, n=3, t_grid="0:1")

    def test_constant_below_one(self):
        self.assertExitCode(2, "bounds", pop=REJECTIVE_6, n=3, constant_C=0.5)


class CICommandTests(CommandTestCase):
    def test_delta_one_gives_zero_width(self):
        table = rows(self.run_command("ci", pop=REJECTIVE_6, n=3, delta=1.0))
        self.assertEqual({r["bound"] for r in table},
                         {"na-bennett", "na-bernstein", "ht-pi-bennett", "ht-pi-bernstein"})
        for r in table:
            self.assertEqual(float(r["radius"]), 0.0)
            self.assertEqual(r["lower"], r["upper"])

    def test_fixed_size_schemes_skip_poisson_bounds(self):
        for scheme, pop in (("swor", REJECTIVE_6), ("rejective", REJECTIVE_6), ("rao-sampford", RAO_SAMPFORD_6)):
            with self.subTest(scheme=scheme):
                table = rows(self.run_command("ci", pop=pop, scheme=scheme, n=3, delta=0.1))
                self.assertTrue(table)
                self.assertFalse(any(r["bound"].startswith("poisson-") for r in table))

    def test_intervals_contain_estimate(self):
        for r in rows(self.run_command("ci", pop=POISSON_12, scheme="poisson", delta=0.05)):
            self.assertLess(float(r["lower"]), float(r["estimate"]))
            self.assertLess(float(r["estimate"]), float(r["upper"]))
            self.assertEqual(r["C"], "")

    def test_delta_zero(self):
        self.assertExitCode(2, "ci", pop=REJECTIVE_6, n=3, delta=0.0)


@override_settings(SAMPLING_BLOCK_SIZE=500)
class VerifyCommandTests(CommandTestCase):
    def test_shipped_design_passes(self):
        summary = self.tmp / "summary.txt"
        report = self.tmp / "report.csv"
        self.run_command("verify", design="swor_100", reps=2000, out=str(report), summary=str(summary))
        self.assertTrue(summary.read_text().endswith("status=pass\n"))
        self.assertTrue(report.read_text().startswith("design,check,t,name,value,asserted,passed\n"))

    def test_identical_across_workers(self):
        outputs = []
        for workers in (1, 2):
            path = self.tmp / f"report_{workers}.csv"
            self.run_command("verify", design="swor_100", reps=2000, workers=workers, out=str(path),
                             summary=str(self.tmp / "summary.txt"))
            outputs.append(path.read_bytes())
        self.assertEqual(outputs[0], outputs[1])

    def test_population_file_with_checks(self):
        text = self.run_command("verify", pop=REJECTIVE_6, n=3, reps=300,
                                checks="inclusion-oracle,variance-identity")
        self.assertIn("population,inclusion-oracle,,first_order_gap,", text)
        self.assertTrue(text.endswith("status=pass\n"))

    def test_unknown_check(self):
        self.assertExitCode(2, "verify", design="swor_100", reps=10, checks="speed")

    def test_unknown_design(self):
        self.assertExitCode(2, "verify", design="nope", reps=10)

    def test_pop_and_design_are_exclusive(self):
        self.assertExitCode(2, "verify", design="swor_100", pop=REJECTIVE_6, n=3, reps=10)

    def test_failed_check_exits_with_one(self):
        failed = mc.VerificationReport("population", "swor", 6, 3, 10, 1)
        failed.results.append(mc.CheckResult("coverage", "rate", 0.5, asserted=True, passed=False))
        out = self.tmp / "report.csv"
        with mock.patch("sampling.management.commands.verify.run_experiment", return_value=failed):
            error = self.assertExitCode(1, "verify", pop=REJECTIVE_6, scheme="swor", n=3, reps=10, out=str(out))
        self.assertIn("coverage/rate", str(error))
        self.assertTrue(out.exists())


class CompareCommandTests(CommandTestCase):
    def test_rao_sampford_within_pinsker(self):
        plan_out = self.tmp / "plan.csv"
        table = rows(self.run_command("compare", pop=REJECTIVE_6, n=3, against="rao-sampford",
                                      plan_out=str(plan_out)))
        self.assertEqual(len(table), 21)
        self.assertTrue(all(r["l1_within_pinsker"] == "true" for r in table))
        for r in table:
            self.assertLessEqual(float(r["tail_gap"]), float(r["l1"]) + 1e-12)
            self.assertGreaterEqual(float(r["transfer_bound"]) + 1e-12, float(r["tail_other"]))
        plan_lines = plan_out.read_text().splitlines()
        self.assertEqual(plan_lines[0], "mask,probability")
        self.assertEqual(len(plan_lines), 1 + 20)

    def test_poisson(self):
        table = rows(self.run_command("compare", pop=REJECTIVE_6, n=3, against="poisson", t_grid="0:5:6"))
        self.assertEqual(len(table), 6)
        self.assertGreater(float(table[0]["l1"]), 0.0)

    def test_no_partial_output_on_error(self):
        out = self.tmp / "compare.csv"
        pop = self.write("pop.csv", "x,p\n1,0.5\n2,0.5\n")
        self.assertExitCode(2, "compare", pop=pop, n=3, out=str(out))
        self.assertFalse(out.exists())
        self.assertEqual([name for name in os.listdir(self.tmp) if name.endswith(".tmp")], [])


class SettingsTests(SimpleTestCase):
    def test_only_the_sampling_stack_is_installed(self):
        self.assertFalse(apps.is_installed("django.contrib.auth"))
        self.assertFalse(apps.is_installed("django.contrib.contenttypes"))
        self.assertTrue(apps.is_installed("sampling"))
