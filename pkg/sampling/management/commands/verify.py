import io
import logging

from django.core.management.base import CommandError

from sampling.estimators import variance_profile
from sampling.montecarlo import (
    CHECKS,
    ExperimentConfig,
    default_thresholds,
    grid_from_spec,
    report_summary,
    report_to_csv,
    resolve_design,
    run_experiment,
)
from sampling.serializers import VerifySerializer

from ._common import (
    SHIPPED_DESIGNS,
    SamplingCommand,
    build_scheme,
    read_population,
    setting_defaults,
    shipped_design,
    write_atomic,
)

logger = logging.getLogger(__name__)


class Command(SamplingCommand):
    help = (
        "Run the replicated verification suite on one population file or on the shipped designs. "
        "CSV columns: design,check,t,name,value,asserted,passed. The key=value summary goes to --summary "
        "or stdout. Exit status 1 when any asserted check fails."
    )
    serializer_class = VerifySerializer

    def add_arguments(self, parser):
        parser.add_argument("--pop", help="Population CSV; omit to run the shipped designs.")
        parser.add_argument("--design", help=f"One shipped design: {', '.join(d.label for d in SHIPPED_DESIGNS)}.")
        parser.add_argument("--n", type=int)
        parser.add_argument("--scheme", choices=["poisson", "rejective", "swor", "rao-sampford"])
        parser.add_argument("--algorithm", choices=["auto", "rejection", "sequential"])
        parser.add_argument("--seed", type=int, help="64-bit master seed.")
        parser.add_argument("--reps", type=int)
        parser.add_argument("--t-grid", dest="t_grid", help="min:max:count; default 0 to 4 NA standard deviations.")
        parser.add_argument("--delta", type=float, help="Miss probability for the coverage check.")
        parser.add_argument("--constant-C", dest="constant_C", type=float)
        parser.add_argument("--workers", type=int)
        parser.add_argument("--checks", help=f"Comma-separated subset of: {', '.join(CHECKS)}.")
        parser.add_argument("--out", help="Report CSV; stdout when omitted and no summary file is given.")
        parser.add_argument("--summary", help="Summary file (key=value lines).")

    def defaults(self):
        return setting_defaults("seed", "reps", "workers", "constant_C", "delta")

    def validated(self, options):
        checks = options.get("checks")
        if isinstance(checks, str):
            options = dict(options, checks=[c.strip() for c in checks.split(",") if c.strip()])
        return super().validated(options)

    def _targets(self, data):
        if data["pop"]:
            pop, weights = read_population(data["pop"])
            spec = build_scheme(data["scheme"], pop, weights, data["n"], data["algorithm"])
            return [("population", pop, spec)]
        chosen = [shipped_design(data["design"])] if data["design"] else SHIPPED_DESIGNS
        targets = []
        for design in chosen:
            pop, weights = read_population(str(design.path))
            targets.append((design.label, pop, build_scheme(design.scheme, pop, weights, design.n, data["algorithm"])))
        return targets

    def run(self, data):
        reports = []
        for label, pop, spec in self._targets(data):
            if data["t_grid"]:
                grid = grid_from_spec(data["t_grid"])
            else:
                design = resolve_design(spec)
                grid = default_thresholds(variance_profile(pop, p=design.p, pi=design.pi))
            config = ExperimentConfig(
                scheme=spec,
                population=pop,
                replications=data["reps"],
                thresholds=grid,
                master_seed=data["seed"],
                checks=frozenset(data["checks"]) if data["checks"] else frozenset(CHECKS),
                delta=data["delta"],
                constant_C=data["constant_C"],
                workers=data["workers"],
                label=label,
            )
            reports.append(run_experiment(config))

        csv_buffer = io.StringIO()
        report_to_csv(reports, csv_buffer)
        summary_buffer = io.StringIO()
        report_summary(reports, summary_buffer)

        if data["out"]:
            write_atomic(data["out"], csv_buffer.getvalue())
        if data["summary"]:
            write_atomic(data["summary"], summary_buffer.getvalue())
        if not data["out"] and not data["summary"]:
            self.stdout.write(csv_buffer.getvalue(), ending="")
        if not data["summary"]:
            self.stdout.write(summary_buffer.getvalue(), ending="")

        failed = [f"{r.label}:{f.check}/{f.name}" + ("" if f.t is None else f"@{f.t!r}")
                  for r in reports for f in r.failures()]
        if failed:
            raise CommandError(f"{len(failed)} asserted check(s) failed: {', '.join(failed[:10])}", returncode=1)
