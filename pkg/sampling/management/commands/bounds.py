import csv
import logging

from sampling.bounds import BoundKind, bound_curve
from sampling.estimators import variance_profile
from sampling.montecarlo import default_thresholds, grid_from_spec, resolve_design
from sampling.schemes import SchemeKind
from sampling.serializers import BoundsSerializer

from ._common import SamplingCommand, add_design_arguments, build_scheme, read_population, setting_defaults

logger = logging.getLogger(__name__)


def kinds_for(kind: SchemeKind):
    if kind is SchemeKind.POISSON:
        return [BoundKind.POISSON_BENNETT, BoundKind.POISSON_BERNSTEIN, BoundKind.NA_BENNETT, BoundKind.NA_BERNSTEIN]
    if kind is SchemeKind.RAO_SAMPFORD:
        return [BoundKind.NA_BENNETT, BoundKind.NA_BERNSTEIN]
    return list(BoundKind)


class Command(SamplingCommand):
    help = (
        "Tail bound curves for P{HT - S_N > t}. Output columns: t followed by one column per bound "
        "(poisson-*, na-* for Poisson designs; na-* for Rao-Sampford; all eight kinds for rejective and SWOR). "
        "Values are raw: NA bounds reach 2 and constant-C bounds reach C at t = 0."
    )
    serializer_class = BoundsSerializer

    def add_arguments(self, parser):
        add_design_arguments(parser)
        parser.add_argument("--t-grid", dest="t_grid", help="min:max:count, linearly spaced.")
        parser.add_argument("--constant-C", dest="constant_C", type=float, help="Universal constant C (>= 1).")

    def defaults(self):
        return setting_defaults("constant_C")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        spec = build_scheme(data["scheme"], pop, weights, data["n"])
        design = resolve_design(spec)
        profile = variance_profile(pop, p=design.p, pi=design.pi)
        grid = grid_from_spec(data["t_grid"]) if data["t_grid"] else default_thresholds(profile)
        curves = [bound_curve(kind, profile, grid, C=data["constant_C"]) for kind in kinds_for(spec.kind)]
        flags = sorted({flag for curve in curves for flag in curve.flags})
        for flag in flags:
            logger.warning("%s", flag)

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["t"] + [curve.bound_kind.value for curve in curves])
            for j, t in enumerate(grid):
                writer.writerow([repr(float(t))] + [repr(float(curve.values[j])) for curve in curves])

        self.emit(data["out"], render)
