import csv
import functools

from sampling.bounds import BoundKind, confidence_interval, evaluate
from sampling.estimators import ht_total, variance_profile
from sampling.montecarlo import resolve_design
from sampling.schemes import draw_replication
from sampling.serializers import CISerializer

from ._common import SamplingCommand, add_design_arguments, build_scheme, read_population, setting_defaults
from .bounds import kinds_for


class Command(SamplingCommand):
    help = (
        "Draw one sample (replication 0 of --seed) and invert each tail bound into a two-sided interval "
        "at level 1 - delta. Fixed-size schemes get the na-* and ht-pi-* bounds only. "
        "Output columns: bound,estimate,radius,lower,upper,C."
    )
    serializer_class = CISerializer

    def add_arguments(self, parser):
        add_design_arguments(parser)
        parser.add_argument("--seed", type=int, help="64-bit master seed.")
        parser.add_argument("--delta", type=float, help="Miss probability in (0,1].")
        parser.add_argument("--constant-C", dest="constant_C", type=float, help="Universal constant C (>= 1).")
        parser.add_argument("--algorithm", choices=["auto", "rejection", "sequential"])

    def defaults(self):
        return setting_defaults("seed", "delta", "constant_C")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        spec = build_scheme(data["scheme"], pop, weights, data["n"], data["algorithm"])
        design = resolve_design(spec)
        profile = variance_profile(pop, p=design.p, pi=design.pi)
        draw = draw_replication(spec, data["seed"], 0)
        estimate = ht_total(pop, design.pi, draw)
        rows = []
        for kind in kinds_for(spec.kind):
            if kind.family == "rejective":
                # bounds a different centring (the p-weighted target); not an interval for S_N
                continue
            if kind.family == "poisson" and spec.kind.fixed_size:
                # needs independent inclusions
                continue
            bound_fn = functools.partial(evaluate, kind, profile, C=data["constant_C"])
            lower, upper = confidence_interval(estimate, bound_fn, data["delta"])
            C = "" if kind.constant_free else repr(float(data["constant_C"]))
            rows.append([kind.value, repr(estimate), repr((upper - lower) / 2.0), repr(lower), repr(upper), C])

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["bound", "estimate", "radius", "lower", "upper", "C"])
            writer.writerows(rows)

        self.emit(data["out"], render)
