import csv
import io
import logging

from sampling.estimators import variance_profile
from sampling.exact import (
    enumerate_plan,
    exact_tail_curve,
    kl_divergence,
    pinsker_bound,
    plan_to_csv,
    tail_transfer_bound,
    tv_distance,
)
from sampling.montecarlo import default_thresholds, grid_from_spec
from sampling.poisson_binomial import first_order_inclusion
from sampling.schemes import SchemeSpec
from sampling.serializers import CompareSerializer

from ._common import SamplingCommand, canonical_from_file, read_population, write_atomic

logger = logging.getLogger(__name__)


class Command(SamplingCommand):
    help = (
        "Compare the exact rejective plan with an approximating plan (Poisson with the same p, or "
        "Rao-Sampford with the same first-order inclusions). Output columns: "
        "t,tail_rejective,tail_other,tail_gap,transfer_bound,l1,kl,pinsker,l1_within_pinsker. "
        "Tails are of the pi-weighted HT total minus S_N; l1 is sum |R - R~| and kl is KL(R || R~)."
    )
    serializer_class = CompareSerializer

    def add_arguments(self, parser):
        parser.add_argument("--pop", help="Population CSV with column p or pi.")
        parser.add_argument("--n", type=int)
        parser.add_argument("--against", choices=["poisson", "rao-sampford"])
        parser.add_argument("--t-grid", dest="t_grid", help="min:max:count, linearly spaced.")
        parser.add_argument("--out", help="Output CSV; stdout when omitted.")
        parser.add_argument("--plan-out", dest="plan_out", help="Also write the rejective plan as mask,probability.")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        n = data["n"]
        p = canonical_from_file(weights, n)
        pi = first_order_inclusion(p, n)
        rejective = SchemeSpec.rejective(p, n)
        other_spec = SchemeSpec.poisson(p) if data["against"] == "poisson" else SchemeSpec.rao_sampford(pi, n)
        plan = enumerate_plan(rejective)
        other = enumerate_plan(other_spec)

        l1 = tv_distance(plan, other)
        kl = kl_divergence(plan, other)
        pinsker = pinsker_bound(kl)
        logger.info("rejective vs %s: l1=%r kl=%r sqrt(2kl)=%r", data["against"], l1, kl, pinsker)

        profile = variance_profile(pop, p=p, pi=pi)
        grid = grid_from_spec(data["t_grid"]) if data["t_grid"] else default_thresholds(profile)
        tail = exact_tail_curve(plan, pop, pi, grid)
        tail_other = exact_tail_curve(other, pop, pi, grid)
        transfer = tail_transfer_bound(tail, tv=l1)

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["t", "tail_rejective", "tail_other", "tail_gap", "transfer_bound",
                             "l1", "kl", "pinsker", "l1_within_pinsker"])
            within = "true" if l1 <= pinsker + 1e-12 else "false"
            for j, t in enumerate(grid):
                writer.writerow([
                    repr(float(t)), repr(float(tail[j])), repr(float(tail_other[j])),
                    repr(float(abs(tail[j] - tail_other[j]))), repr(float(transfer[j])),
                    repr(l1), repr(kl), repr(pinsker), within,
                ])

        if data["plan_out"]:
            buffer = io.StringIO()
            plan_to_csv(plan, buffer)
            write_atomic(data["plan_out"], buffer.getvalue())
        self.emit(data["out"], render)
