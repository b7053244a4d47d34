import csv
import logging
import math

from sampling.montecarlo import resolve_design, simulate
from sampling.serializers import EstimateSerializer

from ._common import SamplingCommand, add_design_arguments, build_scheme, read_population, setting_defaults

logger = logging.getLogger(__name__)


class Command(SamplingCommand):
    help = (
        "Horvitz-Thompson totals over replicated draws. Output columns: replication,size,ht_pi,ht_p "
        "(ht_p weights by canonical p and equals ht_pi when the two coincide)."
    )
    serializer_class = EstimateSerializer

    def add_arguments(self, parser):
        add_design_arguments(parser)
        parser.add_argument("--seed", type=int, help="64-bit master seed.")
        parser.add_argument("--reps", type=int, help="Number of replications.")
        parser.add_argument("--algorithm", choices=["auto", "rejection", "sequential"])
        parser.add_argument("--workers", type=int, help="Worker processes for the replications.")

    def defaults(self):
        return setting_defaults("seed", "reps", "workers")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        spec = build_scheme(data["scheme"], pop, weights, data["n"], data["algorithm"])
        design = resolve_design(spec)
        sim = simulate(spec, pop, design, data["seed"], data["reps"], workers=data["workers"])
        mean = math.fsum(sim.ht_pi.tolist()) / sim.replications
        logger.info("S_N=%r mean HT=%r over %d replications", pop.total(), mean, sim.replications)

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["replication", "size", "ht_pi", "ht_p"])
            ht_p = sim.ht_p
            for r in range(sim.replications):
                writer.writerow([r, int(sim.sizes[r]), repr(float(sim.ht_pi[r])), repr(float(ht_p[r]))])

        self.emit(data["out"], render)
