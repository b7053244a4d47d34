import csv
import logging

from sampling.errors import DesignError
from sampling.poisson_binomial import hajek_residuals, rejective_inclusions, solve_canonical
from sampling.population import WeightKind
from sampling.serializers import InclusionSerializer

from ._common import SamplingCommand, read_population

logger = logging.getLogger(__name__)


class Command(SamplingCommand):
    help = (
        "Map canonical p to rejective first-order inclusions (forward) or back (inverse). "
        "Output columns: unit,p,pi then pi_0..pi_{N-1} with --second-order."
    )
    serializer_class = InclusionSerializer

    def add_arguments(self, parser):
        parser.add_argument("--pop", help="Population CSV; forward reads column p, inverse reads column pi.")
        parser.add_argument("--n", type=int, help="Sample size.")
        parser.add_argument("--direction", choices=["forward", "inverse"])
        parser.add_argument("--second-order", action="store_true", default=None)
        parser.add_argument("--out", help="Output CSV; stdout when omitted.")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        n = data["n"]
        if data["direction"] == "forward":
            if WeightKind.CANONICAL not in weights:
                raise DesignError("Forward direction needs a 'p' column.")
            p = weights[WeightKind.CANONICAL].probs
            inclusions = rejective_inclusions(p, n, second_order=bool(data["second_order"]))
            pi, forced = inclusions.first_order, ()
        else:
            if WeightKind.FIRST_ORDER not in weights:
                raise DesignError("Inverse direction needs a 'pi' column.")
            pi = weights[WeightKind.FIRST_ORDER].probs
            solution = solve_canonical(pi, n)
            p, forced = solution.p, solution.forced
            inclusions = None
            logger.info("Canonical solver converged in %d iterations (residual %.3e).",
                        solution.iterations, solution.residual)

        second = None
        if data["second_order"]:
            if forced:
                raise DesignError("Second-order inclusions need pi < 1 for every unit.")
            if inclusions is None:
                inclusions = rejective_inclusions(p, n)
            second = inclusions.second_order
        if not forced:
            diag = hajek_residuals(p, pi, n)
            logger.info("d_N=%.6g d*_N=%.6g max|rel1|*d*=%.3g max|rel2|*d=%.3g bias bound holds=%s",
                        diag.d_N, diag.d_star, diag.rel1_scaled_max, diag.rel2_scaled_max, diag.bias_bound_holds)

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            header = ["unit", "p", "pi"]
            if second is not None:
                header += [f"pi_{j}" for j in range(pop.size)]
            writer.writerow(header)
            for i in range(pop.size):
                row = [i, repr(float(p[i])), repr(float(pi[i]))]
                if second is not None:
                    row += [repr(float(v)) for v in second[i]]
                writer.writerow(row)

        self.emit(data["out"], render)
