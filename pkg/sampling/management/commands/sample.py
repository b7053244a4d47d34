import csv

from sampling.schemes import sampler_for
from sampling.serializers import SampleSerializer

from ._common import SamplingCommand, add_design_arguments, build_scheme, read_population, setting_defaults


class Command(SamplingCommand):
    help = (
        "Draw replicated samples. Output columns: replication,seed_trace,rounds,size,units "
        "(units are 0-based indices separated by spaces)."
    )
    serializer_class = SampleSerializer

    def add_arguments(self, parser):
        add_design_arguments(parser)
        parser.add_argument("--seed", type=int, help="64-bit master seed.")
        parser.add_argument("--reps", type=int, help="Number of replications.")
        parser.add_argument("--algorithm", choices=["auto", "rejection", "sequential"])

    def defaults(self):
        return setting_defaults("seed", "reps")

    def run(self, data):
        pop, weights = read_population(data["pop"])
        spec = build_scheme(data["scheme"], pop, weights, data["n"], data["algorithm"])
        draw = sampler_for(spec)
        draws = [draw(data["seed"], r) for r in range(data["reps"])]

        def render(stream):
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["replication", "seed_trace", "rounds", "size", "units"])
            for r, d in enumerate(draws):
                writer.writerow([r, d.seed_trace, d.rounds, d.sample_size, " ".join(str(i) for i in d.selected)])

        self.emit(data["out"], render)
