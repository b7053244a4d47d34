"""Shared plumbing for the sampling management commands."""
from __future__ import annotations

import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, TextIO

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from sampling.errors import DesignError
from sampling.poisson_binomial import solve_canonical
from sampling.population import DesignWeights, Population, WeightKind, load_population
from sampling.schemes import SchemeSpec

logger = logging.getLogger(__name__)

FIXTURES_DIR = Path(__file__).resolve().parents[2] / "fixtures"


@dataclass(frozen=True)
class ShippedDesign:
    label: str
    filename: str
    scheme: str
    n: Optional[int]

    @property
    def path(self) -> Path:
        return FIXTURES_DIR / self.filename


SHIPPED_DESIGNS = (
    ShippedDesign("swor_100", "swor_100.csv", "swor", 20),
    ShippedDesign("rejective_6", "rejective_6.csv", "rejective", 3),
    ShippedDesign("rao_sampford_6", "rao_sampford_6.csv", "rao-sampford", 3),
    ShippedDesign("poisson_12", "poisson_12.csv", "poisson", None),
    ShippedDesign("rejective_200", "rejective_200.csv", "rejective", 50),
)


def shipped_design(label: str) -> ShippedDesign:
    for design in SHIPPED_DESIGNS:
        if design.label == label:
            return design
    raise CommandError(
        f"Unknown design '{label}'. Shipped designs: {', '.join(d.label for d in SHIPPED_DESIGNS)}.",
        returncode=2,
    )


def format_errors(errors) -> str:
    parts = []
    for field_name, messages in errors.items():
        if isinstance(messages, dict):
            messages = [format_errors(messages)]
        flag = "--" + field_name.replace("_", "-") if field_name != "non_field_errors" else "arguments"
        parts.append(f"{flag}: {' '.join(str(m) for m in messages)}")
    return "; ".join(parts)


def read_population(path: str):
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            return load_population(fh)
    except OSError as exc:
        raise CommandError(f"Cannot read population file '{path}': {exc.strerror or exc}", returncode=2) from exc


def canonical_from_file(weights, n: int) -> np.ndarray:
    """Canonical p from the `p` column, else solved from the `pi` column."""
    if WeightKind.CANONICAL in weights:
        return weights[WeightKind.CANONICAL].probs
    if WeightKind.FIRST_ORDER in weights:
        solution = solve_canonical(weights[WeightKind.FIRST_ORDER].probs, n)
        if solution.forced:
            raise DesignError(
                f"Units {list(solution.forced)} have pi = 1; drop them and reduce n before rejective sampling."
            )
        return solution.p
    raise DesignError("The population file needs a 'p' or 'pi' column for this scheme.")


def build_scheme(scheme: str, pop: Population, weights, n: Optional[int], algorithm: str = "auto") -> SchemeSpec:
    if scheme == "poisson":
        chosen: Optional[DesignWeights] = weights.get(WeightKind.FIRST_ORDER) or weights.get(WeightKind.CANONICAL)
        if chosen is None:
            raise DesignError("Poisson sampling needs a 'pi' or 'p' column.")
        return SchemeSpec.poisson(chosen.probs, chosen.kind)
    if scheme == "swor":
        return SchemeSpec.swor(pop.size, n)
    if scheme == "rejective":
        return SchemeSpec.rejective(canonical_from_file(weights, n), n, algorithm)
    if WeightKind.FIRST_ORDER not in weights:
        raise DesignError("Rao-Sampford sampling needs a 'pi' column.")
    return SchemeSpec.rao_sampford(weights[WeightKind.FIRST_ORDER].probs, n)


def write_atomic(path: str, text: str) -> None:
    """Temp file in the target directory, then rename over the target."""
    target = Path(path)
    directory = target.parent if str(target.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class SamplingCommand(BaseCommand):
    """Validate flags with `serializer_class`, run, and map domain errors to exit codes."""

    serializer_class = None

    def defaults(self) -> dict:
        return {}

    def validated(self, options) -> dict:
        data = dict(self.defaults())
        data.update({k: v for k, v in options.items() if v is not None})
        serializer = self.serializer_class(data=data)
        if not serializer.is_valid():
            raise CommandError(format_errors(serializer.errors), returncode=2)
        return serializer.validated_data

    def handle(self, *args, **options):
        data = self.validated(options)
        try:
            self.run(data)
        except CommandError:
            raise
        except (ValueError, OSError) as exc:
            raise CommandError(str(exc), returncode=2) from exc
        except Exception:
            logger.exception("%s failed", self.__module__.rsplit(".", 1)[-1])
            raise

    def run(self, data: dict) -> None:
        raise NotImplementedError

    def emit(self, out: Optional[str], render: Callable[[TextIO], None]) -> None:
        """Render fully in memory, then write to --out atomically or to stdout."""
        buffer = io.StringIO()
        render(buffer)
        if out in (None, "", "-"):
            self.stdout.write(buffer.getvalue(), ending="")
        else:
            write_atomic(out, buffer.getvalue())
            logger.info("Wrote %s", out)


def add_design_arguments(parser, scheme_default: str = "rejective") -> None:
    parser.add_argument("--pop", help="Population CSV with column x and optional pi, p.")
    parser.add_argument("--n", type=int, help="Fixed sample size.")
    parser.add_argument("--scheme", choices=["poisson", "rejective", "swor", "rao-sampford"], default=scheme_default)
    parser.add_argument("--out", help="Output file (written atomically); stdout when omitted.")


def setting_defaults(*names: str) -> dict:
    mapping = {
        "seed": ("SAMPLING_MASTER_SEED", 20240101),
        "reps": ("SAMPLING_REPLICATIONS", 100_000),
        "workers": ("SAMPLING_WORKERS", 1),
        "constant_C": ("SAMPLING_CONSTANT_C", 1.0),
    }
    out = {name: getattr(settings, *mapping[name]) for name in names if name in mapping}
    if "delta" in names:
        out["delta"] = round(1.0 - getattr(settings, "SAMPLING_CONFIDENCE_LEVEL", 0.95), 12)
    return out
