from __future__ import annotations

import math

from rest_framework import serializers

SCHEME_CHOICES = ["poisson", "rejective", "swor", "rao-sampford"]
REJECTIVE_ALGORITHMS = ["auto", "rejection", "sequential"]
MAX_SEED = 2**64 - 1


class PopulationRowSerializer(serializers.Serializer):
    """One CSV row of a population file."""
    x = serializers.FloatField()
    pi = serializers.FloatField(required=False)
    p = serializers.FloatField(required=False)

    def validate_x(self, value):
        if not math.isfinite(value):
            raise serializers.ValidationError("Value must be finite (NaN/Inf rejected).")
        return value

    def validate_pi(self, value):
        if not (0.0 < value <= 1.0):
            raise serializers.ValidationError("Inclusion probability must lie in (0,1].")
        return value

    def validate_p(self, value):
        if not (0.0 < value < 1.0):
            raise serializers.ValidationError("Canonical p must lie in (0,1).")
        return value


class TGridField(serializers.CharField):
    """`min:max:count`, linearly spaced."""

    def to_internal_value(self, data):
        text = super().to_internal_value(data)
        parts = text.split(":")
        if len(parts) != 3:
            raise serializers.ValidationError("Expected min:max:count.")
        try:
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise serializers.ValidationError("Expected min:max:count with numeric bounds and an integer count.")
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or hi < lo:
            raise serializers.ValidationError("Grid bounds must satisfy 0 <= min <= max.")
        if count < 1 or (count == 1 and hi != lo):
            raise serializers.ValidationError("Grid count must be >= 1 (and min == max when count == 1).")
        return (lo, hi, count)


class BaseCommandSerializer(serializers.Serializer):
    pop = serializers.CharField()
    out = serializers.CharField(required=False, allow_null=True, default=None)
    n = serializers.IntegerField(required=False, allow_null=True, default=None, min_value=1)
    scheme = serializers.ChoiceField(choices=SCHEME_CHOICES, required=False, default="rejective")

    def validate(self, data):
        data = super().validate(data)
        if data.get("scheme") != "poisson" and data.get("n") is None:
            raise serializers.ValidationError({"n": f"--n is required for the {data.get('scheme')} scheme."})
        return data


def _check_constant(value):
    if not math.isfinite(value):
        raise serializers.ValidationError("Constant C must be finite.")
    return value


class InclusionSerializer(serializers.Serializer):
    pop = serializers.CharField()
    out = serializers.CharField(required=False, allow_null=True, default=None)
    n = serializers.IntegerField(min_value=1)
    direction = serializers.ChoiceField(choices=["forward", "inverse"], default="forward")
    second_order = serializers.BooleanField(default=False)


class SampleSerializer(BaseCommandSerializer):
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED)
    reps = serializers.IntegerField(min_value=1)
    algorithm = serializers.ChoiceField(choices=REJECTIVE_ALGORITHMS, default="auto")


class EstimateSerializer(SampleSerializer):
    workers = serializers.IntegerField(min_value=1, default=1)


class BoundsSerializer(BaseCommandSerializer):
    t_grid = TGridField(required=False, allow_null=True, default=None)
    constant_C = serializers.FloatField(min_value=1.0)

    def validate_constant_C(self, value):
        return _check_constant(value)


class CISerializer(BaseCommandSerializer):
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED)
    delta = serializers.FloatField()
    constant_C = serializers.FloatField(min_value=1.0)
    algorithm = serializers.ChoiceField(choices=REJECTIVE_ALGORITHMS, default="auto")

    def validate_delta(self, value):
        if not (0.0 < value <= 1.0):
            raise serializers.ValidationError("delta must lie in (0,1].")
        return value

    def validate_constant_C(self, value):
        return _check_constant(value)


class VerifySerializer(serializers.Serializer):
    pop = serializers.CharField(required=False, allow_null=True, default=None)
    design = serializers.CharField(required=False, allow_null=True, default=None)
    n = serializers.IntegerField(required=False, allow_null=True, default=None, min_value=1)
    scheme = serializers.ChoiceField(choices=SCHEME_CHOICES, required=False, default="rejective")
    algorithm = serializers.ChoiceField(choices=REJECTIVE_ALGORITHMS, default="auto")
    out = serializers.CharField(required=False, allow_null=True, default=None)
    summary = serializers.CharField(required=False, allow_null=True, default=None)
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED)
    reps = serializers.IntegerField(min_value=1)
    t_grid = TGridField(required=False, allow_null=True, default=None)
    delta = serializers.FloatField()
    constant_C = serializers.FloatField(min_value=1.0)
    workers = serializers.IntegerField(min_value=1)
    checks = serializers.ListField(child=serializers.CharField(), required=False, allow_null=True, default=None)

    def validate_delta(self, value):
        if not (0.0 < value < 1.0):
            raise serializers.ValidationError("delta must lie in (0,1).")
        return value

    def validate_constant_C(self, value):
        return _check_constant(value)

    def validate_checks(self, value):
        from .montecarlo import CHECKS

        if value is None:
            return None
        unknown = sorted(set(value) - set(CHECKS))
        if unknown:
            raise serializers.ValidationError(f"Unknown check(s) {', '.join(unknown)}; choose from {', '.join(CHECKS)}.")
        return value

    def validate(self, data):
        data = super().validate(data)
        if data.get("pop") and data.get("design"):
            raise serializers.ValidationError("Give either --pop or --design, not both.")
        if data.get("pop") and data.get("scheme") != "poisson" and data.get("n") is None:
            raise serializers.ValidationError({"n": f"--n is required for the {data.get('scheme')} scheme."})
        return data


class CompareSerializer(serializers.Serializer):
    pop = serializers.CharField()
    out = serializers.CharField(required=False, allow_null=True, default=None)
    plan_out = serializers.CharField(required=False, allow_null=True, default=None)
    n = serializers.IntegerField(min_value=1)
    against = serializers.ChoiceField(choices=["poisson", "rao-sampford"], default="rao-sampford")
    t_grid = TGridField(required=False, allow_null=True, default=None)
