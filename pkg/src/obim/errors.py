"""Exception taxonomy for the toolkit.

Every error carries a stable machine-readable ``code`` so scripts (and the
CLI) can dispatch on failure kind without parsing messages. ``path`` points
at the offending configuration field when the error comes out of config
validation.
"""
from __future__ import annotations


class ObimError(Exception):
    code = "error"

    def __init__(self, message: str, *, path: str | None = None):
        super().__init__(message)
        self.path = path

    def __str__(self) -> str:
        base = super().__str__()
        return f"{base} (at {self.path})" if self.path else base


# Container / checkpoint format
class MalformedHeaderError(ObimError):
    code = "malformed_header"


class OffsetError(ObimError):
    code = "bad_offsets"


class UnsupportedDtypeError(ObimError):
    code = "unsupported_dtype"


class NonFiniteError(ObimError):
    code = "non_finite"


class EmptyMapError(ObimError):
    code = "empty_map"


# Cross-checkpoint compatibility
class MissingTensorError(ObimError):
    code = "missing_tensor"


class ShapeMismatchError(ObimError):
    code = "shape_mismatch"


class FingerprintMismatchError(ObimError):
    code = "fingerprint_mismatch"


# Merging
class MaskOverlapError(ObimError):
    code = "mask_overlap"


class RatioSumError(ObimError):
    code = "ratio_sum"


class MissingStatsError(ObimError):
    code = "missing_stats"


class UnavailableMethodError(ObimError):
    code = "unavailable_method"


# Benchmark / fitting
class DivergenceError(ObimError):
    code = "divergence"


class RankDeficientError(ObimError):
    code = "rank_deficient"


# CLI configuration
class ConfigError(ObimError):
    code = "config"
