"""
errors.py
Exception hierarchy shared by every stage of the pipeline.

Two branches matter to callers:
- ConfigError     → the user supplied something invalid (CLI exit code 2)
- NumericalError  → a numerical stage failed or lost its guarantees (CLI exit code 3)

InvalidParameterError is the ConfigError raised by model constructors for
out-of-domain parameters (negative rates, bad lattice offsets, dt ≤ 0).

Module-specific failures subclass one of these so the CLI can map any failure
to an exit code without knowing every module.
"""
from __future__ import annotations


class UniTempoError(Exception):
    pass


class ConfigError(UniTempoError):
    pass


class NumericalError(UniTempoError):
    pass


class InvalidParameterError(ConfigError, ValueError):
    """Out-of-domain model parameter; still a ValueError for library callers."""
