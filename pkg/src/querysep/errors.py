"""Exception types shared across the package.

Plain ``ValueError`` is used for domain errors (bad arguments, shape
mismatches); the classes here cover the remaining CLI-visible failure
categories so the entry point can map them to distinct exit codes.
"""


class ConfigurationError(Exception):
    """Invalid or inconsistent configuration (bad profile, version mismatch)."""


class CheckpointError(OSError):
    """Checkpoint file is missing, truncated, or structurally corrupt."""


class DivergenceError(Exception):
    """Training produced a non-finite loss and was aborted."""


class SkipExample(Exception):
    """Signal that an on-the-fly training example should be resampled."""
