"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class UsageError(ValueError):
    """Bad invocation: missing columns, unknown options, invalid config."""


class DataError(ValueError):
    """Input data violates a contract (malformed file, wrong shape, degenerate)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (non-finite loss, non-convergence)."""


class CheckpointError(DataError):
    """Checkpoint or scenario file is corrupt, truncated, or wrong version."""
