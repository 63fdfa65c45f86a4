"""Exception hierarchy. The CLI maps each class to a process exit code."""


class AmbertError(Exception):
    exit_code = 1


class UsageError(AmbertError):
    """Bad flags, bad config keys, incompatible request."""

    exit_code = 1


class DataError(AmbertError):
    """Malformed input files, out-of-range ids, incompatible checkpoints."""

    exit_code = 2


class NumericError(AmbertError):
    """Non-finite loss or gradient."""

    exit_code = 3


class ModeError(DataError):
    """Operation the checkpoint's architecture cannot support (e.g. single-stream hybrid)."""
