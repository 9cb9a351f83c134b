"""Exception types shared across the toolkit.

The CLI maps DataError (and subclasses) to exit code 2 and NumericError to
exit code 3; everything else is an ordinary failure.
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was invoked outside its stated contract."""


class DataError(ValueError):
    """Bad or inconsistent input data (files, labels, corpora)."""


class TooShortError(DataError):
    """A signal or sequence is too short for the requested operation."""


class AudioFormatError(DataError):
    """A WAV container violates the PCM16 mono contract."""


class CheckpointError(DataError):
    """A checkpoint/archive file is malformed or inconsistent."""


class ConfigError(DataError):
    """A configuration file or key is invalid."""


class NumericError(RuntimeError):
    """Training hit a non-finite value and aborted."""
