"""Error taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DependencyError -> 3,
NumericalError -> 4. Plain ValueError from an operation (bad shapes, out of
range arguments) is a programming or data error and surfaces as a traceback.
"""


class ConfigError(ValueError):
    """A config value violates one of its documented invariants."""


class DependencyError(RuntimeError):
    """An upstream artifact is missing; the message names the stage to run."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where the pipeline guarantees finite values."""


class FormatError(ValueError):
    """A persisted artifact cannot be parsed; the message includes the offset
    or the size mismatch that triggered the failure."""


class VersionError(FormatError):
    """A persisted artifact has an unsupported format version."""
