"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the categories below rather than raising bare ValueErrors.
"""


class ShapeError(ValueError):
    """Tensor shapes or axes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Autodiff contract violation (non-scalar loss, missing gradient, ...)."""


class TapeConsumedError(GraphError):
    """backward() was called twice on the same recorded forward pass."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values.  CLI exit code 2."""


class DataError(ValueError):
    """Malformed or inconsistent input data.  CLI exit code 3."""


class BoundaryError(DataError):
    """An operation needs events outside the available series range."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is corrupt, truncated, or from an unknown version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.  CLI exit code 4."""
