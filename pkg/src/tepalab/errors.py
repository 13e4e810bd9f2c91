"""Exception hierarchy. Each class carries the machine-readable category the CLI prints."""


class TepaError(Exception):
    category = "error"


class ConfigError(TepaError, ValueError):
    category = "config"


class ContractError(TepaError, ValueError):
    category = "contract"


class ShapeError(ContractError):
    """Input shape does not match what a layer declared."""

    category = "shape"


class DegenerateBatchError(ContractError):
    category = "degenerate-batch"


class UnsupportedOperationError(TepaError, TypeError):
    category = "unsupported"


class VersionError(TepaError):
    category = "version"


class DependencyError(TepaError):
    """A required artifact (checkpoint, poisoned-sample cache) is missing."""

    category = "dependency"


class InvariantError(TepaError, AssertionError):
    category = "assertion"


class CodecError(TepaError, RuntimeError):
    """The image codec failed to encode or decode."""

    category = "codec"


class ReportIOError(TepaError, OSError):
    category = "io"
