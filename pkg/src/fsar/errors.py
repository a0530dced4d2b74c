"""Exception types shared across the package.

Everything user-facing derives from FsarError so the CLI can catch one base
class and emit a machine-readable error line.
"""


class FsarError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(FsarError, ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContainerError(FsarError, ValueError):
    """A tensor container file is malformed or inconsistent."""


class GraphError(FsarError, RuntimeError):
    """Invalid use of the autodiff graph (e.g. backward on a non-scalar)."""


class NonFiniteError(FsarError, FloatingPointError):
    """Checked mode found NaN/Inf in the result of a primitive op."""


class ConfigError(FsarError, ValueError):
    """A configuration value is out of contract."""


class ManifestError(FsarError, ValueError):
    """A dataset manifest or one of its tensor blobs failed validation."""


class SamplingError(FsarError, ValueError):
    """An episode cannot be sampled from the given feature set."""


class ContractError(FsarError, ValueError):
    """A call violated an operation's precondition."""


class DivergenceError(FsarError, RuntimeError):
    """Training produced a non-finite loss."""
