"""Shared exception types and the CLI exit-code contract."""


class FedmatchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FedmatchError):
    """Invalid or malformed run configuration."""


class DegenerateInstanceError(FedmatchError):
    """A sampled instance is unusable (e.g. a client selected zero atoms)."""


class ShapeMismatchError(FedmatchError):
    """Incompatible array dimensions between inputs."""


class InternalInvariantError(FedmatchError):
    """A data-structure invariant was violated; indicates a bug."""


class DuplicateClientError(InternalInvariantError):
    """A client tried to contribute twice to the same atom."""


class UnknownClientError(InternalInvariantError):
    """Removal requested for a client that never contributed."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3
EXIT_SHAPE = 4
EXIT_INVARIANT = 5
