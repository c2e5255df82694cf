"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SphereSegError(Exception):
    exit_code = 1


class PropertyFailure(SphereSegError):
    """An invariant or acceptance check did not hold."""

    exit_code = 1


class ConfigurationError(SphereSegError):
    exit_code = 2


class PreconditionError(ConfigurationError, ValueError):
    """Bad argument to an operation (out-of-range angle, wrong aspect, ...)."""


class ConstructionError(SphereSegError):
    exit_code = 2


class DataError(SphereSegError, ValueError):
    exit_code = 3
