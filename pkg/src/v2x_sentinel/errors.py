"""Exception hierarchy shared by every module of the package."""


class V2XError(Exception):
    """Base class for all package errors."""


class InvariantViolation(V2XError):
    pass


class MalformedMessage(V2XError):
    pass


class KeysPurged(V2XError):
    pass


class MalformedTopology(V2XError):
    pass


class OutOfRange(V2XError):
    pass


class NonPositiveDefinite(V2XError):
    pass


class SingularInnovation(V2XError):
    pass


class UnknownSignalGroup(V2XError):
    pass


class InsufficientData(V2XError):
    pass


class UnmappedAnomaly(V2XError):
    pass


class SchemaMismatch(V2XError):
    pass


class FixtureError(V2XError):
    """Fixture validation failure; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}:"
        super().__init__(f"{loc} {message}" if loc else message)
