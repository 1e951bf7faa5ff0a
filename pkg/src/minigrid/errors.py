"""Exception hierarchy shared by every service.

Each error kind named in the service contracts maps to one class here, so the
CLI can render them 1:1 and tests can assert on the exact kind.
"""


class GridError(Exception):
    """Base class for domain errors (CLI exit code 1)."""

    kind = "GridError"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return f"{self.kind}: {self.message}" if self.message else self.kind


def _kind(name, base=GridError, doc=None):
    cls = type(name, (base,), {"kind": name, "__doc__": doc})
    return cls


NotFound = _kind("NotFound")
AlreadyExists = _kind("AlreadyExists")
PermissionDenied = _kind("PermissionDenied")
AuthExpired = _kind("AuthExpired", PermissionDenied, "Token older than its TTL.")
StaleReport = _kind("StaleReport", PermissionDenied, "Report from a CE that no longer owns the job.")
SymlinkLoop = _kind("SymlinkLoop")
Duplicate = _kind("Duplicate")
UnknownSE = _kind("UnknownSE")
UnknownJob = _kind("UnknownJob")
UnknownPackage = _kind("UnknownPackage")
UnknownCommand = _kind("UnknownCommand")
UnknownTarget = _kind("UnknownTarget")
BadSchema = _kind("BadSchema")
NoSuchTag = _kind("NoSuchTag")
TypeMismatch = _kind("TypeMismatch")
NotEmpty = _kind("NotEmpty")
NotADirectory = _kind("NotADirectory")
IllegalTransition = _kind("IllegalTransition")
Terminal = _kind("Terminal")
AlreadyReplicated = _kind("AlreadyReplicated")
InsufficientSpace = _kind("InsufficientSpace")
IntegrityError = _kind("IntegrityError")
VersionConflict = _kind("VersionConflict")
CycleDetected = _kind("CycleDetected")
NotInstalled = _kind("NotInstalled")
EmptyDataset = _kind("EmptyDataset")
NoResults = _kind("NoResults")
NameClash = _kind("NameClash")
ServiceDown = _kind("ServiceDown")
Unreachable = _kind("Unreachable", ServiceDown)
DeliveryRefused = _kind("DeliveryRefused")
InvariantViolation = _kind("InvariantViolation")
ConfigError = _kind("ConfigError")


class ParseError(GridError):
    """Malformed input text; carries a 1-based line/column when known."""

    kind = "ParseError"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.detail = message
        if line is not None:
            message = f"{message} at line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(message)
        self.line = line
        self.column = column


class ScenarioParseError(ParseError):
    kind = "ScenarioParseError"
