"""Exception hierarchy shared across the package."""


class PilotStreamError(Exception):
    """Base class for every error raised by this package."""


# --- broker ---

class DuplicateTopic(PilotStreamError):
    pass


class InvalidConfig(PilotStreamError):
    pass


class UnknownTopic(PilotStreamError):
    pass


class PartitionOutOfRange(PilotStreamError):
    pass


class PayloadTooLarge(PilotStreamError):
    pass


class OffsetOutOfRange(PilotStreamError):
    pass


class StaleCommit(PilotStreamError):
    """Commit would move a consumer group's offset backwards."""


class OffsetAhead(PilotStreamError):
    """Commit beyond the partition's latest offset."""


# --- pilot ---

class UnknownServiceType(PilotStreamError):
    pass


class SpawnFailure(PilotStreamError):
    pass


class TimedOut(PilotStreamError):
    pass


class NotRunning(PilotStreamError):
    pass


class UnknownFunction(PilotStreamError):
    pass


class ComputeUnitFailed(PilotStreamError):
    """A compute unit finished FAILED; carries the original task error."""


# --- engine ---

class UnknownOperator(PilotStreamError):
    pass


class OperatorError(PilotStreamError):
    """Operator raised while processing; carries the partition id."""

    def __init__(self, partition: int, cause: BaseException):
        super().__init__(f"operator failed on partition {partition}: {cause!r}")
        self.partition = partition
        self.cause = cause


class StreamFailed(PilotStreamError):
    """Batch retries exhausted; the stream stopped in a failed state."""


# --- mass / masa ---

class UnknownScenario(PilotStreamError):
    pass


class MalformedPayload(PilotStreamError):
    pass


class DimensionMismatch(PilotStreamError):
    pass


class EmptyAngles(PilotStreamError):
    pass


class TooFewAngles(PilotStreamError):
    pass


class NonPositiveInitial(PilotStreamError):
    pass


# --- metrics / cli ---

class UnknownComponent(PilotStreamError):
    pass


class ConfigError(PilotStreamError):
    """Experiment config rejected; names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
