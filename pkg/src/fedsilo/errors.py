"""Exception hierarchy shared by every fedsilo module."""


class FedsiloError(Exception):
    """Base class for all fedsilo errors."""


# tensor core / wire codecs
class NameNotFound(FedsiloError, KeyError):
    pass


class CodecError(FedsiloError, ValueError):
    pass


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class CorruptPayload(CodecError):
    pass


class Truncated(CodecError):
    pass


class MalformedHeader(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


# adapters
class TargetNotFound(FedsiloError, KeyError):
    pass


class TargetNotMatrix(FedsiloError, ValueError):
    pass


class ShapeMismatch(FedsiloError, ValueError):
    pass


class NameConventionViolation(FedsiloError, ValueError):
    pass


# trainer
class LabelOutOfRange(FedsiloError, ValueError):
    pass


class NonFiniteGradient(FedsiloError, FloatingPointError):
    pass


class EmptyShard(FedsiloError, ValueError):
    pass


class EmptyDataset(FedsiloError, ValueError):
    pass


# partitioner
class NonPositiveAlpha(FedsiloError, ValueError):
    pass


class TooFewSamples(FedsiloError, ValueError):
    pass


class EmptyLabels(FedsiloError, ValueError):
    pass


class PlanLabelMismatch(FedsiloError, ValueError):
    pass


# aggregator
class AggregationError(FedsiloError):
    pass


class EmptyUpdateSet(AggregationError, ValueError):
    pass


class SignatureMismatch(AggregationError, ValueError):
    pass


class RoundMismatch(AggregationError, ValueError):
    pass


class DuplicateUpdate(AggregationError, ValueError):
    pass


class UnknownClient(AggregationError, KeyError):
    pass


# communicator
class StoreUnavailable(FedsiloError, OSError):
    pass


class ObjectMissing(FedsiloError, KeyError):
    pass


class IntegrityFailure(FedsiloError, ValueError):
    pass


class TransportError(FedsiloError):
    pass


class EndpointUnknown(TransportError, KeyError):
    pass


class EndpointUnreachable(TransportError, ConnectionError):
    pass


class DispatchTimeout(TransportError, TimeoutError):
    pass


class DuplicateTask(TransportError, ValueError):
    pass


# federation
class DuplicateMember(FedsiloError, ValueError):
    pass


class NotAMember(FedsiloError, PermissionError):
    pass


class DuplicateName(FedsiloError, ValueError):
    pass


class SourceUnreadable(FedsiloError, OSError):
    pass


class SchemaMismatch(FedsiloError, ValueError):
    pass


# taskdata
class MissingField(FedsiloError, KeyError):
    pass


class UnknownDatasetKind(FedsiloError, KeyError):
    pass


class BadGeneratorParams(FedsiloError, ValueError):
    pass


# orchestrator
class ConfigError(FedsiloError, ValueError):
    pass


class RoundTimeout(FedsiloError, TimeoutError):
    def __init__(self, round_index, missing):
        self.round = round_index
        self.missing = sorted(missing)
        super().__init__(f"round {round_index} timed out waiting for {', '.join(self.missing)}")


class RunAborted(FedsiloError):
    """Raised when a federated run stops early; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
