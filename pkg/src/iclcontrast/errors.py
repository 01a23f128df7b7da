"""Exception hierarchy shared across the toolkit.

Validation failures derive from ``ValidationError`` (CLI exit code 1);
runtime and transport failures derive from ``RuntimeFailure`` (exit code 2).
"""


class IclContrastError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(IclContrastError, ValueError):
    pass


class RuntimeFailure(IclContrastError, RuntimeError):
    pass


class ShapeError(ValidationError):
    pass


class NumericError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class UnsupportedGradientError(ValidationError):
    pass


class RankError(ValidationError):
    pass


class DegenerateLabelError(ValidationError):
    pass


class DegenerateVarianceError(ValidationError):
    pass


class SelectionError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class CorruptionError(ValidationError):
    pass


class ExperimentError(RuntimeFailure):
    pass


class GenerationError(RuntimeFailure):
    pass


class ClientError(RuntimeFailure):
    pass


class TransportError(ClientError):
    pass


class RequestError(ClientError):
    def __init__(self, status: int, excerpt: str):
        super().__init__(f"HTTP {status}: {excerpt}")
        self.status = status
        self.excerpt = excerpt


class ProtocolError(ClientError):
    pass
