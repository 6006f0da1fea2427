"""Exceptions raised by embed_forensics."""


class ValidationError(ValueError):
    """
    Bad user input.

    Parameters
    ----------
    message : str
        What went wrong.
    row : int, optional
        1-based record number in the offending file or matrix.
    sample_id : str, optional
        Id of the offending sample, when known.
    """

    def __init__(self, message, *, row=None, sample_id=None):
        self.row = row
        self.sample_id = sample_id
        context = []
        if row is not None:
            context.append(f"row {row}")
        if sample_id is not None:
            context.append(f"id {sample_id!r}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class MalformedRecordError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    """Input has no variation where variation is required."""


class ServiceError(RuntimeError):
    """The embedding service failed after all retries."""
