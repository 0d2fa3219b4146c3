"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so anything user-facing should raise a
subclass of MdqaError rather than a bare ValueError.
"""

from __future__ import annotations


class MdqaError(Exception):
    """Base class for all package errors."""


class CorpusFormatError(MdqaError):
    """A corpus or QA file violated its declared line format."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DuplicateIdError(CorpusFormatError):
    """Two records in one file share an id."""


class UnknownPassageError(MdqaError):
    """A passage id was not found in the index or passage store."""


class TransportError(MdqaError):
    """A remote call failed after exhausting its retry policy."""


class ProtocolError(MdqaError):
    """A remote service replied with a malformed or contract-violating body."""


class BudgetError(MdqaError):
    """A prompt cannot be made to fit the model's token budget."""


class CompletionParseError(MdqaError):
    """Model output did not contain the structure the template expects."""


class ConfigError(MdqaError):
    """A run configuration is invalid or inconsistent."""


class RetrievalError(MdqaError):
    """A retrieval mode produced no candidates for a subquestion."""


class EvaluationError(MdqaError):
    """Predictions and gold annotations cannot be aligned or scored."""


class StageError(MdqaError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class BootstrapAborted(MdqaError):
    """Example-pool generation hit a hard provider failure; partial pool kept."""

    def __init__(self, message: str, partial_count: int):
        super().__init__(message)
        self.partial_count = partial_count
