"""
Exception hierarchy for prunetax.

Every error raised on purpose by the package derives from PruneTaxError.
Structured errors also derive from the builtin a caller would expect
(ValueError, KeyError) so plain ``except ValueError`` keeps working.
"""

from __future__ import annotations

from typing import Optional, Sequence


class PruneTaxError(Exception):
    """Base class for all prunetax errors."""


class ShapeMismatchError(PruneTaxError, ValueError):
    """A tensor shape does not match what a layer declares."""

    def __init__(
        self,
        layer: str,
        dimension: str,
        expected: object,
        actual: object,
    ) -> None:
        self.layer = layer
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"layer {layer}: {dimension} mismatch (expected {expected}, got {actual})"
        )


class NonFiniteError(PruneTaxError, ValueError):
    """A NaN or Inf appeared during evaluation."""

    def __init__(self, layer: str, what: str = "output") -> None:
        self.layer = layer
        super().__init__(f"non-finite {what} at layer {layer}")


class MissingDerivativeError(PruneTaxError, ValueError):
    """A saliency or estimator needs a derivative that was never computed."""

    def __init__(self, field: str, hint: str = "") -> None:
        self.field = field
        message = f"missing derivative: {field}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class UnsupportedLayerError(PruneTaxError, ValueError):
    """A layer kind has no implementation for the requested pass."""

    def __init__(self, kind: str, operation: str) -> None:
        self.kind = kind
        super().__init__(f"layer kind '{kind}' is not supported by {operation}")


class DoublePruneError(PruneTaxError, ValueError):
    """A channel was pruned twice."""

    def __init__(self, layer: int, channel: int) -> None:
        self.layer = layer
        self.channel = channel
        super().__init__(f"channel ({layer}, {channel}) is already pruned")


class NoPrunableChannelError(PruneTaxError):
    """Terminal signal: every layer is down to its last channel."""


class DatasetFormatError(PruneTaxError, ValueError):
    """A PRND dataset file is malformed."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class CheckpointFormatError(PruneTaxError, ValueError):
    """A PRNW checkpoint file is malformed."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UnknownSignalError(PruneTaxError, KeyError):
    """A signal id or published name does not exist."""

    def __init__(self, name: str, suggestions: Optional[Sequence[str]] = None) -> None:
        self.name = name
        self.suggestions = list(suggestions or [])
        message = f"unknown signal '{name}'"
        if self.suggestions:
            message += "; did you mean: " + ", ".join(self.suggestions)
        super().__init__(message)

    def __str__(self) -> str:
        # KeyError would repr() the message otherwise
        return self.args[0]


class PruningStepError(PruneTaxError):
    """Wraps an error raised inside a pruning iteration with its step index."""

    def __init__(self, step: int, cause: Exception) -> None:
        self.step = step
        self.cause = cause
        super().__init__(f"pruning step {step} failed: {cause}")
