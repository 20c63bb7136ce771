"""Exception hierarchy shared by every momlm component."""

from __future__ import annotations


class MomError(Exception):
    """Base class of all errors raised by momlm."""


class DimensionError(MomError, ValueError):
    """Operand shapes or widths do not line up."""


class ContractError(MomError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(MomError, ValueError):
    """A configuration value, key or combination is invalid."""


class ParseError(ConfigurationError):
    """A configuration string could not be parsed.

    The message points at the offending column with a caret.
    """

    def __init__(self, message: str, text: str, position: int) -> None:
        self.text = text
        self.position = position
        caret = " " * position + "^"
        super().__init__(f"{message} at position {position}\n  {text}\n  {caret}")


class TrainingError(MomError, RuntimeError):
    """Training cannot continue, e.g. non-finite gradients."""


class CheckpointError(MomError, OSError):
    """A checkpoint file is malformed or does not match the model."""


class CorpusError(MomError, OSError):
    """A corpus file is missing, unreadable or empty."""
