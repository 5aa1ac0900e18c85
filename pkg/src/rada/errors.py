"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RadaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RadaError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(RadaError):
    """A configuration value is out of its legal range or unknown."""


class ContractError(RadaError):
    """An input violates a documented precondition (e.g. unnormalized rows)."""


class DegenerateInputError(RadaError):
    """Numerically degenerate input such as a zero row or an empty batch."""


class SizeError(RadaError):
    """A requested size exceeds the supported limit."""


class OracleError(RadaError):
    """A verification oracle could not be evaluated (non-finite objective)."""


class TrainingDivergedError(RadaError):
    """Training hit a non-finite loss; carries the step index and loss parts."""

    def __init__(self, step: int, parts: dict[str, float]):
        self.step = step
        self.parts = dict(parts)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.parts.items())
        super().__init__(f"non-finite loss at step {step} ({detail})")


class FormatError(RadaError):
    """Base class for binary/text file format errors."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this build cannot read."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload is complete."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the file contents."""
