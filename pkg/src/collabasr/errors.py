"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3. Everything else is a plain usage error (1).
"""

from __future__ import annotations

__all__ = [
    "BandDisconnectedError",
    "BranchIndexError",
    "ConfigError",
    "DistributionError",
    "EmptyReferenceError",
    "EnumerationBoundError",
    "LengthMismatchError",
    "NonDeterministicLossError",
    "NonFiniteError",
    "NonFiniteLossError",
    "NonMonotoneReferenceError",
    "NonScalarRootError",
    "ShapeMismatchError",
    "TokenRangeError",
]


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteLossError(NonFiniteError):
    """A training loss went NaN/Inf; carries the offending utterance ids."""

    def __init__(self, message: str, utterance_ids: list[str] | None = None):
        super().__init__(message)
        self.utterance_ids = utterance_ids or []


class NonScalarRootError(ValueError):
    """Backpropagation was started from a node that is not a scalar."""


class NonDeterministicLossError(RuntimeError):
    """Two evaluations of the same loss builder disagreed bit-for-bit."""


class TokenRangeError(ValueError):
    """A token or class id lies outside the configured range."""


class LengthMismatchError(ValueError):
    """Two sequences that must align have different lengths."""


class EnumerationBoundError(ValueError):
    """A brute-force enumeration request exceeds the supported size."""


class NonMonotoneReferenceError(ValueError):
    """A reference alignment is not a valid monotone 0..U map."""


class BandDisconnectedError(ValueError):
    """An alignment band leaves no valid path through the lattice."""


class BranchIndexError(IndexError):
    """A branch index does not exist in the model."""


class DistributionError(ValueError):
    """Rows that must be normalized log-probabilities are not."""


class EmptyReferenceError(ValueError):
    """An error-rate computation received no reference tokens."""


class ConfigError(ValueError):
    """A config file is malformed, has unknown keys, or bad values."""
