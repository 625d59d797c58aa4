"""Exception hierarchy.

Everything the toolkit raises on bad input derives from ``ValidationError``
(itself a ``ValueError``) so callers and the CLI can tell input problems
apart from I/O failures, which surface as ``OSError``.
"""


class ValidationError(ValueError):
    """Input violates a container invariant or an operation precondition."""


class FormatError(ValidationError):
    """A file does not follow the RVOL layout (bad magic, dtype or header)."""


class TruncationError(FormatError):
    """Payload length disagrees with the dims stored in the header."""


class DegenerateInputError(ValidationError):
    """Input is well-formed but carries no information (e.g. all-zero diffs)."""


class DataError(ValidationError):
    """A study or manifest record is missing a required entry."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
