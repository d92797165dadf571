"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """An artifact or in-memory value violates a structural invariant."""


class ParseError(ValidationError):
    """Input bytes or text cannot be parsed into the expected shape."""


class BackendError(RuntimeError):
    """A teacher or judge backend failed to produce a response."""


class GenerationError(BackendError):
    """Every generation attempt against a backend was exhausted."""


class UsageError(Exception):
    """A command line was well-formed but asked for an impossible combination."""
