"""Exception hierarchy shared by the library and the CLI."""


class DocAlignError(Exception):
    """Base class for all errors raised by docalign."""


class DomainError(DocAlignError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(DocAlignError):
    """Invalid or inconsistent configuration."""


class DataError(DocAlignError):
    """Malformed or unreadable input data."""


class NumericError(DocAlignError, ArithmeticError):
    """A loss or embedding became non-finite."""


class CheckpointIntegrityError(DocAlignError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class QueryNotFoundError(DocAlignError, LookupError):
    """A heatmap query word does not occur on the page."""

    def __init__(self, query, available):
        self.query = query
        self.available = sorted(set(available))
        super().__init__(
            f"word {query!r} not found on page; available words: {', '.join(self.available)}"
        )
