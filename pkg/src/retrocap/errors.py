"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericCheckError -> 4. Library code raises the most specific subclass.
"""


class RetrocapError(Exception):
    """Base class for all package errors."""


class ConfigError(RetrocapError):
    """Invalid configuration: unknown keys, bad values, shape mismatches."""


class DataError(RetrocapError):
    """Invalid input data: parse failures, malformed files, bad stores."""


class NumericCheckError(RetrocapError):
    """A numeric verification (gradient check, norm check) failed."""


class ParseError(DataError):
    """A record stream could not be parsed.

    Carries the 1-based line number and the offending source name.
    """

    def __init__(self, message: str, *, line: int, source: str = "<stream>"):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line
        self.source = source


class StoreFormatError(DataError):
    """Base class for embedding-store file format violations."""


class StoreMagicError(StoreFormatError):
    """The file does not start with the expected magic bytes."""


class StoreTruncatedError(StoreFormatError):
    """The file ends before the declared payload is complete."""


class StoreInconsistentError(StoreFormatError):
    """Header fields disagree with the payload (dim/count/version/norms)."""
