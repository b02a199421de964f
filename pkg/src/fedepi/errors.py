"""Exception types shared across the package.

Contract violations (bad arguments, shape mismatches) raise plain
ValueError; the classes below cover failures that callers are expected
to handle or map to exit codes.
"""


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class DataError(Exception):
    """Input data outside the declared format or ranges (exit code 3)."""


class ParseError(DataError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DivergenceError(Exception):
    """Training produced a non-finite loss or parameters (exit code 4)."""
