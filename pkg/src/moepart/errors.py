"""Exception hierarchy.

Every error carries an integer ``exit_code`` so the CLI can map failure
classes onto distinct process exit statuses.
"""

from __future__ import annotations


class MoeError(Exception):
    exit_code = 1


class ShapeError(MoeError, ValueError):
    exit_code = 3


class ConfigError(MoeError, ValueError):
    exit_code = 4


class RoutingError(MoeError, ValueError):
    exit_code = 5


class FormatError(MoeError):
    exit_code = 10


class BadMagicError(FormatError):
    exit_code = 11


class TruncatedError(FormatError):
    exit_code = 12


class SchemaError(FormatError):
    exit_code = 13


class ValidationFailed(MoeError):
    """An internal consistency check (e.g. an equivalence run) did not pass."""

    exit_code = 20
