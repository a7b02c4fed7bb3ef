"""Exception hierarchy shared by every ezvc module.

Each class carries a short ``kind`` string that the CLI reports in its
machine-readable error record.
"""

from __future__ import annotations


class EzvcError(Exception):
    kind = "internal"


class FormatError(EzvcError, ValueError):
    """A file does not follow the expected container layout."""

    kind = "format"


class ContractError(EzvcError, ValueError):
    """Arguments violate an operation's preconditions (shapes, dims, lengths)."""

    kind = "contract"


class DomainError(EzvcError, ValueError):
    """Input is well-formed but outside the operation's domain (empty, too short)."""

    kind = "domain"


class DataError(EzvcError, ValueError):
    kind = "data"


class ConfigError(EzvcError, ValueError):
    kind = "config"


class ArtifactMissingError(EzvcError, FileNotFoundError):
    kind = "artifact-missing"
