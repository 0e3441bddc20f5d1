from __future__ import annotations


class AttrsvError(Exception):
    """Base for every error the toolkit reports to the user."""

    exit_code = 1


class ConfigError(AttrsvError):
    exit_code = 2


class DataError(AttrsvError):
    exit_code = 3


class NumericError(AttrsvError):
    exit_code = 4
