"""Error taxonomy for the report tool."""

from __future__ import annotations


class ReportError(Exception):
    """Base class for every failure this package raises deliberately."""


class SchemaError(ReportError):
    """An input file does not match the documented schema.

    The message always names the offending column or field so a bad file
    can be traced without opening it.
    """


class EmptyInputError(ReportError):
    """The input directory holds no per-run metrics CSVs."""
