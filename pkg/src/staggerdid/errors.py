"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 1,
data validation problems with 2 and estimation failures with 3.
"""


class StaggerError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(StaggerError):
    exit_code = 1


class DataError(StaggerError):
    exit_code = 2


class SchemaError(DataError):
    """A required column is missing from an input file."""

    def __init__(self, column, path=None):
        self.column = column
        where = f" in {path}" if path else ""
        super().__init__(f"missing required column '{column}'{where}")


class ParseError(DataError):
    """A cell could not be parsed as a number."""

    def __init__(self, column, row, value):
        self.column = column
        self.row = row
        super().__init__(
            f"row {row}: column '{column}' has non-numeric value {value!r}"
        )


class PanelValidationError(DataError):
    """The panel violates a structural invariant (e.g. it is not balanced)."""

    def __init__(self, message, person=None, year=None):
        self.person = person
        self.year = year
        super().__init__(message)


class DomainError(DataError):
    """A lookup fell outside the domain of an index (e.g. wage index year)."""


class EstimationError(StaggerError):
    exit_code = 3


class InputError(DataError):
    """Malformed in-memory input, such as a duplicated cohort-year cell."""
