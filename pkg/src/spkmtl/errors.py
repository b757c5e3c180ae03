"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: SchemaError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class SpkMtlError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(SpkMtlError):
    """Config file violates the schema. Carries all violations, not just
    the first one."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(SpkMtlError):
    """Malformed or inconsistent input data (manifests, features, labels,
    timelines, trials)."""


class NumericsError(SpkMtlError):
    """Numerical failure: divergence, non-finite values where finite ones
    are required."""
