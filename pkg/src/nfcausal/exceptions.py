"""Exception hierarchy.

Data-shaped problems (bad files, bad schemas, impossible requests) derive from
:class:`DataError`; problems that arise while computing (singular systems,
failed fits, degenerate designs) derive from :class:`NumericalError`.  The CLI
maps the former to exit code 2 and the latter to exit code 3.
"""


class NfcausalError(Exception):
    """Base class for all package errors."""


class DataError(NfcausalError):
    """Invalid input data or an invalid request against the data."""


class SchemaError(DataError):
    """A column named in the schema is missing or the schema is malformed."""


class IngestionError(DataError):
    """A cell failed to parse or is non-finite; message names row and column."""


class DomainError(DataError):
    """A value lies outside its declared domain (e.g. treatment label > J)."""


class SizeError(DataError):
    """A size precondition is violated (too few rows, K out of range, ...)."""


class ContractError(DataError):
    """Two objects that must share structure (sample, grid, ...) do not."""


class MetricUndefinedError(DataError):
    """The requested distance metric is undefined for this input.

    Raised for the pseudo-max distance when fewer than three units exist;
    the message points at the Euclidean metric as the fallback.
    """


class NumericalError(NfcausalError):
    """A numerical procedure failed."""


class EstimationError(NumericalError):
    """A local fit or a final estimate could not be produced."""


class HighRankDegeneracyError(NumericalError):
    """The stacked residual Gram matrix in the high-rank step is singular."""


class TuningError(NumericalError):
    """No usable candidate survived tuning."""
