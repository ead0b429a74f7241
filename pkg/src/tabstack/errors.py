"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without isinstance ladders.
"""


class TabstackError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    code = "error"


class UsageError(TabstackError):
    """Bad command-line arguments or flag combinations."""

    exit_code = 2
    code = "usage"


class DataError(TabstackError):
    """Unusable input data."""

    exit_code = 3
    code = "data"


class RaggedRowError(DataError):
    """A CSV row has a different cell count than the header."""

    code = "ragged_row"


class DuplicateHeaderError(DataError):
    """Two columns share a name."""

    code = "duplicate_header"


class LabelNotFoundError(DataError):
    """The requested label column is absent."""

    code = "label_not_found"


class MissingLabelValuesError(DataError):
    """The label column contains missing entries."""

    code = "missing_label_values"


class DegenerateProblemError(DataError):
    """The label column has a single distinct value."""

    code = "degenerate_problem"


class SchemaMismatchError(DataError):
    """Apply-time data does not line up with fit-time structure."""

    code = "schema_mismatch"


class FoldCountError(DataError):
    """Fewer rows than folds, or a nonsensical fold count."""

    code = "fold_count"


class UndefinedMetricError(DataError):
    """Metric is undefined for the given predictions/targets."""

    code = "undefined_metric"


class MetricDomainError(DataError):
    """Inputs outside the metric's domain (e.g. negative targets for rmsle)."""

    code = "metric_domain"


class BudgetTooSmallError(TabstackError):
    """Time budget could not accommodate a single model on a single fold."""

    exit_code = 4
    code = "budget_too_small"


class ModelUnavailableError(TabstackError):
    """A learner could not produce any usable model within its allowance.

    Raised inside fold fitting; the orchestrator treats it as a skip signal,
    never as a fatal error.
    """

    exit_code = 4
    code = "model_unavailable"


class CorruptCheckpointError(TabstackError):
    """Persisted run state fails integrity checks."""

    exit_code = 5
    code = "corrupt_checkpoint"
