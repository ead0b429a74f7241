"""Time-budgeted stacked-ensemble AutoML for tabular CSV data."""

__version__ = "0.1.0"

from .errors import TabstackError
from .metrics import build_report, default_metric, get_metric, loss, score
from .orchestrator import (
    PredictionResult,
    PredictorBundle,
    StackPlan,
    fit,
    load_bundle,
    resume,
)
from .schema import TabularDataset, infer_problem_type, load_csv

__all__ = [
    "__version__",
    "TabstackError",
    "TabularDataset",
    "StackPlan",
    "PredictorBundle",
    "PredictionResult",
    "fit",
    "resume",
    "load_bundle",
    "load_csv",
    "infer_problem_type",
    "score",
    "loss",
    "get_metric",
    "default_metric",
    "build_report",
]
