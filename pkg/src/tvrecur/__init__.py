"""Event-specific covariate effects for recurrent events under a total-variation penalty."""

from .dataset import Dataset, DataFormatError, SubjectRecord, build_design, load_dataset, load_long_csv, write_long_csv
from .results import (
    ConvergenceError,
    EstimationError,
    FitResult,
    KKTReport,
    MonotoneLikelihoodError,
    UnidentifiableStratumError,
)

__all__ = [
    "ConvergenceError",
    "DataFormatError",
    "Dataset",
    "EstimationError",
    "FitResult",
    "KKTReport",
    "MonotoneLikelihoodError",
    "SubjectRecord",
    "UnidentifiableStratumError",
    "build_design",
    "load_dataset",
    "load_long_csv",
    "write_long_csv",
]
