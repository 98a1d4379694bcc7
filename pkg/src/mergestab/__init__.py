"""Model-merging stability lab."""
from .kernels import BACKEND
from .params import MergeCoefficients, merge_linear, read_params, squared_distance, task_vector, write_params

__all__ = [
    "BACKEND",
    "MergeCoefficients",
    "merge_linear",
    "read_params",
    "squared_distance",
    "task_vector",
    "write_params",
]
__version__ = "0.1.0"
