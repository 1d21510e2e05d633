"""Task-vector merging with 1-bit compressed experts and a learned router."""

from .errors import DeltaForgeError
from .tensor_store import ModelCheckpoint, Tensor, load_checkpoint, save_checkpoint
from .delta import TaskVector, apply, extract
from .onebit import ModulePattern, Position, QuantizedTaskVector, dequantize, quantize
from .merge_engine import MergeRecipe, Method, dare_merge, onebit_merge, task_arithmetic, ties_merge

__version__ = "0.1.0"

__all__ = [
    "DeltaForgeError", "ModelCheckpoint", "Tensor", "load_checkpoint", "save_checkpoint",
    "TaskVector", "apply", "extract", "ModulePattern", "Position", "QuantizedTaskVector",
    "dequantize", "quantize", "MergeRecipe", "Method", "dare_merge", "onebit_merge",
    "task_arithmetic", "ties_merge",
]
