"""
Exception hierarchy
===================

Every error raised on purpose by the library derives from TensorRegError, and
also from the builtin exception a caller would naturally catch (ValueError for
bad inputs, LinAlgError for singular systems, OSError for file problems).
"""

import numpy as np


class TensorRegError(Exception):
    """Base class for all library errors."""


class TensorShapeError(TensorRegError, ValueError):
    """Mode sizes, mode indices or partitions do not fit together."""


class RankError(TensorRegError, ValueError):
    """A rank vector is invalid for its format."""


class SingularSystemError(TensorRegError, np.linalg.LinAlgError):
    """A normal-equation matrix could not be inverted.

    Args:
        block: Name of the parameter block whose system failed (e.g. "M_2").
        message: Human readable detail.
    """

    def __init__(self, block, message=""):
        self.block = block
        text = f"singular system in block {block}"
        if message:
            text = f"{text}: {message}"
        super().__init__(text)


class DegenerateScaleError(TensorRegError, ValueError):
    """A scale matrix or variance is not usable (non-PD, zero pivot, σ²=0)."""


class BudgetExceededError(TensorRegError, MemoryError):
    """A dense object would exceed its configured element budget."""


class TensorFileError(TensorRegError, OSError):
    """A tensor, table or manifest file could not be read or written."""


class ConfigError(TensorRegError, ValueError):
    """An experiment config failed schema validation."""


class ModelSelectionError(TensorRegError, RuntimeError):
    """No candidate of a rank search could be fitted."""
