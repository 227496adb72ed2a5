"""Shared exception types and small input-validation helpers."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np


class SchemaError(ValueError):
    """An input file does not match its declared schema."""


class ParameterError(ValueError):
    """A caller-supplied parameter is outside its contract."""


class ConsistencyError(RuntimeError):
    """Internal tables that must align do not."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


def require_columns(df, columns: Iterable[str], context: str) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{context}: missing required column(s) {missing}")


def check_finite(name: str, *values: float) -> None:
    for v in values:
        if v is None or not math.isfinite(float(v)):
            raise ParameterError(f"{name} must be finite, got {v!r}")


def as_float_array(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains non-finite values")
    return arr
