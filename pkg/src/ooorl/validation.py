"""Input checks shared by the estimators and the orchestration code."""
from __future__ import annotations

import numpy as np


def check_states(states, state_dim: int, dtype=np.float32) -> np.ndarray:
    """Return ``states`` as a finite 2-D array with ``state_dim`` columns.

    A single 1-D state is promoted to a batch of one.
    """
    x = np.asarray(states, dtype=dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != state_dim:
        raise ValueError(f"expected states with {state_dim} features, got shape {np.shape(states)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("states contain non-finite values")
    return x


def check_fraction(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_non_negative_int(value, name: str) -> int:
    if int(value) != value or value < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)
