"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def check_vector(x, name: str = "x", length: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={x.ndim}")
    if length is not None and x.shape[0] != length:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {length}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_event_vector(event, length: int) -> np.ndarray:
    """Coerce event indicators to a boolean array of the given length."""
    event = np.asarray(event)
    if event.ndim != 1 or event.shape[0] != length:
        raise ValueError(f"event must be 1-D of length {length}")
    if event.dtype != bool:
        values = np.unique(event)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError("event entries must be boolean or 0/1")
        event = event.astype(bool)
    return event


def check_survival_data(X, time, event) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Validate a (covariates, times, events) triple jointly."""
    X = check_matrix(X)
    time = check_vector(time, "time", length=X.shape[0])
    event = check_event_vector(event, X.shape[0])
    if not event.any():
        raise ValueError("no events in the data; partial likelihood undefined")
    return X, time, event
