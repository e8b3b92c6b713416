from __future__ import annotations

import numbers

from .data import DataError, TimeSeriesDataset, WindowBatch, WindowSample


def check_dataset(X, expected_names: tuple[str, ...] | None = None) -> TimeSeriesDataset:
    """Ensure ``X`` is a dataset and, once fitted, has the same channels."""
    if not isinstance(X, TimeSeriesDataset):
        raise TypeError(f"expected a TimeSeriesDataset, got {type(X).__name__}")
    if expected_names is not None and tuple(X.variable_names) != tuple(expected_names):
        raise DataError(f"dataset variables {X.variable_names} differ from fitted {expected_names}")
    return X


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_windows(windows, L: int, H: int) -> None:
    if isinstance(windows, WindowSample):
        windows = [windows]
    if isinstance(windows, WindowBatch):
        shapes = {(windows.y_hist.shape[1], windows.y_future.shape[1])}
    else:
        shapes = {(len(w.y_hist), len(w.y_future)) for w in windows}
    if shapes and shapes != {(L, H)}:
        raise DataError(f"windows have (L, H) {sorted(shapes)}, model expects ({L}, {H})")
