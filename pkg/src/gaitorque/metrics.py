"""Trajectory accuracy metrics."""

from __future__ import annotations

import numpy as np


class MetricError(Exception):
    pass


class LengthMismatch(MetricError):
    pass


class ConstantTarget(MetricError):
    pass


def r_squared(y, y_pred) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot.

    Always <= 1; equals 1 exactly when the prediction matches elementwise.
    Raises ConstantTarget when y has zero variance (the ratio is undefined).
    """
    y = np.asarray(y, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y.shape != y_pred.shape or y.shape[0] < 2:
        raise LengthMismatch(f"need two equal-length series of >= 2, got {y.shape} and {y_pred.shape}")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ConstantTarget("target series is constant")
    ss_res = float(((y - y_pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def rmse(y, y_pred) -> float:
    """Root-mean-square error, in the units of the inputs."""
    y = np.asarray(y, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y.shape != y_pred.shape or y.shape[0] < 1:
        raise LengthMismatch(f"need two equal-length non-empty series, got {y.shape} and {y_pred.shape}")
    return float(np.sqrt(((y - y_pred) ** 2).mean()))
