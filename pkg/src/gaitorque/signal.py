"""Deterministic signal prep: resample, differentiate, low-pass, normalize.

Turns a raw :class:`~gaitorque.data.TrialRecord` into a
:class:`~gaitorque.data.ProcessedTrial`: every channel is linearly resampled
onto the 200-sample cycle grid, angle derivatives are per-sample forward
differences, the six kinematic series are low-pass filtered at the effective
post-resampling rate, and the ankle torque is divided by body mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt, lfilter, lfilter_zi

from .data import (
    ANGLE_CHANNELS,
    CYCLE_SAMPLES,
    FEATURE_COLUMNS,
    TARGET_CHANNEL,
    Dataset,
    ProcessedTrial,
    SubjectMeta,
    TrialRecord,
    validate_dataset,
)


class SignalError(Exception):
    pass


class TooShort(SignalError):
    pass


class CutoffAboveNyquist(SignalError):
    pass


class NonPositiveMass(SignalError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    """Low-pass filter parameters.

    ``order`` is the order of a single pass; with ``zero_phase`` the filter
    runs forward then backward, squaring the magnitude response and removing
    phase lag.
    """

    cutoff: float = 6.0
    order: int = 2
    zero_phase: bool = True


def resample_cycle(series: np.ndarray, n: int = CYCLE_SAMPLES) -> np.ndarray:
    """Linearly interpolate ``series`` onto ``n`` points spanning its index range.

    Endpoints are preserved exactly; monotone inputs stay monotone and no
    value leaves the input's [min, max] range.
    """
    series = np.asarray(series, dtype=float)
    m = series.shape[0]
    if m < 2:
        raise TooShort(f"resampling needs >= 2 samples, got {m}")
    if m == n:
        return series.copy()
    grid = np.linspace(0.0, m - 1.0, n)
    out = np.interp(grid, np.arange(m, dtype=float), series)
    out[0] = series[0]
    out[-1] = series[-1]
    return out


def first_difference(series: np.ndarray) -> np.ndarray:
    """Per-sample forward difference, last value repeated to keep length.

    out[i] = series[i+1] - series[i]; units are per-sample (no dt scaling),
    so walking speed modulates the amplitude of derivative features.
    """
    series = np.asarray(series, dtype=float)
    n = series.shape[0]
    if n < 2:
        raise TooShort(f"difference needs >= 2 samples, got {n}")
    out = np.empty(n)
    out[:-1] = series[1:] - series[:-1]
    out[-1] = out[-2]
    return out


def butterworth_lowpass(series: np.ndarray, spec: FilterSpec, fs: float) -> np.ndarray:
    """Bilinear-transform Butterworth low-pass at sampling rate ``fs``.

    Zero-phase mode filters forward-then-backward and backward-then-forward
    with odd-reflection edge padding of length 3*order (so the series must
    be longer than that) and averages the two; the averaging leaves the
    squared-magnitude response untouched but makes the output independent of
    time direction, so residual edge transients cannot skew a symmetric
    cycle.  Single-pass mode seeds the filter state for a step-free start,
    keeping unity DC gain exact on constant inputs.
    """
    series = np.asarray(series, dtype=float)
    if spec.cutoff >= fs / 2.0:
        raise CutoffAboveNyquist(f"cutoff {spec.cutoff} Hz >= Nyquist {fs / 2.0} Hz")
    padlen = 3 * spec.order
    if series.shape[0] <= padlen:
        raise TooShort(f"need > {padlen} samples for order {spec.order}, got {series.shape[0]}")
    b, a = butter(spec.order, spec.cutoff / (fs / 2.0), btype="low")
    if spec.zero_phase:
        fwd = filtfilt(b, a, series, padtype="odd", padlen=padlen)
        rev = filtfilt(b, a, series[::-1], padtype="odd", padlen=padlen)[::-1]
        out = 0.5 * (fwd + rev)
    else:
        zi = lfilter_zi(b, a) * series[0]
        out, _ = lfilter(b, a, series, zi=zi)
    if not np.isfinite(out).all():
        raise SignalError("filter produced non-finite output")
    return out


def mass_normalize(torque: np.ndarray, mass: float) -> np.ndarray:
    """Divide a torque series (N*m) by body mass, yielding N*m/kg."""
    if not (mass > 0):
        raise NonPositiveMass(f"mass={mass}")
    return np.asarray(torque, dtype=float) / mass


def build_feature_matrix(
    trial: TrialRecord,
    subject: SubjectMeta,
    spec: FilterSpec = FilterSpec(),
    *,
    filter_first: bool = False,
    filter_target: bool = False,
) -> ProcessedTrial:
    """Run the full per-trial pipeline and assemble the 200x9 feature matrix.

    Default order is resample -> differentiate -> filter, with the filter
    applied to all six kinematic columns at the effective rate
    fs = 200 / cycle_duration.  ``filter_first`` instead filters the angle
    channels at their native rate before resampling (derivatives then
    inherit that smoothing and are not filtered again); it exists for
    sensitivity checks.  ``filter_target`` additionally low-passes the
    mass-normalized torque target.
    """
    duration = trial.cycle_duration if trial.cycle_duration else 1.0
    fs = CYCLE_SAMPLES / duration

    angles = {}
    if filter_first:
        n_native = trial.n_samples()
        fs_native = (n_native - 1) / duration if n_native > 1 else fs
        for name in ANGLE_CHANNELS:
            filtered = butterworth_lowpass(trial.channels[name], spec, fs_native)
            angles[name] = resample_cycle(filtered, CYCLE_SAMPLES)
        derivs = {name: first_difference(angles[name]) for name in ANGLE_CHANNELS}
    else:
        for name in ANGLE_CHANNELS:
            angles[name] = resample_cycle(trial.channels[name], CYCLE_SAMPLES)
        derivs = {name: first_difference(angles[name]) for name in ANGLE_CHANNELS}
        angles = {name: butterworth_lowpass(s, spec, fs) for name, s in angles.items()}
        derivs = {name: butterworth_lowpass(s, spec, fs) for name, s in derivs.items()}

    tau = resample_cycle(trial.channels[TARGET_CHANNEL], CYCLE_SAMPLES)
    target = mass_normalize(tau, subject.mass)
    if filter_target:
        target = butterworth_lowpass(target, spec, fs)

    columns = [
        angles["theta_hip"],
        angles["theta_knee"],
        angles["theta_shank"],
        derivs["theta_hip"],
        derivs["theta_knee"],
        derivs["theta_shank"],
        np.full(CYCLE_SAMPLES, subject.l_thigh),
        np.full(CYCLE_SAMPLES, subject.l_shank),
        np.full(CYCLE_SAMPLES, subject.l_foot),
    ]
    features = np.column_stack(columns)
    features.setflags(write=False)
    target = np.ascontiguousarray(target)
    target.setflags(write=False)
    return ProcessedTrial(
        subject_id=trial.subject_id,
        trial_id=trial.trial_id,
        speed=trial.speed,
        speed_class=trial.speed_class,
        features=features,
        target=target,
    )


def process_dataset(
    dataset: Dataset,
    spec: FilterSpec = FilterSpec(),
    *,
    filter_first: bool = False,
    filter_target: bool = False,
) -> Dataset:
    """Validate a dataset and process every raw trial.

    Raises ValueError listing the violations if validation fails; already
    processed trials pass through unchanged.
    """
    violations = validate_dataset(dataset)
    if violations:
        raise ValueError("dataset failed validation: " + "; ".join(str(v) for v in violations))
    subjects = dataset.subject_map()
    trials = []
    for t in dataset.trials:
        if isinstance(t, TrialRecord):
            t = build_feature_matrix(
                t, subjects[t.subject_id], spec, filter_first=filter_first, filter_target=filter_target
            )
        trials.append(t)
    return Dataset(subjects=dataset.subjects, trials=tuple(trials), provenance=dataset.provenance)
