"""Shared fixtures and the acceptance-result summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from gaitorque.data import CYCLE_SAMPLES, FEATURE_COLUMNS, ProcessedTrial

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    _ACCEPTANCE.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")


def make_processed_trial(
    rng: np.random.Generator,
    subject_id: str = "S1",
    trial_id: str | None = None,
    speed: float = 1.3,
    speed_class: str = "normal",
    target: np.ndarray | None = None,
) -> ProcessedTrial:
    """Structurally valid ProcessedTrial with random kinematics."""
    features = rng.standard_normal((CYCLE_SAMPLES, len(FEATURE_COLUMNS)))
    for j, name in enumerate(FEATURE_COLUMNS):
        if name.startswith("l_"):
            features[:, j] = rng.uniform(0.2, 0.5)
    if target is None:
        target = rng.standard_normal(CYCLE_SAMPLES)
    return ProcessedTrial(
        subject_id=subject_id,
        trial_id=trial_id or f"{subject_id}_t{rng.integers(1 << 30)}",
        speed=speed,
        speed_class=speed_class,
        features=features,
        target=np.asarray(target, dtype=float),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
