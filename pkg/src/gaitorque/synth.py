"""Deterministic synthetic gait generator with a known feature->torque law.

Provides desk-scale datasets for tests and benchmarks: able-bodied subjects
spanning a range of speeds, plus an "amputee" cohort whose input kinematics
are systematically distorted (reduced shank amplitude, shifted knee phase)
while their training targets come from speed-matched normative trajectories.
The torque is a fixed smooth function of the kinematic channels only, so
the mapping is learnable and can be recomputed exactly in oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import CYCLE_SAMPLES, Dataset, SubjectMeta, TrialRecord
from .signal import first_difference

#: Nominal treadmill speed levels (m/s) for the able-bodied cohort.
DEFAULT_SPEEDS = (1.04, 1.22, 1.40, 1.58, 1.77)


@dataclass(frozen=True)
class OracleParams:
    """Constants of the synthetic gait model.

    Amplitudes are in degrees, speed sensitivities in degrees per m/s, and
    phases in cycle fractions.  ``noise_sigma`` is additive gaussian noise on
    the mass-normalized torque (N*m/kg).
    """

    amp_hip: float = 25.0
    amp_knee: float = 30.0
    amp_shank: float = 20.0
    speed_hip: float = 5.0
    speed_knee: float = 10.0
    speed_shank: float = 8.0
    phase_shank: float = 1.0 / 6.0
    ref_speed: float = 1.3
    w_hip: float = 0.4
    w_shankdot: float = -0.6
    w_knee: float = 0.3
    knee_hinge_deg: float = 20.0
    noise_sigma: float = 0.01
    amputee_shank_scale: float = 0.8
    amputee_knee_phase_shift: float = 0.03


DEFAULT_PARAMS = OracleParams()


@dataclass(frozen=True)
class SubjectModulation:
    """Per-subject multiplicative amplitudes and additive phase jitters."""

    amp_hip: float
    amp_knee: float
    amp_shank: float
    phase_hip: float
    phase_knee: float
    phase_shank: float


@dataclass(frozen=True)
class SynthSubject:
    meta: SubjectMeta
    modulation: SubjectModulation


def torque_per_mass(theta_hip, theta_knee, theta_shank, params: OracleParams = DEFAULT_PARAMS) -> np.ndarray:
    """Ground-truth mass-normalized ankle torque for given kinematic channels.

    Deliberately mixes a positional term (hip), a velocity term (per-sample
    shank difference), and a hinge nonlinearity (knee), so trees have to use
    several features.
    """
    hip = np.asarray(theta_hip, dtype=float)
    knee = np.asarray(theta_knee, dtype=float)
    shank = np.asarray(theta_shank, dtype=float)
    hinge = np.logaddexp(0.0, knee - params.knee_hinge_deg) / 10.0  # softplus, degrees -> O(1)
    return (
        params.w_hip * hip / params.amp_hip
        + params.w_shankdot * first_difference(shank)
        + params.w_knee * hinge
    )


def gen_subject(seed: int, cohort: str, subject_id: str | None = None) -> SynthSubject:
    """Deterministically draw one subject's anthropometrics and modulation."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    meta = SubjectMeta(
        id=subject_id if subject_id is not None else f"S{seed}",
        mass=float(rng.uniform(60.0, 100.0)),
        l_thigh=float(rng.uniform(0.38, 0.46)),
        l_shank=float(rng.uniform(0.36, 0.44)),
        l_foot=float(rng.uniform(0.23, 0.27)),
        cohort=cohort,
    )
    modulation = SubjectModulation(
        amp_hip=float(rng.uniform(0.9, 1.1)),
        amp_knee=float(rng.uniform(0.9, 1.1)),
        amp_shank=float(rng.uniform(0.9, 1.1)),
        phase_hip=float(rng.uniform(-0.05, 0.05)),
        phase_knee=float(rng.uniform(-0.05, 0.05)),
        phase_shank=float(rng.uniform(-0.05, 0.05)),
    )
    return SynthSubject(meta=meta, modulation=modulation)


def gen_trial(
    subject: SynthSubject,
    speed: float,
    seed: int,
    params: OracleParams = DEFAULT_PARAMS,
    *,
    trial_id: str | None = None,
    speed_class: str = "normal",
) -> TrialRecord:
    """Generate one 200-sample gait cycle at the given speed.

    Amputee subjects get distorted input channels (shank amplitude scaled,
    knee phase shifted); the recorded torque channel is always the oracle
    function of the subject's own channels plus noise.
    """
    if not (speed > 0):
        raise ValueError(f"speed must be > 0, got {speed}")
    mod = subject.modulation
    amputee = subject.meta.cohort == "amputee"
    shank_amp_scale = params.amputee_shank_scale if amputee else 1.0
    knee_phase_extra = params.amputee_knee_phase_shift if amputee else 0.0

    phi = np.arange(CYCLE_SAMPLES) / CYCLE_SAMPLES
    dv = speed - params.ref_speed
    theta_hip = mod.amp_hip * (params.amp_hip + params.speed_hip * dv) * np.cos(
        2.0 * np.pi * (phi + mod.phase_hip)
    )
    knee_wave = np.sin(2.0 * np.pi * (phi + mod.phase_knee + knee_phase_extra))
    theta_knee = (
        mod.amp_knee * (params.amp_knee + params.speed_knee * dv) * np.maximum(0.0, knee_wave) ** 2
    )
    theta_shank = (
        mod.amp_shank
        * shank_amp_scale
        * (params.amp_shank + params.speed_shank * dv)
        * np.sin(2.0 * np.pi * (phi + params.phase_shank + mod.phase_shank))
    )

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    noise = rng.standard_normal(CYCLE_SAMPLES) * params.noise_sigma
    tau_per_kg = torque_per_mass(theta_hip, theta_knee, theta_shank, params) + noise

    channels = {
        "theta_hip": theta_hip,
        "theta_knee": theta_knee,
        "theta_shank": theta_shank,
        "tau_ankle": tau_per_kg * subject.meta.mass,
    }
    for a in channels.values():
        a.setflags(write=False)
    return TrialRecord(
        subject_id=subject.meta.id,
        trial_id=trial_id if trial_id is not None else f"{subject.meta.id}_v{speed:.2f}",
        speed=float(speed),
        speed_class=speed_class,
        cycle_duration=float(1.3 / speed),
        channels=channels,
        raw=False,
    )


def _child_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=master_seed, spawn_key=key).generate_state(1, np.uint64)[0])


def gen_dataset(
    n_able: int,
    n_amputee: int,
    speeds=DEFAULT_SPEEDS,
    trials_per_speed: int = 1,
    master_seed: int = 0,
    params: OracleParams = DEFAULT_PARAMS,
    *,
    amputee_normal_cycles: int = 8,
    amputee_fast_cycles: int = 3,
) -> Dataset:
    """Reproducible synthetic dataset.

    Able subjects walk every speed level (realized speed jittered by up to
    +/-0.05 m/s, so a +/-0.1 m/s matching window always finds same-level
    trials).  Amputees walk ``amputee_normal_cycles`` cycles near the middle
    speed level and ``amputee_fast_cycles`` near the top one (jitter up to
    +/-0.03 m/s), the latter tagged "fast".
    """
    if n_able < 1:
        raise ValueError("need at least one able-bodied subject")
    speeds = tuple(speeds)
    subjects: list[SubjectMeta] = []
    trials: list[TrialRecord] = []

    for i in range(n_able):
        subj = gen_subject(_child_seed(master_seed, 0, i), "able", subject_id=f"AB{i + 1:02d}")
        subjects.append(subj.meta)
        for j, nominal in enumerate(speeds):
            for t in range(trials_per_speed):
                rng = np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(0, i, j, t)))
                speed = nominal + float(rng.uniform(-0.05, 0.05))
                trials.append(
                    gen_trial(
                        subj,
                        speed,
                        _child_seed(master_seed, 0, i, j, t, 1),
                        params,
                        trial_id=f"{subj.meta.id}_s{j}t{t}",
                        speed_class="normal",
                    )
                )

    normal_nominal = speeds[len(speeds) // 2]
    fast_nominal = speeds[-1]
    for i in range(n_amputee):
        subj = gen_subject(_child_seed(master_seed, 1, i), "amputee", subject_id=f"AMP{i + 1}")
        subjects.append(subj.meta)
        for j in range(amputee_normal_cycles):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(1, i, j, 0)))
            speed = normal_nominal + float(rng.uniform(-0.03, 0.03))
            trials.append(
                gen_trial(
                    subj,
                    speed,
                    _child_seed(master_seed, 1, i, j, 1),
                    params,
                    trial_id=f"{subj.meta.id}_n{j}",
                    speed_class="normal",
                )
            )
        for j in range(amputee_fast_cycles):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(1, i, j, 2)))
            speed = fast_nominal + float(rng.uniform(-0.03, 0.03))
            trials.append(
                gen_trial(
                    subj,
                    speed,
                    _child_seed(master_seed, 1, i, j, 3),
                    params,
                    trial_id=f"{subj.meta.id}_f{j}",
                    speed_class="fast",
                )
            )

    return Dataset(subjects=tuple(subjects), trials=tuple(trials), provenance="synthetic")
