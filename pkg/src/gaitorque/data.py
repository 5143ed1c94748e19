"""Dataset types, manifest/CSV ingestion, and validation for gait-cycle trials.

A dataset is a JSON manifest plus one CSV per trial.  Trials come in two
layouts: cycle-normalized (exactly 200 rows, no time column) and raw-rate
(a leading ``time_s`` column, any row count >= 4).  All values are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

COHORTS = ("able", "amputee")
SPEED_CLASSES = ("normal", "fast")

ANGLE_CHANNELS = ("theta_hip", "theta_knee", "theta_shank")
TARGET_CHANNEL = "tau_ankle"
REQUIRED_CHANNELS = ANGLE_CHANNELS + (TARGET_CHANNEL,)

#: Column order of the processed feature matrix.
FEATURE_COLUMNS = (
    "theta_hip",
    "theta_knee",
    "theta_shank",
    "dtheta_hip",
    "dtheta_knee",
    "dtheta_shank",
    "l_thigh",
    "l_shank",
    "l_foot",
)

#: Samples per normalized gait cycle.
CYCLE_SAMPLES = 200

PROCESSED_HEADER = (
    "sample_index",
    "theta_hip_deg",
    "theta_knee_deg",
    "theta_shank_deg",
    "tau_ankle_Nm",
)
RAW_HEADER = ("time_s",) + PROCESSED_HEADER

MANIFEST_VERSION = 1


class GaitDataError(Exception):
    """Base class for dataset ingestion failures."""


class MissingFile(GaitDataError):
    pass


class SchemaViolation(GaitDataError):
    """A manifest or CSV field does not match the expected schema."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


class DanglingSubjectRef(GaitDataError):
    pass


class NonFiniteSample(GaitDataError):
    pass


@dataclass(frozen=True)
class SubjectMeta:
    """Per-subject anthropometrics; lengths in meters, mass in kilograms."""

    id: str
    mass: float
    l_thigh: float
    l_shank: float
    l_foot: float
    cohort: str
    height: float | None = None  # stored when provided, unused by models

    @property
    def segment_lengths(self) -> tuple[float, float, float]:
        return (self.l_thigh, self.l_shank, self.l_foot)


@dataclass(frozen=True)
class TrialRecord:
    """One recorded gait cycle: uniformly sampled channel series.

    ``channels`` maps the four required channel names to float arrays of
    equal length (angles in degrees, ankle torque in N*m).  ``raw`` marks
    trials that still need cycle resampling.
    """

    subject_id: str
    trial_id: str
    speed: float
    speed_class: str
    cycle_duration: float
    channels: Mapping[str, np.ndarray]
    raw: bool = False

    def n_samples(self) -> int:
        return len(next(iter(self.channels.values())))


@dataclass(frozen=True)
class ProcessedTrial:
    """A trial after signal prep: 200xF feature matrix and 200-sample target.

    The target is the mass-normalized ankle torque in N*m/kg; feature
    columns follow :data:`FEATURE_COLUMNS`.
    """

    subject_id: str
    trial_id: str
    speed: float
    speed_class: str
    features: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectMeta, ...]
    trials: tuple
    provenance: str = "ingested"  # "synthetic" | "ingested"

    def subject(self, subject_id: str) -> SubjectMeta:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)

    def subject_map(self) -> dict[str, SubjectMeta]:
        return {s.id: s for s in self.subjects}

    def trials_of(self, subject_id: str, speed_class: str | None = None) -> list:
        out = [t for t in self.trials if t.subject_id == subject_id]
        if speed_class is not None:
            out = [t for t in out if t.speed_class == speed_class]
        return out


@dataclass(frozen=True)
class Violation:
    """One invariant breach found by :func:`validate_dataset`."""

    rule: str
    where: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule} at {self.where}" + (f": {self.detail}" if self.detail else "")


def _finite(x: float) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Check every type invariant; returns one Violation per breach.

    Pure: never raises on bad values, never mutates the dataset.
    """
    out: list[Violation] = []
    seen_ids: set[str] = set()
    for s in dataset.subjects:
        where = f"subject {s.id}"
        if s.id in seen_ids:
            out.append(Violation("duplicate_subject_id", where))
        seen_ids.add(s.id)
        if not (_finite(s.mass) and s.mass > 0):
            out.append(Violation("positive_mass", where, f"mass={s.mass}"))
        for name, val in (("l_thigh", s.l_thigh), ("l_shank", s.l_shank), ("l_foot", s.l_foot)):
            if not (_finite(val) and val > 0):
                out.append(Violation("positive_segment_length", where, f"{name}={val}"))
        if s.cohort not in COHORTS:
            out.append(Violation("invalid_cohort", where, repr(s.cohort)))

    for t in dataset.trials:
        where = f"trial {t.trial_id}"
        if t.subject_id not in seen_ids:
            out.append(Violation("dangling_subject_ref", where, t.subject_id))
        if not (_finite(t.speed) and t.speed > 0):
            out.append(Violation("positive_speed", where, f"speed={t.speed}"))
        if t.speed_class not in SPEED_CLASSES:
            out.append(Violation("invalid_speed_class", where, repr(t.speed_class)))
        if isinstance(t, TrialRecord):
            out.extend(_validate_trial_record(t, where))
        else:
            out.extend(_validate_processed(t, where))
    return out


def _validate_trial_record(t: TrialRecord, where: str) -> list[Violation]:
    out: list[Violation] = []
    if not (_finite(t.cycle_duration) and t.cycle_duration > 0):
        out.append(Violation("positive_cycle_duration", where, f"{t.cycle_duration}"))
    missing = [c for c in REQUIRED_CHANNELS if c not in t.channels]
    if missing:
        out.append(Violation("missing_channel", where, ",".join(missing)))
        return out
    lengths = {c: len(t.channels[c]) for c in REQUIRED_CHANNELS}
    if len(set(lengths.values())) != 1:
        out.append(Violation("channel_length_mismatch", where, repr(lengths)))
    if min(lengths.values()) < 4:
        out.append(Violation("too_few_samples", where, f"n={min(lengths.values())}"))
    for c in REQUIRED_CHANNELS:
        arr = np.asarray(t.channels[c], dtype=float)
        if arr.size and not np.isfinite(arr).all():
            out.append(Violation("non_finite_sample", where, c))
    if not t.raw and lengths[TARGET_CHANNEL] != CYCLE_SAMPLES:
        out.append(Violation("row_count", where, f"expected {CYCLE_SAMPLES}, got {lengths[TARGET_CHANNEL]}"))
    return out


def _validate_processed(t: ProcessedTrial, where: str) -> list[Violation]:
    out: list[Violation] = []
    feats = np.asarray(t.features)
    target = np.asarray(t.target)
    if feats.ndim != 2 or feats.shape != (CYCLE_SAMPLES, len(FEATURE_COLUMNS)):
        out.append(Violation("feature_shape", where, f"{feats.shape}"))
        return out
    if target.shape != (CYCLE_SAMPLES,):
        out.append(Violation("target_shape", where, f"{target.shape}"))
    if not np.isfinite(feats).all() or not np.isfinite(target).all():
        out.append(Violation("non_finite_sample", where))
    for j, name in enumerate(FEATURE_COLUMNS):
        if name.startswith("l_") and np.ptp(feats[:, j]) != 0.0:
            out.append(Violation("anthro_not_constant", where, name))
    return out


# ---------------------------------------------------------------------------
# manifest + CSV io
# ---------------------------------------------------------------------------

_SUBJECT_KEYS = {"id", "mass_kg", "l_thigh_m", "l_shank_m", "l_foot_m", "cohort"}
_SUBJECT_OPTIONAL = {"height_m"}
_TRIAL_KEYS = {"subject_id", "path", "speed_mps", "speed_class", "cycle_duration_s", "raw"}


def _require(entry: dict, keys: set[str], optional: set[str], ctx: str) -> None:
    missing = keys - entry.keys()
    if missing:
        raise SchemaViolation(f"{ctx}.{sorted(missing)[0]}", "missing required field")
    unknown = entry.keys() - keys - optional
    if unknown:
        raise SchemaViolation(f"{ctx}.{sorted(unknown)[0]}", "unknown field")


def _num(entry: dict, key: str, ctx: str, positive: bool = True) -> float:
    v = entry[key]
    if not _finite(v):
        raise SchemaViolation(f"{ctx}.{key}", f"expected finite number, got {v!r}")
    if positive and v <= 0:
        raise SchemaViolation(f"{ctx}.{key}", f"must be > 0, got {v!r}")
    return float(v)


def load_manifest(path: str | Path) -> Dataset:
    """Parse a dataset manifest and every referenced trial CSV.

    Raises MissingFile, SchemaViolation, DanglingSubjectRef, or
    NonFiniteSample on the first problem found.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaViolation("manifest", f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaViolation("manifest", "top level must be an object")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise SchemaViolation("format_version", f"expected {MANIFEST_VERSION}, got {doc.get('format_version')!r}")
    for key in ("subjects", "trials"):
        if not isinstance(doc.get(key), list):
            raise SchemaViolation(key, "expected a list")

    subjects: list[SubjectMeta] = []
    ids: set[str] = set()
    for i, entry in enumerate(doc["subjects"]):
        ctx = f"subjects[{i}]"
        if not isinstance(entry, dict):
            raise SchemaViolation(ctx, "expected an object")
        _require(entry, _SUBJECT_KEYS, _SUBJECT_OPTIONAL, ctx)
        sid = entry["id"]
        if not isinstance(sid, str) or not sid:
            raise SchemaViolation(f"{ctx}.id", "expected non-empty string")
        if sid in ids:
            raise SchemaViolation(f"{ctx}.id", f"duplicate subject id {sid!r}")
        ids.add(sid)
        if entry["cohort"] not in COHORTS:
            raise SchemaViolation(f"{ctx}.cohort", f"expected one of {COHORTS}, got {entry['cohort']!r}")
        height = None
        if "height_m" in entry:
            height = _num(entry, "height_m", ctx)
        subjects.append(
            SubjectMeta(
                id=sid,
                mass=_num(entry, "mass_kg", ctx),
                l_thigh=_num(entry, "l_thigh_m", ctx),
                l_shank=_num(entry, "l_shank_m", ctx),
                l_foot=_num(entry, "l_foot_m", ctx),
                cohort=entry["cohort"],
                height=height,
            )
        )

    trials: list[TrialRecord] = []
    for i, entry in enumerate(doc["trials"]):
        ctx = f"trials[{i}]"
        if not isinstance(entry, dict):
            raise SchemaViolation(ctx, "expected an object")
        _require(entry, _TRIAL_KEYS, set(), ctx)
        if entry["subject_id"] not in ids:
            raise DanglingSubjectRef(f"{ctx}: unknown subject {entry['subject_id']!r}")
        if entry["speed_class"] not in SPEED_CLASSES:
            raise SchemaViolation(f"{ctx}.speed_class", f"expected one of {SPEED_CLASSES}")
        if not isinstance(entry["raw"], bool):
            raise SchemaViolation(f"{ctx}.raw", "expected boolean")
        csv_path = path.parent / entry["path"]
        channels = _read_trial_csv(csv_path, raw=entry["raw"], ctx=ctx)
        trials.append(
            TrialRecord(
                subject_id=entry["subject_id"],
                trial_id=Path(entry["path"]).stem,
                speed=_num(entry, "speed_mps", ctx),
                speed_class=entry["speed_class"],
                cycle_duration=_num(entry, "cycle_duration_s", ctx),
                channels=channels,
                raw=entry["raw"],
            )
        )
    return Dataset(subjects=tuple(subjects), trials=tuple(trials), provenance="ingested")


def _read_trial_csv(csv_path: Path, raw: bool, ctx: str) -> dict[str, np.ndarray]:
    if not csv_path.is_file():
        raise MissingFile(str(csv_path))
    expected = RAW_HEADER if raw else PROCESSED_HEADER
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != expected:
            raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}: header must be exactly {','.join(expected)}")
        rows = []
        for lineno, row in enumerate(reader):
            if len(row) != len(expected):
                raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}:{lineno + 2}: wrong column count")
            vals = []
            for col, cell in zip(expected, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaViolation(
                        f"{ctx}.path", f"{csv_path.name}:{lineno + 2}: non-numeric {col}={cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise NonFiniteSample(f"{csv_path.name}:{lineno + 2}: {col}={cell!r}")
                vals.append(v)
            rows.append(vals)

    n = len(rows)
    if raw and n < 4:
        raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}: raw trials need >= 4 rows, got {n}")
    if not raw and n != CYCLE_SAMPLES:
        raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}: expected {CYCLE_SAMPLES} rows, got {n}")
    arr = np.asarray(rows, dtype=float)
    offset = 1 if raw else 0
    idx = arr[:, offset]
    if not np.array_equal(idx, np.arange(n, dtype=float)):
        raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}: sample_index must run 0..{n - 1}")
    if raw:
        t = arr[:, 0]
        if not (np.diff(t) > 0).all():
            raise SchemaViolation(f"{ctx}.path", f"{csv_path.name}: time_s must be strictly increasing")
    channels = {
        "theta_hip": arr[:, offset + 1].copy(),
        "theta_knee": arr[:, offset + 2].copy(),
        "theta_shank": arr[:, offset + 3].copy(),
        "tau_ankle": arr[:, offset + 4].copy(),
    }
    for a in channels.values():
        a.setflags(write=False)
    return channels


def read_trial_csv(path: str | Path, raw: bool = False) -> dict[str, np.ndarray]:
    """Parse a single trial CSV outside of a manifest; returns the channel map."""
    return _read_trial_csv(Path(path), raw=raw, ctx="trial")


def _fmt(x: float) -> str:
    # repr() is the shortest decimal string that parses back to the same
    # double, so round-trips are exact.
    return repr(float(x))


def save_dataset(dataset: Dataset, out_dir: str | Path, trials_subdir: str = "trials") -> Path:
    """Write manifest.json plus one CSV per trial; returns the manifest path.

    Only unprocessed trials (TrialRecord) can be written; processed feature
    matrices have no on-disk trial format.
    """
    out_dir = Path(out_dir)
    (out_dir / trials_subdir).mkdir(parents=True, exist_ok=True)
    subjects = []
    for s in dataset.subjects:
        entry = {
            "id": s.id,
            "mass_kg": s.mass,
            "l_thigh_m": s.l_thigh,
            "l_shank_m": s.l_shank,
            "l_foot_m": s.l_foot,
            "cohort": s.cohort,
        }
        if s.height is not None:
            entry["height_m"] = s.height
        subjects.append(entry)

    trial_entries = []
    for t in dataset.trials:
        if not isinstance(t, TrialRecord):
            raise ValueError(f"cannot write processed trial {t.trial_id!r} to a manifest")
        rel = f"{trials_subdir}/{t.trial_id}.csv"
        _write_trial_csv(out_dir / rel, t)
        trial_entries.append(
            {
                "subject_id": t.subject_id,
                "path": rel,
                "speed_mps": t.speed,
                "speed_class": t.speed_class,
                "cycle_duration_s": t.cycle_duration,
                "raw": t.raw,
            }
        )

    manifest = {"format_version": MANIFEST_VERSION, "subjects": subjects, "trials": trial_entries}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def _write_trial_csv(path: Path, t: TrialRecord) -> None:
    header = RAW_HEADER if t.raw else PROCESSED_HEADER
    n = t.n_samples()
    cols = [t.channels[c] for c in REQUIRED_CHANNELS]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        if t.raw:
            dt = t.cycle_duration / (n - 1)
            for i in range(n):
                writer.writerow([_fmt(i * dt), i] + [_fmt(c[i]) for c in cols])
        else:
            for i in range(n):
                writer.writerow([i] + [_fmt(c[i]) for c in cols])
