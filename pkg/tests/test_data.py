import json

import numpy as np
import pytest

from gaitorque.data import (
    CYCLE_SAMPLES,
    DanglingSubjectRef,
    Dataset,
    MissingFile,
    NonFiniteSample,
    ProcessedTrial,
    SchemaViolation,
    SubjectMeta,
    TrialRecord,
    load_manifest,
    read_trial_csv,
    save_dataset,
    validate_dataset,
)


def _subject(sid="S1", mass=72.5, cohort="able", **kw):
    return SubjectMeta(id=sid, mass=mass, l_thigh=0.42, l_shank=0.40, l_foot=0.25, cohort=cohort, **kw)


def _trial(sid="S1", tid="S1_t0", n=CYCLE_SAMPLES, raw=False, rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    channels = {
        "theta_hip": rng.uniform(-30, 30, n),
        "theta_knee": rng.uniform(0, 60, n),
        "theta_shank": rng.uniform(-20, 20, n),
        "tau_ankle": rng.uniform(-80, 120, n),
    }
    defaults = dict(speed=1.31, speed_class="normal", cycle_duration=1.05)
    defaults.update(kw)
    return TrialRecord(subject_id=sid, trial_id=tid, channels=channels, raw=raw, **defaults)


def _dataset():
    rng = np.random.default_rng(7)
    subjects = (_subject("S1", height=1.78), _subject("S2", mass=0.1 + np.pi * 20))
    trials = (
        _trial("S1", "S1_t0", rng=rng),
        _trial("S2", "S2_t0", rng=rng, speed=1.0 / 3.0),
        _trial("S2", "S2_raw", n=137, raw=True, rng=rng, cycle_duration=0.87),
    )
    return Dataset(subjects=subjects, trials=trials, provenance="synthetic")


class TestRoundTrip:
    def test_fields_identical_after_save_and_load(self, tmp_path):
        ds = _dataset()
        manifest = save_dataset(ds, tmp_path)
        loaded = load_manifest(manifest)
        assert len(loaded.subjects) == len(ds.subjects)
        assert len(loaded.trials) == len(ds.trials)
        for a, b in zip(ds.subjects, loaded.subjects):
            assert a == b
        for a, b in zip(ds.trials, loaded.trials):
            assert (a.subject_id, a.trial_id, a.raw) == (b.subject_id, b.trial_id, b.raw)
            assert a.speed == b.speed and a.cycle_duration == b.cycle_duration
            assert a.speed_class == b.speed_class
            for ch in a.channels:
                assert np.array_equal(a.channels[ch], b.channels[ch])

    def test_count_preservation(self, tmp_path):
        manifest = save_dataset(_dataset(), tmp_path)
        loaded = load_manifest(manifest)
        assert len(loaded.subjects) == 2
        assert len(loaded.trials) == 3

    def test_rewrite_is_byte_identical(self, tmp_path):
        ds = _dataset()
        m1 = save_dataset(ds, tmp_path / "a")
        m2 = save_dataset(ds, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for t in ds.trials:
            f1 = (tmp_path / "a" / "trials" / f"{t.trial_id}.csv").read_bytes()
            f2 = (tmp_path / "b" / "trials" / f"{t.trial_id}.csv").read_bytes()
            assert f1 == f2


class TestLoadErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "nope.json")

    def test_missing_trial_csv(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        (tmp_path / "trials" / "S1_t0.csv").unlink()
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "manifest.json")

    def test_dangling_subject(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["trials"][0]["subject_id"] = "GHOST"
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DanglingSubjectRef):
            load_manifest(tmp_path / "manifest.json")

    def test_nan_cell(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        csv_path = tmp_path / "trials" / "S1_t0.csv"
        lines = csv_path.read_text().splitlines()
        parts = lines[5].split(",")
        parts[2] = "NaN"
        lines[5] = ",".join(parts)
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(NonFiniteSample):
            load_manifest(tmp_path / "manifest.json")

    def test_bad_header(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        csv_path = tmp_path / "trials" / "S1_t0.csv"
        text = csv_path.read_text().replace("theta_hip_deg", "hip")
        csv_path.write_text(text)
        with pytest.raises(SchemaViolation):
            load_manifest(tmp_path / "manifest.json")

    def test_nonpositive_mass_names_field(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["subjects"][0]["mass_kg"] = 0
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaViolation) as exc:
            load_manifest(tmp_path / "manifest.json")
        assert "mass_kg" in str(exc.value)

    def test_unknown_field_rejected(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["trials"][0]["speed"] = 1.0
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaViolation):
            load_manifest(tmp_path / "manifest.json")

    def test_wrong_format_version(self, tmp_path):
        save_dataset(_dataset(), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["format_version"] = 2
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaViolation):
            load_manifest(tmp_path / "manifest.json")

    def test_raw_trial_row_count(self, tmp_path):
        ds = Dataset(subjects=(_subject(),), trials=(_trial(n=3, raw=True),), provenance="synthetic")
        save_dataset(ds, tmp_path)
        with pytest.raises(SchemaViolation):
            load_manifest(tmp_path / "manifest.json")

    def test_processed_trial_needs_200_rows(self, tmp_path):
        ds = Dataset(subjects=(_subject(),), trials=(_trial(n=150, raw=False),), provenance="synthetic")
        save_dataset(ds, tmp_path)
        with pytest.raises(SchemaViolation):
            load_manifest(tmp_path / "manifest.json")


class TestReadTrialCsv:
    def test_single_file(self, tmp_path):
        t = _trial()
        save_dataset(Dataset((_subject(),), (t,), "synthetic"), tmp_path)
        channels = read_trial_csv(tmp_path / "trials" / f"{t.trial_id}.csv")
        for ch in t.channels:
            assert np.array_equal(channels[ch], t.channels[ch])


class TestValidateDataset:
    def test_well_formed(self):
        assert validate_dataset(_dataset()) == []

    def test_zero_mass(self):
        ds = Dataset((_subject(mass=0.0),), (_trial(),), "synthetic")
        rules = [v.rule for v in validate_dataset(ds)]
        assert "positive_mass" in rules

    def test_channel_length_mismatch(self):
        t = _trial()
        channels = dict(t.channels)
        channels["theta_hip"] = channels["theta_hip"][:-5]
        bad = TrialRecord(
            subject_id=t.subject_id,
            trial_id=t.trial_id,
            speed=t.speed,
            speed_class=t.speed_class,
            cycle_duration=t.cycle_duration,
            channels=channels,
            raw=t.raw,
        )
        rules = [v.rule for v in validate_dataset(Dataset((_subject(),), (bad,), "synthetic"))]
        assert "channel_length_mismatch" in rules

    def test_dangling_subject(self):
        ds = Dataset((_subject("S1"),), (_trial("S9"),), "synthetic")
        rules = [v.rule for v in validate_dataset(ds)]
        assert "dangling_subject_ref" in rules

    def test_non_finite(self):
        t = _trial()
        channels = dict(t.channels)
        bad_tau = channels["tau_ankle"].copy()
        bad_tau[10] = np.inf
        channels["tau_ankle"] = bad_tau
        bad = TrialRecord(
            subject_id="S1",
            trial_id="S1_t0",
            speed=1.3,
            speed_class="normal",
            cycle_duration=1.0,
            channels=channels,
            raw=False,
        )
        rules = [v.rule for v in validate_dataset(Dataset((_subject(),), (bad,), "synthetic"))]
        assert "non_finite_sample" in rules

    def test_processed_anthro_must_be_constant(self, rng):
        feats = rng.standard_normal((CYCLE_SAMPLES, 9))
        trial = ProcessedTrial("S1", "S1_p0", 1.3, "normal", feats, rng.standard_normal(CYCLE_SAMPLES))
        rules = [v.rule for v in validate_dataset(Dataset((_subject(),), (trial,), "synthetic"))]
        assert "anthro_not_constant" in rules

    def test_duplicate_subject_ids(self):
        ds = Dataset((_subject("S1"), _subject("S1")), (), "synthetic")
        rules = [v.rule for v in validate_dataset(ds)]
        assert "duplicate_subject_id" in rules

    def test_pure_function(self):
        ds = Dataset((_subject(mass=-1.0),), (_trial(),), "synthetic")
        assert validate_dataset(ds) == validate_dataset(ds)
