import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitorque.data import CYCLE_SAMPLES, FEATURE_COLUMNS, SubjectMeta, TrialRecord
from gaitorque.signal import (
    CutoffAboveNyquist,
    FilterSpec,
    NonPositiveMass,
    TooShort,
    build_feature_matrix,
    butterworth_lowpass,
    first_difference,
    mass_normalize,
    resample_cycle,
)
from gaitorque.synth import gen_subject, gen_trial


class TestResample:
    def test_linear_ramp_stays_linear(self):
        out = resample_cycle(np.arange(100.0), 200)
        assert out[0] == 0.0 and out[-1] == 99.0
        assert np.allclose(np.diff(out), 99.0 / 199.0)

    def test_constant(self):
        assert np.array_equal(resample_cycle(np.array([5.0, 5.0, 5.0]), 200), np.full(200, 5.0))

    def test_two_to_three(self):
        assert np.array_equal(resample_cycle(np.array([0.0, 2.0]), 3), np.array([0.0, 1.0, 2.0]))

    def test_too_short(self):
        with pytest.raises(TooShort):
            resample_cycle(np.array([1.0]), 200)

    @settings(deadline=None, max_examples=50)
    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=40),
        st.integers(min_value=2, max_value=300),
    )
    def test_bounds_endpoints_and_monotonicity(self, values, n):
        series = np.asarray(values)
        out = resample_cycle(series, n)
        assert out.shape == (n,)
        assert out[0] == series[0] and out[-1] == series[-1]
        assert out.min() >= series.min() - 1e-12 and out.max() <= series.max() + 1e-12
        if np.all(np.diff(series) >= 0):
            assert np.all(np.diff(out) >= -1e-12)


class TestFirstDifference:
    def test_example(self):
        assert np.array_equal(first_difference(np.array([1.0, 2.0, 4.0, 7.0])), [1.0, 2.0, 3.0, 3.0])

    def test_constant_is_zero(self):
        assert np.array_equal(first_difference(np.full(50, 3.3)), np.zeros(50))

    def test_linear_is_constant_slope(self):
        out = first_difference(np.arange(0.0, 10.0, 0.5))
        assert np.allclose(out, 0.5)

    def test_too_short(self):
        with pytest.raises(TooShort):
            first_difference(np.array([1.0]))


class TestButterworth:
    fs = 200.0

    def test_dc_gain_zero_phase(self):
        out = butterworth_lowpass(np.full(80, 2.5), FilterSpec(6.0, 2, True), self.fs)
        assert np.abs(out - 2.5).max() < 1e-6

    def test_dc_gain_single_pass(self):
        out = butterworth_lowpass(np.full(80, -1.25), FilterSpec(6.0, 2, False), self.fs)
        assert np.abs(out + 1.25).max() < 1e-6

    def test_cutoff_amplitude_ratio(self):
        # at the cutoff an order-2 zero-phase pass attenuates to |H|^2 = 1/2;
        # cross-checked against the DFT magnitude of the filtered output
        t = np.arange(400) / self.fs
        x = np.sin(2 * np.pi * 6.0 * t)
        y = butterworth_lowpass(x, FilterSpec(6.0, 2, True), self.fs)
        mid = slice(80, 320)
        ratio = np.abs(y[mid]).max() / np.abs(x[mid]).max()
        assert abs(ratio - 0.5) < 0.05
        spectrum = np.abs(np.fft.rfft(y[mid] * np.hanning(240)))
        x_spectrum = np.abs(np.fft.rfft(x[mid] * np.hanning(240)))
        dft_ratio = spectrum.max() / x_spectrum.max()
        assert abs(dft_ratio - 0.5) < 0.05

    def test_stopband_attenuation(self):
        t = np.arange(400) / self.fs
        x = np.sin(2 * np.pi * (self.fs / 2.5) * t)
        y = butterworth_lowpass(x, FilterSpec(self.fs / 20.0, 2, True), self.fs)
        assert np.abs(y[80:320]).max() < 0.01

    def test_palindrome_symmetry(self):
        pal = np.sin(np.linspace(0.0, np.pi, 151)) + 0.3 * np.sin(np.linspace(0, np.pi, 151)) ** 4
        out = butterworth_lowpass(pal, FilterSpec(6.0, 2, True), self.fs)
        assert np.abs(out - out[::-1]).max() < 1e-9

    def test_cutoff_above_nyquist(self):
        with pytest.raises(CutoffAboveNyquist):
            butterworth_lowpass(np.zeros(50), FilterSpec(120.0, 2, True), self.fs)

    def test_too_short(self):
        with pytest.raises(TooShort):
            butterworth_lowpass(np.zeros(6), FilterSpec(6.0, 2, True), self.fs)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(120)
        a = butterworth_lowpass(x, FilterSpec(6.0, 2, True), self.fs)
        b = butterworth_lowpass(x, FilterSpec(6.0, 2, True), self.fs)
        assert np.array_equal(a, b)


class TestMassNormalize:
    def test_example(self):
        assert np.array_equal(mass_normalize(np.array([80.0, -40.0]), 80.0), [1.0, -0.5])

    def test_zeros(self):
        assert np.array_equal(mass_normalize(np.zeros(5), 63.2), np.zeros(5))

    def test_ratio_invariance(self):
        tau = np.array([12.0, -7.5, 3.25])
        for c in (2.0, 8.0, 0.5):
            assert np.allclose(mass_normalize(c * tau, c * 70.0), mass_normalize(tau, 70.0))

    def test_non_positive_mass(self):
        with pytest.raises(NonPositiveMass):
            mass_normalize(np.ones(3), 0.0)


def _subject():
    return SubjectMeta(id="S1", mass=70.0, l_thigh=0.42, l_shank=0.40, l_foot=0.25, cohort="able")


def _trial_from_channels(channels, n, cycle_duration=1.0, raw=False):
    return TrialRecord(
        subject_id="S1",
        trial_id="S1_t0",
        speed=1.3,
        speed_class="normal",
        cycle_duration=cycle_duration,
        channels=channels,
        raw=raw,
    )


class TestBuildFeatureMatrix:
    def test_already_normalized_trial_keeps_filtered_angles(self):
        rng = np.random.default_rng(5)
        t = np.arange(CYCLE_SAMPLES) / CYCLE_SAMPLES
        channels = {
            "theta_hip": 20 * np.cos(2 * np.pi * t),
            "theta_knee": 30 * np.sin(2 * np.pi * t) ** 2,
            "theta_shank": 15 * np.sin(2 * np.pi * t + 1.0),
            "tau_ankle": rng.standard_normal(CYCLE_SAMPLES),
        }
        trial = _trial_from_channels(channels, CYCLE_SAMPLES)
        spec = FilterSpec(6.0, 2, True)
        out = build_feature_matrix(trial, _subject(), spec)
        fs = CYCLE_SAMPLES / trial.cycle_duration
        assert np.array_equal(out.features[:, 0], butterworth_lowpass(channels["theta_hip"], spec, fs))
        assert np.array_equal(out.target, channels["tau_ankle"] / 70.0)

    def test_constant_angles_give_zero_derivatives(self):
        channels = {
            "theta_hip": np.full(CYCLE_SAMPLES, 12.0),
            "theta_knee": np.full(CYCLE_SAMPLES, 25.0),
            "theta_shank": np.full(CYCLE_SAMPLES, -5.0),
            "tau_ankle": np.linspace(-10, 10, CYCLE_SAMPLES),
        }
        out = build_feature_matrix(_trial_from_channels(channels, CYCLE_SAMPLES), _subject())
        for j in (3, 4, 5):
            assert np.array_equal(out.features[:, j], np.zeros(CYCLE_SAMPLES))

    def test_anthro_columns_constant_and_correct(self):
        subj = _subject()
        trial = _trial_from_channels(
            {
                "theta_hip": np.sin(np.linspace(0, 6, 137)),
                "theta_knee": np.cos(np.linspace(0, 6, 137)),
                "theta_shank": np.sin(np.linspace(0, 6, 137) + 1),
                "tau_ankle": np.cos(np.linspace(0, 6, 137) + 2),
            },
            137,
            raw=True,
        )
        out = build_feature_matrix(trial, subj)
        assert out.features.shape == (CYCLE_SAMPLES, len(FEATURE_COLUMNS))
        for j, value in ((6, subj.l_thigh), (7, subj.l_shank), (8, subj.l_foot)):
            assert np.array_equal(out.features[:, j], np.full(CYCLE_SAMPLES, value))

    def test_deterministic(self):
        subj = gen_subject(3, "able")
        trial = gen_trial(subj, 1.3, seed=4)
        a = build_feature_matrix(trial, subj.meta)
        b = build_feature_matrix(trial, subj.meta)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.target, b.target)

    def test_filter_first_order_is_available_and_differs(self):
        subj = gen_subject(3, "able")
        trial = gen_trial(subj, 1.3, seed=4)
        a = build_feature_matrix(trial, subj.meta)
        b = build_feature_matrix(trial, subj.meta, filter_first=True)
        assert a.features.shape == b.features.shape
        assert not np.array_equal(a.features, b.features)
        assert np.allclose(a.features[:, 0], b.features[:, 0], atol=0.5)

    def test_filter_target_flag(self):
        subj = gen_subject(3, "able")
        trial = gen_trial(subj, 1.3, seed=4)
        a = build_feature_matrix(trial, subj.meta)
        b = build_feature_matrix(trial, subj.meta, filter_target=True)
        assert not np.array_equal(a.target, b.target)
        assert np.allclose(a.target, b.target, atol=0.1)
