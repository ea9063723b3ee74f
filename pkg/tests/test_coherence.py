import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvarrays.coherence import (DecayCurve, NoiseModel, PulseSequence, chi, chi_hahn_exact, chi_ramsey_exact,
                                coherence_signal, effective_t2, filter_function, fit_stretched_exp, fit_t1,
                                sample_contrast, stretched_exp, survey, synth_decay)
from nvarrays.runtime import stream

NOISE = NoiseModel(b=1e4, tau_c=1e-4, T1=1.0)


def _cpmg_closed_form(n: int, z: np.ndarray) -> np.ndarray:
    # ideal instantaneous pi pulses at (k - 1/2) t / n
    edge = np.sin(z / 2) ** 2 if n % 2 == 0 else np.cos(z / 2) ** 2
    return 8 * np.sin(z / (4 * n)) ** 4 * edge / np.cos(z / (2 * n)) ** 2


@given(z=st.floats(1e-3, 200.0))
def test_ramsey_and_hahn_filter_functions(z):
    assert filter_function(PulseSequence.ramsey(), z) == pytest.approx(2 * math.sin(z / 2) ** 2, abs=1e-9)
    assert filter_function(PulseSequence.hahn(), z) == pytest.approx(8 * math.sin(z / 4) ** 4, abs=1e-9)


@pytest.mark.parametrize("n", [2, 3, 4, 7])
def test_cpmg_filter_function_closed_form(n):
    z = np.linspace(0.01, 80.0, 997)
    z = z[np.abs(np.cos(z / (2 * n))) > 1e-3]
    np.testing.assert_allclose(filter_function(PulseSequence.cpmg(n), z), _cpmg_closed_form(n, z), atol=1e-8)


def test_xy8_timing_equals_cpmg_with_eight_times_the_pulses():
    z = np.linspace(0, 300, 501)
    np.testing.assert_allclose(filter_function(PulseSequence.xy8(4), z), filter_function(PulseSequence.cpmg(32), z),
                               atol=1e-10)


def test_sequence_parsing_and_names():
    for text in ("Ramsey", "HahnEcho", "CPMG-16", "XY8-4"):
        assert str(PulseSequence.parse(text)) == text
    assert PulseSequence.parse("XY8-4").pulse_count == 32
    with pytest.raises(ValueError):
        PulseSequence.parse("Spin-3")


@pytest.mark.parametrize("t", [1e-6, 3e-5, 1e-4, 2e-3, 5e-2])
def test_chi_matches_closed_forms(t):
    assert chi(PulseSequence.ramsey(), t, NOISE) == pytest.approx(float(chi_ramsey_exact(t, NOISE)), rel=1e-7)
    assert chi(PulseSequence.hahn(), t, NOISE) == pytest.approx(float(chi_hahn_exact(t, NOISE)), rel=1e-7)


def test_chi_limits_and_scaling():
    seq = PulseSequence.cpmg(4)
    assert chi(seq, 0.0, NOISE) == 0.0
    assert chi(seq, 1e-3, NOISE.with_b(0.0)) == 0.0
    assert chi(seq, 1e-3, NOISE.with_b(2e4)) == pytest.approx(4 * chi(seq, 1e-3, NOISE), rel=1e-8)
    with pytest.raises(ValueError):
        chi(seq, -1.0, NOISE)


@settings(max_examples=15, deadline=None)
@given(t1=st.floats(1e-6, 1e-2), t2=st.floats(1e-6, 1e-2))
def test_chi_is_monotone_in_time(t1, t2):
    lo, hi = sorted((t1, t2))
    seq = PulseSequence.xy8(1)
    assert chi(seq, lo, NOISE) <= chi(seq, hi, NOISE) * (1 + 1e-9)


def test_decoupling_extends_coherence():
    t2 = [effective_t2(PulseSequence.parse(s), NOISE) for s in ("Ramsey", "HahnEcho", "CPMG-4", "XY8-4")]
    assert all(a < b for a, b in zip(t2, t2[1:]))


def test_quasi_static_ramsey_dephasing_time():
    # tau_c >> t: chi = b^2 t^2 / 2, so the 1/e time is sqrt(2) / b
    slow = NoiseModel(b=1e4, tau_c=10.0, T1=1.0)
    assert effective_t2(PulseSequence.ramsey(), slow) == pytest.approx(math.sqrt(2) / 1e4, rel=1e-4)


def test_coherence_signal_includes_relaxation():
    noise = NoiseModel(b=0.0, tau_c=1e-4, T1=3e-3)
    t = np.array([0.0, 1e-3, 3e-3])
    np.testing.assert_allclose(coherence_signal(PulseSequence.hahn(), t, noise), np.exp(-t / 3e-3))
    assert coherence_signal(PulseSequence.hahn(), 0.0, NOISE) == 1.0


@given(w=st.floats(-1, 1), shots=st.integers(1, 5000), seed=st.integers(0, 2 ** 32))
def test_sampled_contrast_is_bounded_with_positive_error(w, shots, seed):
    s, sigma = sample_contrast([w], shots, np.random.default_rng(seed))
    assert -1 <= s[0] <= 1 and sigma[0] > 0


def test_sample_contrast_requires_shots():
    with pytest.raises(ValueError):
        sample_contrast([0.5], 0, np.random.default_rng(0))


def test_noiseless_stretched_exponential_is_recovered():
    t = np.linspace(0, 2e-3, 30)
    curve = DecayCurve(t, stretched_exp(t, 0.95, 7e-4, 2.3), np.full(30, 0.01))
    f = fit_stretched_exp(curve)
    assert f.converged
    assert (f.A, f.T2, f.n) == pytest.approx((0.95, 7e-4, 2.3), rel=1e-6)


def test_fit_errors_reflect_noise_level():
    t = np.linspace(0, 2e-3, 25)
    rng = stream(4, "coherence", 0)
    fits = [fit_stretched_exp(synth_decay(PulseSequence.hahn(), NoiseModel(), t, 2000, rng)) for _ in range(60)]
    t2 = np.array([f.T2 for f in fits])
    reported = np.median([f.errors[1] for f in fits])
    assert t2.std() == pytest.approx(reported, rel=0.35)


def test_t1_fit_bounded_and_unbounded():
    t = np.linspace(0, 9e-3, 21)
    f = fit_t1(DecayCurve(t, np.exp(-t / 3e-3), np.full(21, 0.01)))
    assert not f.unbounded and f.T1 == pytest.approx(3e-3, rel=1e-6)
    flat = fit_t1(DecayCurve(t, np.exp(-t / 10.0), np.full(21, 0.01)))
    assert flat.unbounded and not flat.converged


def test_curve_checks():
    with pytest.raises(ValueError):
        fit_stretched_exp(DecayCurve([0, 1, 2], [1, 0.5, 0.2], [0.1] * 3))
    with pytest.raises(ValueError):
        fit_stretched_exp(DecayCurve(np.arange(6.0), np.zeros(6), np.ones(6)))


def test_decay_csv_round_trip(tmp_path):
    curve = synth_decay(PulseSequence.hahn(), NoiseModel(), np.linspace(0, 1e-3, 11), 500, stream(1, "coherence", 0))
    path = tmp_path / "decay.csv"
    curve.to_csv(path)
    back = DecayCurve.from_csv(path)
    np.testing.assert_array_equal(back.signal, curve.signal)
    np.testing.assert_array_equal(back.sigma, curve.sigma)


@given(values=st.lists(st.floats(1e-5, 3e-3), min_size=1, max_size=40), threshold=st.floats(1e-4, 2e-3))
def test_survey_tally_counts_strictly_above(values, threshold):
    res = survey(values, [6.0] * len(values), threshold)
    assert res.n_above == sum(v > threshold for v in values)
    assert res.tally == f"{res.n_above}/{len(values)}"
    assert res.counts.sum() == len(values)


def test_survey_reports_empty_layers_and_alignment():
    res = survey([6e-4, 4e-4], [6.0, 9.0], layers=[6.0, 9.0, 12.0])
    assert res.layers == [6.0, 9.0, 12.0] and res.counts[2].sum() == 0
    with pytest.raises(ValueError):
        survey([6e-4], [6.0, 9.0])


def test_default_bath_gives_calibrated_hahn_decay():
    t = np.linspace(0, 2.5 * 690e-6, 40)
    w = coherence_signal(PulseSequence.hahn(), t, NoiseModel())
    f = fit_stretched_exp(DecayCurve(t, w, np.full_like(w, 1e-3)))
    assert f.T2 == pytest.approx(690e-6, rel=1e-3)
    assert f.n == pytest.approx(2.0, rel=1e-3)
