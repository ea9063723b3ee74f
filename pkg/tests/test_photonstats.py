import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvarrays.photonstats import (THRESHOLDS, EmitterClass, EmitterModel, PhotonStream, background_corrected,
                                  classify, estimate_g2_zero, g2_histogram, ideal_g2_zero, multiplicity_report,
                                  simulate_stream)
from nvarrays.photonstats import _delay_counts
from nvarrays.runtime import stream

ORDER = [EmitterClass.SINGLE, EmitterClass.DOUBLE, EmitterClass.TRIPLE, EmitterClass.UNRESOLVED]


@given(a=st.floats(0, 5), b=st.floats(0, 5))
def test_classification_is_monotone_in_g2(a, b):
    lo, hi = sorted((a, b))
    assert ORDER.index(classify(lo).label) <= ORDER.index(classify(hi).label)


@pytest.mark.parametrize("edge", THRESHOLDS)
def test_threshold_edges_belong_to_the_upper_class(edge):
    assert ORDER.index(classify(edge).label) == ORDER.index(classify(np.nextafter(edge, 0)).label) + 1


def test_classify_rejects_negative_and_nan():
    for bad in (-0.01, float("nan")):
        with pytest.raises(ValueError):
            classify(bad)


@given(k=st.integers(1, 10), rho=st.floats(0.05, 1.0))
def test_background_correction_inverts_ideal_value(k, rho):
    assert background_corrected(ideal_g2_zero(k, rho), rho) == pytest.approx(1 - 1 / k)


def test_multiplicity_report_fractions():
    rep = multiplicity_report([classify(0.1), classify(0.2), classify(0.55), classify(0.9)])
    assert rep["counts"] == {"Single": 2, "Double": 1, "Triple": 0, "Unresolved": 1}
    assert sum(rep["fractions"].values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        multiplicity_report([])


@settings(max_examples=25)
@given(a=st.lists(st.floats(0, 500), max_size=40), b=st.lists(st.floats(0, 500), max_size=40),
       half=st.integers(1, 6), width=st.floats(0.5, 20))
def test_delay_counts_match_brute_force(a, b, half, width):
    a, b = np.sort(a), np.sort(b)
    expected = np.zeros(2 * half + 1, dtype=int)
    for ta in a:
        for tb in b:
            k = int(np.floor((tb - ta) / width + 0.5))
            if abs(k) <= half:
                expected[k + half] += 1
    np.testing.assert_array_equal(_delay_counts(a, b, half, width, chunk=7), expected)


def test_uncorrelated_light_has_flat_g2():
    s = simulate_stream(EmitterModel(k=0, background_rate=2e5), 20.0, stream(1, "hbt", 0))
    h = g2_histogram(s, 2.0, 100.0)
    assert abs(h.g2.mean() - 1) < 0.01
    est = estimate_g2_zero(h, dip_model_fit=False)
    assert abs(est.g2_zero - 1) < 4 * est.g2_zero_err


def test_both_orders_histogram_is_symmetric():
    s = simulate_stream(EmitterModel(k=1), 2.0, stream(1, "hbt", 1))
    h = g2_histogram(s, 1.0, 40.0, both_orders=True)
    np.testing.assert_array_equal(h.raw_counts, h.raw_counts[::-1])


def test_single_emitter_is_antibunched():
    model = EmitterModel(k=1)
    s = simulate_stream(model, 10.0, stream(1, "hbt", 2))
    est = estimate_g2_zero(g2_histogram(s, 1.0, 150.0), tau0_guess=model.tau0)
    assert est.method == "dip_fit" and not est.fell_back
    assert est.g2_zero < 0.1
    assert est.tau0 == pytest.approx(model.tau0, rel=0.15)


def test_detected_rate_is_respected():
    model = EmitterModel(k=2, detected_rate=5e4, background_rate=1e4)
    s = simulate_stream(model, 5.0, stream(1, "hbt", 3))
    rate = s.n_photons / 5.0
    expected = 2 * 5e4 + 1e4
    assert abs(rate - expected) < 5 * np.sqrt(expected / 5.0)


def test_dead_time_removes_close_pairs():
    s = simulate_stream(EmitterModel(k=0, background_rate=1e6, dead_time=50.0), 0.5, stream(1, "hbt", 4))
    for det in (s.detector_a, s.detector_b):
        assert np.all(np.diff(det) >= 50.0)


def test_stream_save_load_round_trip(tmp_path):
    s = simulate_stream(EmitterModel(k=1), 0.1, stream(2, "hbt", 0))
    s.save(tmp_path / "stream")
    loaded = PhotonStream.load(tmp_path / "stream")
    np.testing.assert_array_equal(loaded.detector_a, s.detector_a)
    np.testing.assert_array_equal(loaded.detector_b, s.detector_b)
    assert loaded.duration == s.duration and loaded.meta == s.meta


@pytest.mark.parametrize("kwargs", [dict(k=-1), dict(emission_lifetime=0.0), dict(detected_rate=1e9),
                                    dict(background_rate=-1.0)])
def test_emitter_model_invariants(kwargs):
    with pytest.raises(ValueError):
        EmitterModel(**kwargs)


def test_histogram_input_checks():
    s = simulate_stream(EmitterModel(k=1), 0.01, stream(3, "hbt", 0))
    with pytest.raises(ValueError):
        g2_histogram(s, 0.0, 10.0)
    with pytest.raises(ValueError):
        g2_histogram(s, 5.0, 1.0)
    with pytest.raises(ValueError):
        g2_histogram(PhotonStream(1e6, np.array([1.0]), np.zeros(0)), 1.0, 10.0)
