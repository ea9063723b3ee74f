import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvarrays.fit import numerical_jacobian
from nvarrays.imaging import (ConfocalVolume, Localization, PSFModel, VolumeSpec, expected_counts, localize,
                              precision_report, render_scan, write_residuals_csv)
from nvarrays.imaging import _GaussFit

CENTRE = (10.0, 10.0, 10.0)
SPEC = VolumeSpec.centred(CENTRE, dims=(15, 15, 25))


def test_expected_counts_peak_and_background():
    psf = PSFModel(peak_rate=1e5, background_rate=1e3)
    spec = VolumeSpec.centred(CENTRE, dims=(5, 5, 5))
    mu = expected_counts([CENTRE], psf, spec)
    assert mu[2, 2, 2] == pytest.approx((1e5 + 1e3) * spec.dwell_time)
    assert mu.min() > 1e3 * spec.dwell_time


@settings(max_examples=15, deadline=None)
@given(dx=st.floats(-150, 150), dy=st.floats(-150, 150), dz=st.floats(-500, 500))
def test_noiseless_fit_is_exact(dx, dy, dz):
    emitter = np.array(CENTRE) + np.array([dx, dy, dz]) / 1000.0
    clean = render_scan([emitter], PSFModel(peak_rate=1e5, background_rate=1e3), SPEC, None, noise=False)
    loc = localize(clean, CENTRE)
    assert loc.converged
    np.testing.assert_allclose(loc.position, emitter * 1000.0, atol=1e-3)


def test_fitted_widths_and_rates_recovered_at_high_counts():
    psf = PSFModel(peak_rate=2e6, background_rate=2e4)
    vol = render_scan([CENTRE], psf, SPEC, np.random.default_rng(1))
    loc = localize(vol, CENTRE)
    assert loc.sigma_xy == pytest.approx(psf.sigma_xy, rel=0.03)
    assert loc.sigma_z == pytest.approx(psf.sigma_z, rel=0.03)
    assert loc.amplitude == pytest.approx(psf.peak_rate * SPEC.dwell_time, rel=0.03)


def test_low_count_poisson_path_converges():
    psf = PSFModel(peak_rate=3e3, background_rate=50.0)
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(20):
        loc = localize(render_scan([CENTRE], psf, SPEC, rng), CENTRE)
        assert loc.converged, loc.message
        errs.append(loc.position - np.array(CENTRE) * 1000)
    assert np.all(np.abs(np.mean(errs, axis=0)) < np.array([40, 40, 200]))


def test_reported_covariance_matches_scatter():
    psf = PSFModel(peak_rate=2e4, background_rate=500.0)
    rng = np.random.default_rng(3)
    locs = [localize(render_scan([CENTRE], psf, SPEC, rng), CENTRE, fit_sigmas=False) for _ in range(150)]
    scatter = np.std([l.position for l in locs], axis=0)
    predicted = np.sqrt(np.median([np.diag(l.covariance) for l in locs], axis=0))
    np.testing.assert_allclose(predicted, scatter, rtol=0.25)


@pytest.mark.parametrize("fit_sigmas", [True, False])
def test_jacobian_matches_finite_differences(fit_sigmas):
    vol = render_scan([CENTRE], PSFModel(peak_rate=5e4, background_rate=500.0), SPEC, np.random.default_rng(4))
    problem = _GaussFit(vol, np.array(CENTRE) * 1000.0, fit_sigmas, (140.0, 650.0))
    p = [12.0, -8.0, 40.0, np.log(60.0), np.log(1.5)] + ([np.log(130.0), np.log(700.0)] if fit_sigmas else [])
    p = np.array(p)
    Ja = problem.jacobian(p)
    Jn = numerical_jacobian(problem.residual, p)
    assert np.max(np.abs(Ja - Jn)) <= 1e-5 * np.max(np.abs(Jn))


def test_localize_preconditions():
    zeros = ConfocalVolume(SPEC, np.zeros(SPEC.dims, dtype=np.int64))
    with pytest.raises(ValueError):
        localize(zeros, CENTRE)
    vol = render_scan([CENTRE], PSFModel(), SPEC, np.random.default_rng(0))
    with pytest.raises(ValueError):
        localize(vol, (50.0, 50.0, 50.0))


def test_emitters_outside_volume_are_flagged():
    vol = render_scan([CENTRE, (30.0, 10.0, 10.0)], PSFModel(), SPEC, np.random.default_rng(0))
    assert vol.meta["clipped_emitters"] == [1] and vol.meta["n_emitters"] == 2


def test_volume_save_load_round_trip(tmp_path):
    vol = render_scan([CENTRE], PSFModel(), SPEC, np.random.default_rng(5), seed=5)
    vol.save(tmp_path / "scan")
    back = ConfocalVolume.load(tmp_path / "scan")
    np.testing.assert_array_equal(back.counts, vol.counts)
    assert back.spec == vol.spec and back.meta["seed"] == 5


def _loc(position_nm) -> Localization:
    return Localization(np.asarray(position_nm, float), np.eye(3), 1.0, 0.0, 100.0, 500.0, True, "", 1, 0.0)


def test_precision_report_raw_and_registered():
    rng = np.random.default_rng(6)
    targets = rng.uniform(0, 60, (40, 3))
    # a global shift plus a small scale error is removed by the affine registration
    fitted = (targets * 1.001 + np.array([0.05, -0.02, 0.1])) * 1000.0
    rep = precision_report([_loc(f) for f in fitted], targets)
    assert np.all(rep.registered_std < 1e-6)
    assert np.all(rep.std > 1.0)
    assert sum(rep.histograms["x"][1]) == 40


def test_precision_report_errors_and_csv():
    with pytest.raises(ValueError):
        precision_report([_loc([0, 0, 0])], [[0, 0, 0], [1, 1, 1]])
    with pytest.raises(ValueError):
        precision_report([], [])
    rep = precision_report([_loc([1.0, 2.0, 3.0])], [[0, 0, 0]], site_ids=["S-1"])
    assert write_residuals_csv(rep).splitlines() == ["site_id,dx_nm,dy_nm,dz_nm", "S-1,1.0,2.0,3.0"]


def test_volume_spec_validation():
    with pytest.raises(ValueError):
        VolumeSpec((0.0, 0.0, 0.0), dims=(0, 5, 5))
    with pytest.raises(ValueError):
        PSFModel(sigma_xy=0.0)
