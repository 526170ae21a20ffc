import numpy as np
import pytest

from dcsqz.errors import DataError
from dcsqz.fit import (
    Amplitudes,
    FitOptions,
    FitParams,
    STATS_FIXED,
    fit_stats,
    fit_variance_model,
    harmonic_extrema,
    model_sigma_trace,
    model_variance,
    power_scan,
    reference_scan,
)
from dcsqz.gaussian import QuantumParams, SqueezeSpec, photon_moments
from dcsqz.pipeline import analyze
from dcsqz.synth import AcqConfig, CombConfig, calibrate, overlap_trace, synthesize_ensemble


@pytest.fixture(scope="module")
def setup():
    comb, acq = CombConfig(), AcqConfig()
    cal = calibrate(comb, acq)
    g = overlap_trace(comb, acq)
    amps = Amplitudes(cal.alpha, cal.beta, 0.35 * np.abs(g), 1e-4)
    return np.unwrap(np.angle(g)), amps


TRUE = FitParams(0.8, 0.4, 0.35, 1.0, 0.01)


def test_model_variance_matches_closed_form(setup):
    phi, amps = setup
    v = model_variance(TRUE, phi[:5], Amplitudes(amps.alpha, amps.beta, amps.eta_gamma[:5], 1.0))
    q = QuantumParams(amps.alpha * np.exp(1j * phi[:5]), amps.beta, SqueezeSpec(0.8, 0.4),
                      amps.eta_gamma[:5] / 0.35, 0.35)
    assert np.allclose(v, photon_moments(q).variance, rtol=1e-12)


def test_noise_free_recovery(setup):
    phi, amps = setup
    res = fit_variance_model(phi, model_sigma_trace(TRUE, phi, amps), amps)
    assert res.converged
    assert res.r_hat == pytest.approx(0.8, rel=0.05)
    assert res.phi_hat == pytest.approx(0.4, rel=0.05)
    assert res.eta_hat == pytest.approx(0.35, rel=0.05)


def test_cost_history_monotone(setup):
    phi, amps = setup
    res = fit_variance_model(phi, model_sigma_trace(TRUE, phi, amps), amps,
                             initial=FitParams(0.3, 0.9, 0.6, 1.0, 0.02))
    h = res.cost_history
    assert len(h) > 1
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_phi_is_mod_pi(setup):
    phi, amps = setup
    obs = model_sigma_trace(TRUE, phi, amps)
    a = fit_variance_model(phi, obs, amps, initial=FitParams(0.6, 0.4, 0.5, 1.0, 0.01))
    b = fit_variance_model(phi, obs, amps, initial=FitParams(0.6, 0.4 + np.pi, 0.5, 1.0, 0.01))
    assert -np.pi / 2 <= b.phi_hat < np.pi / 2
    assert b.phi_hat == pytest.approx(a.phi_hat, abs=1e-4)
    assert b.r_hat == pytest.approx(a.r_hat, abs=1e-4)


def test_r_zero_guard(setup):
    phi, amps = setup
    obs = model_sigma_trace(FitParams(0.0, 0.4, 0.35, 1.0, 0.01), phi, amps)
    res = fit_variance_model(phi, obs, amps, opts=FitOptions(fixed=STATS_FIXED),
                             initial=[FitParams(r, 0.0, 0.5, 1.0, 0.01) for r in (0.05, 0.3)])
    assert res.r_hat < 0.02
    # without squeezing the angle is undetermined
    assert res.uncertainty["phi"] > 0.5


def test_fixed_parameters_stay(setup):
    phi, amps = setup
    obs = model_sigma_trace(TRUE, phi, amps)
    res = fit_variance_model(phi, obs, amps, initial=FitParams(0.5, 0.2, 0.5, 1.0, 0.01),
                             opts=FitOptions(fixed=("gamma_scale", "floor")))
    assert (res.gamma_scale_hat, res.floor_hat) == (1.0, 0.01)
    assert res.uncertainty["floor"] == 0.0


def test_too_few_points(setup):
    phi, amps = setup
    small = Amplitudes(amps.alpha, amps.beta, amps.eta_gamma[2000:2030], 1e-4)
    obs = model_sigma_trace(TRUE, phi[2000:2030], small)
    with pytest.raises(DataError):
        fit_variance_model(phi[2000:2030], obs, small)


def test_non_finite_rejected(setup):
    phi, amps = setup
    obs = model_sigma_trace(TRUE, phi, amps)
    obs[10] = np.nan
    with pytest.raises(DataError):
        fit_variance_model(phi, obs, amps)


def test_to_dict_is_plain(setup):
    phi, amps = setup
    res = fit_variance_model(phi, model_sigma_trace(TRUE, phi, amps), amps, initial=TRUE)
    d = res.to_dict()
    assert set(d) >= {"r_hat", "phi_hat", "eta_hat", "uncertainty", "converged"}


def test_harmonic_extrema():
    phi = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    assert harmonic_extrema(phi, np.cos(phi)) == 2
    assert harmonic_extrema(phi, np.cos(2 * phi) + 0.1 * np.cos(phi)) == 4


@pytest.mark.slow
def test_noisy_recovery():
    comb = CombConfig(r=0.8, eta=0.35, phi_policy="explicit", phi=0.4)
    acq = AcqConfig(n_igms=500, seed=1)
    ens = synthesize_ensemble(comb, acq, jobs=4)
    res = fit_stats(analyze(ens), ens.calibration, acq)
    assert res.r_hat == pytest.approx(0.8, rel=0.15)
    assert res.phi_hat == pytest.approx(ens.calibration.phi, rel=0.15)
    assert res.eta_hat == pytest.approx(0.35, rel=0.15)


def test_noisy_coherent(coherent_ensemble):
    ens = coherent_ensemble
    res = fit_stats(analyze(ens), ens.calibration, ens.acq)
    assert res.r_hat < 0.1
    assert res.eta_hat == pytest.approx(0.6, rel=0.1)


@pytest.fixture(scope="module")
def scan():
    comb = CombConfig(eta=0.6, r=3.0, power_sqz=14.7e-3)
    return comb, power_scan(comb, AcqConfig(n_igms=60, seed=1), [0.0, 50e-6, 570e-6], jobs=3)


class TestScan:
    def test_zero_power_row_flagged(self, scan):
        _, res = scan
        assert res.rows[0].error
        assert res.rows[0].fit is None
        assert not res.rows[1].error and not res.rows[2].error

    def test_model_counts_match_reference(self, scan):
        comb, res = scan
        ref = reference_scan(comb, AcqConfig(), [50e-6, 570e-6])
        assert [c for _, c in ref] == [r.extrema_count_model for r in res.rows[1:]]

    def test_rows_are_ordered_by_power(self, scan):
        _, res = scan
        assert [r.power for r in res.rows] == [0.0, 50e-6, 570e-6]
        assert res.rows[2].max_db > res.rows[1].max_db

    def test_powers_ascending(self):
        with pytest.raises(ValueError):
            power_scan(CombConfig(), AcqConfig(n_igms=4), [2e-4, 1e-4])

    def test_seed_per_row(self):
        comb = CombConfig()
        acq = AcqConfig(n_igms=20, seed=2)
        a = power_scan(comb, acq, [100e-6, 200e-6], jobs=1)
        b = power_scan(comb, acq, [100e-6, 200e-6], jobs=2)
        assert [r.max_db for r in a.rows] == [r.max_db for r in b.rows]
        assert [r.fit.r_hat for r in a.rows] == [r.fit.r_hat for r in b.rows]
