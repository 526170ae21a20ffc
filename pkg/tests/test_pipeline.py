import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sstats

from dcsqz.errors import DataError, EmptySelectionError, LowCorrelationError
from dcsqz.pipeline import (
    PipelineOptions,
    align_records,
    analytic_signal,
    analyze,
    bin_by_ceo,
    ceo_phase,
    default_band,
    ensemble_sigma,
    moving_average,
    phase_axis,
    phase_histogram,
    reduce_channels,
    squeezing_factor,
    sum_diff,
    wrap_pi,
)
from dcsqz.synth import AcqConfig, CombConfig, filtered_variance, sample_times, synthesize_ensemble

from conftest import roll_to


def gauss_burst(n=1024, center=512, width=40.0, period=16.0, phase=0.0):
    k = np.arange(n)
    env = np.exp(-0.5 * ((k - center) / width) ** 2)
    return env, env * np.cos(2 * np.pi * k / period + phase)


class TestAnalyticSignal:
    def test_sinusoid(self):
        k = np.arange(1024)
        s = analytic_signal(np.cos(2 * np.pi * k / 32))
        assert np.allclose(s.envelope, 1.0, atol=1e-9)
        assert np.allclose(np.diff(s.phase), 2 * np.pi / 32, atol=1e-9)

    def test_gaussian_envelope(self):
        env, x = gauss_burst()
        s = analytic_signal(x)
        core = env > 0.01
        assert np.max(np.abs(s.envelope[core] - env[core]) / env[core]) < 0.01
        assert s.peak_index == 512

    @pytest.mark.parametrize("phase", [-2.5, -0.4, 0.0, 1.1, 3.0])
    def test_phase_offset(self, phase):
        _, x = gauss_burst(phase=phase)
        s = analytic_signal(x)
        assert s.carrier_phase_at_peak == pytest.approx(phase, abs=1e-6)
        assert s.phase[512] == pytest.approx(phase, abs=1e-6)

    def test_odd_and_short_inputs(self):
        k = np.arange(41)
        s = analytic_signal(np.cos(2 * np.pi * k / 8))
        assert len(s.envelope) == 41

    def test_wrap_range(self):
        x = np.linspace(-20, 20, 1001)
        w = wrap_pi(x)
        assert np.all((w >= -np.pi) & (w < np.pi))
        assert np.allclose(np.exp(1j * w), np.exp(1j * x))


class TestAlignment:
    def test_self(self):
        env, _ = gauss_burst()
        a = align_records([env, env])
        assert list(a.shifts) == [0, 0]

    def test_known_shift(self):
        env, _ = gauss_burst()
        a = align_records([env, np.roll(env, 37)])
        assert a.shifts[1] == -37

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-200, 200), min_size=2, max_size=6))
    def test_random_shifts(self, lags):
        env, _ = gauss_burst()
        envs = [np.roll(env, k) for k in lags]
        a = align_records(envs)
        for e, s in zip(envs, a.shifts):
            assert np.allclose(np.roll(e, s), envs[0])

    def test_idempotent(self):
        env, _ = gauss_burst()
        envs = [np.roll(env, k) for k in (5, -9, 30)]
        a = align_records(envs)
        again = align_records([np.roll(e, s) for e, s in zip(envs, a.shifts)])
        assert list(again.shifts) == [0, 0, 0]

    def test_low_correlation(self):
        env, _ = gauss_burst()
        noise = np.random.default_rng(0).standard_normal(1024)
        a = align_records([env, env, noise], min_corr=0.5)
        assert a.rejected == [2]
        assert list(a.accepted) == [0, 1]
        with pytest.raises(LowCorrelationError):
            align_records([env, noise], min_corr=0.5, strict=True)

    def test_needs_two(self):
        with pytest.raises(DataError):
            align_records([np.ones(8)])

    def test_synth_shifts_recovered(self, default_ensemble, default_stats):
        true = np.array([r.true_shift for r in default_ensemble.records])
        assert np.array_equal(default_stats.shifts, true[0] - true)


class TestCeo:
    def test_noise_free_recovery(self, noise_free_ensemble):
        ens = noise_free_ensemble
        band = default_band(ens.comb, ens.acq)
        for r in ens.records:
            got = ceo_phase(r.igm_samples, -r.true_shift, None, ens.acq.sample_rate, band)
            assert abs(wrap_pi(got - r.ceo_phase)) < 5e-3

    def test_uniform_binning(self):
        ph = np.random.default_rng(1).uniform(-np.pi, np.pi, 730)
        sel = bin_by_ceo(ph, 0.05)
        # densest of ~6 expected per window; a few more from picking the best
        assert 4 <= len(sel) <= 16
        assert np.ptp(np.unwrap(ph[sel])) <= 0.05

    def test_clusters(self):
        ph = np.r_[np.full(10, 0.5), np.full(4, -1.0), np.full(7, 2.0)]
        assert list(bin_by_ceo(ph, 0.05)) == list(range(10))

    def test_wraparound_cluster(self):
        ph = np.array([3.13, -3.13, 3.14, 0.0])
        assert list(bin_by_ceo(ph, 0.05)) == [0, 1, 2]

    def test_tie_break_lower_mean_index(self):
        ph = np.array([0.0, 1.0, 0.0, 1.0, 2.0, 2.0])
        assert list(bin_by_ceo(ph, 0.05)) == [0, 2]

    def test_nearest(self):
        ph = np.array([0.0, 0.02, 0.5, -0.03])
        assert list(bin_by_ceo(ph, 0.05, "nearest", 0.0)) == [0, 1]

    def test_empty(self):
        with pytest.raises(EmptySelectionError):
            bin_by_ceo([1.0, 2.0], 0.05, "nearest", -1.0)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            bin_by_ceo([0.0], 0.0)
        with pytest.raises(ValueError):
            bin_by_ceo([0.0], 0.1, "widest")

    def test_uniform_ensemble_selects_subset(self):
        comb = CombConfig(ceo_phase_model="uniform")
        ens = synthesize_ensemble(comb, AcqConfig(n_igms=300, seed=5), jobs=4)
        st_ = analyze(ens, PipelineOptions(ceo_window=0.2))
        picked = np.array([ens.records[i].ceo_phase for i in st_.selected])
        assert 5 <= st_.n_records < 60
        assert np.ptp(np.unwrap(picked)) < 0.2 + 0.05


class TestStatistics:
    def test_ensemble_sigma(self):
        m = np.array([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]])
        assert np.allclose(ensemble_sigma(m), [2.0, 0.0])
        with pytest.raises(DataError):
            ensemble_sigma(m[:1])

    def test_squeezing_factor(self):
        v, db = squeezing_factor(2.0, 3.0, 1.0)
        assert v == pytest.approx(0.5)
        assert db == pytest.approx(-3.0103, abs=1e-4)
        with pytest.raises(ValueError):
            squeezing_factor(2.0, 1.0, 1.0)

    def test_squeezing_factor_array(self):
        v, db = squeezing_factor(np.array([1.0, 4.0]), 2.0, 0.0)
        assert np.allclose(v, [0.5, 2.0])

    def test_moving_average(self):
        x = np.arange(10.0)
        assert np.array_equal(moving_average(x, 1), x)
        y = moving_average(x, 3)
        assert y[5] == pytest.approx(5.0)
        assert y[0] == pytest.approx((9 + 0 + 1) / 3)
        with pytest.raises(ValueError):
            moving_average(x, 4)

    def test_sum_diff(self):
        a, b = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        s, d = sum_diff(a, b)
        assert np.array_equal(s, [1.5, 1.0]) and np.array_equal(d, [0.5, 3.0])
        with pytest.raises(DataError):
            sum_diff(a, np.ones(3))


class TestPhaseAxis:
    def test_constant_offsets_average(self):
        k = np.arange(512.0)
        base = 2 * np.pi * k / 20
        phases = np.array([base + 0.1, base - 0.1, base])
        assert np.allclose(wrap_pi(phase_axis(phases) - base), 0, atol=1e-12)

    def test_tracks_overlap_phase(self):
        comb = CombConfig(ceo_phase_model="listed", ceo_phases=(0.0,))
        ens = synthesize_ensemble(comb, AcqConfig(n_igms=6, noise_free=True, seed=3))
        opts = PipelineOptions(igm_band=default_band(comb, ens.acq), ceo_select=False)
        red = reduce_channels([r.igm_samples for r in ens.records],
                              [r.ngm_samples for r in ens.records], ens.acq.sample_rate, opts)
        phi = phase_axis(red["phases"])
        g = roll_to(ens.truth.gamma_of_t, ens)
        core = np.abs(g) > 0.05 * np.abs(g).max()
        # carrier 2 pi f t plus the CEO offset, within the analytic-signal ringing
        assert np.max(np.abs(wrap_pi(phi - np.angle(g))[core])) < 0.02
        t = roll_to(sample_times(ens.acq), ens)
        slope = np.polyfit(t[core], phi[core], 1)[0]
        assert slope == pytest.approx(2 * np.pi * comb.igm_carrier, rel=1e-3)


class TestHistogram:
    def test_marginals(self):
        rng = np.random.default_rng(3)
        ngm = rng.standard_normal((200, 50))
        h = phase_histogram(ngm, np.linspace(0, 1, 50), bins=(None, 32))
        assert h.counts.shape == (50, 32)
        assert np.all(h.counts.sum(axis=1) == 200)

    def test_binned_phase(self):
        rng = np.random.default_rng(3)
        ngm = rng.standard_normal((100, 64))
        h = phase_histogram(ngm, np.linspace(0, 2, 64), bins=(16, 32))
        assert h.counts.sum() == 6400
        assert len(h.phase_edges) == 17

    def test_single_row(self):
        h = phase_histogram(np.zeros((1, 20)), np.arange(20.0), bins=(None, 16))
        assert h.counts.sum() == 20

    def test_min_bins(self):
        with pytest.raises(ValueError):
            phase_histogram(np.zeros((2, 4)), np.arange(4.0), bins=(None, 8))


class TestEndToEnd:
    def test_variance_matches_truth(self, default_ensemble, default_stats):
        ens, stt = default_ensemble, default_stats
        n = stt.n_records
        truth = roll_to(ens.truth.ngm_variance, ens)
        ratio = stt.sigma_ngm**2 / truth
        lo, hi = sstats.chi2.ppf([0.005, 0.995], n - 1) / (n - 1)
        assert np.mean((ratio < lo) | (ratio > hi)) < 0.02
        assert ratio.mean() == pytest.approx(1.0, abs=0.01)

    def test_snl_segment_is_zero_db(self, default_stats):
        seg = default_stats.v_sqz_db[default_stats.snl_mask]
        assert np.mean(seg) == pytest.approx(0.0, abs=0.2)

    def test_floor_from_dark(self, default_ensemble, default_stats):
        assert default_stats.sigma_floor**2 == pytest.approx(
            default_ensemble.truth.floor_ngm_variance, rel=0.05)

    def test_fixed_ceo_keeps_all(self, default_stats):
        assert default_stats.n_records == 500
        assert default_stats.rejected == []

    def test_balanced_mode(self):
        ens = synthesize_ensemble(CombConfig(), AcqConfig(n_igms=200, seed=4, detector_mode="dual_balanced"),
                                  jobs=4)
        stt = analyze(ens)
        t = ens.truth
        cal = ens.calibration
        scale = (cal.volts_per_photon * cal.ngm_gain) ** 2
        elec = 2 * t.floor_ngm_variance
        # the sum sees the full optical variance, the difference only the shot noise
        total = roll_to(scale * filtered_variance(t.model_variance_of_t, ens.acq) + elec, ens)
        shot = roll_to(scale * filtered_variance(t.mean_of_t, ens.acq) + elec, ens)
        assert np.mean(stt.sigma_ngm**2 / total) == pytest.approx(1.0, abs=0.03)
        assert np.mean(stt.sigma_diff**2 / shot) == pytest.approx(1.0, abs=0.03)
        assert stt.v_sqz_db.min() < -2.0

    def test_noise_free_degenerate(self, noise_free_ensemble):
        with pytest.raises(ValueError):
            analyze(noise_free_ensemble, PipelineOptions(ceo_select=False))

    def test_jobs_do_not_change_result(self, default_ensemble, default_stats):
        sub = synthesize_ensemble(CombConfig(), AcqConfig(n_igms=40, seed=7))
        a = analyze(sub, PipelineOptions(jobs=1))
        b = analyze(sub, PipelineOptions(jobs=4))
        assert np.array_equal(a.sigma_ngm, b.sigma_ngm)
        assert np.array_equal(a.phi_axis, b.phi_axis)
