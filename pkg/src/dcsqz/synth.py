"""Synthetic dual-comb interferogram (IGM) and noise-gram (NGM) ensembles.

Each ADC sample is one detection bin. Its photon count is drawn from a normal
distribution with the mean and variance of :func:`dcsqz.gaussian.photon_moments`,
using the mode overlap of the two pulse trains at that instant. The stream is
converted to volts, electrical noise is added, and zero-phase brick-wall
filters split it into the IGM channel (low-pass) and the NGM channel
(low-pass then high-pass, then amplified). Both channels are quantised.

Records are generated independently from per-record child seeds, so results
do not depend on worker count or scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import constants

from .errors import ClippingError, ConfigError
from .gaussian import QuantumParams, SqueezeSpec, kerr_squeeze_angle, photon_moments

CEO_MODELS = ("fixed", "uniform", "normal", "listed")
CLIP_LIMIT = 1e-3


def photons_per_pulse(power, f_rep, wavelength):
    """Mean photon number per pulse, P / (f_rep h c / lambda)."""
    return power / (f_rep * constants.h * constants.c / wavelength)


@dataclass(frozen=True)
class CombConfig:
    f_rep: float = 1e9
    delta_f_rep: float = 700.0
    igm_carrier: float = 3e6
    pulse_fwhm: float = 260e-15
    lambda_center: float = 1.563e-6
    power_sqz: float = 14.6e-3
    power_coh: float = 170e-6
    gamma_max: float = 0.82
    ceo_phase_model: str = "fixed"
    ceo_phase: float = 0.0
    ceo_spread: float = 0.0
    ceo_phases: tuple = ()
    eta: float = 0.6
    r: float = 2.18
    phi_policy: str = "kerr"
    phi: float = 0.0

    def __post_init__(self):
        if not self.delta_f_rep < 1e-3 * self.f_rep:
            raise ConfigError("delta_f_rep must be much smaller than f_rep")
        if not 0 < self.igm_carrier < self.f_rep / 2:
            raise ConfigError("igm_carrier must lie in (0, f_rep/2)")
        if self.power_sqz <= 0 or self.power_coh < 0:
            raise ConfigError("powers must be positive")
        if not 0 <= self.gamma_max <= 1:
            raise ConfigError("gamma_max must lie in [0, 1]")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if self.r < 0:
            raise ConfigError("r must be non-negative")
        if self.ceo_phase_model not in CEO_MODELS:
            raise ConfigError(f"ceo_phase_model must be one of {CEO_MODELS}")
        if self.ceo_phase_model == "listed" and not self.ceo_phases:
            raise ConfigError("listed CEO model needs ceo_phases")
        if self.phi_policy not in ("kerr", "explicit"):
            raise ConfigError("phi_policy must be 'kerr' or 'explicit'")
        object.__setattr__(self, "ceo_phases", tuple(float(x) for x in self.ceo_phases))

    @property
    def sigma_tau(self) -> float:
        """RMS width of the Gaussian pulse cross-correlation (seconds of optical delay)."""
        return self.pulse_fwhm * math.sqrt(2) / (2 * math.sqrt(2 * math.log(2)))

    @property
    def magnification(self) -> float:
        return self.f_rep / self.delta_f_rep

    @property
    def envelope_sigma_lab(self) -> float:
        """Centerburst RMS width in laboratory time."""
        return self.sigma_tau * self.magnification


@dataclass(frozen=True)
class AcqConfig:
    sample_rate: float = 5e8
    n_igms: int = 730
    record_length: int = 4096
    lpf_cutoff: float = 225e6
    hpf_cutoff: float = 25e6
    adc_bits: int = 12
    full_scale: float = 1.0
    volts_per_photon: float | None = None
    ngm_gain: float | None = None
    noise_floor_sigma: float | None = None
    detector_mode: str = "single"
    seed: int = 0
    max_shift: int = 64
    noise_free: bool = False
    exact_poisson: bool = False
    dark_length: int = 16384

    def __post_init__(self):
        if not 0 < self.hpf_cutoff < self.lpf_cutoff < self.sample_rate / 2:
            raise ConfigError("need 0 < hpf_cutoff < lpf_cutoff < sample_rate/2")
        if self.record_length < 64 or self.record_length % 2:
            raise ConfigError("record_length must be even and >= 64")
        if self.n_igms < 1:
            raise ConfigError("n_igms must be positive")
        if self.detector_mode not in ("single", "dual_balanced"):
            raise ConfigError("detector_mode must be 'single' or 'dual_balanced'")
        if not 2 <= self.adc_bits <= 24:
            raise ConfigError("adc_bits must lie in [2, 24]")
        if not 0 <= self.max_shift < self.record_length // 4:
            raise ConfigError("max_shift must lie in [0, record_length/4)")

    @property
    def channels(self) -> tuple[str, ...]:
        if self.detector_mode == "single":
            return ("igm", "ngm")
        return ("igm_a", "ngm_a", "igm_b", "ngm_b")


@dataclass(frozen=True)
class Calibration:
    """Quantities derived from the two configs that every stage needs."""

    photons_beta: float
    photons_alpha: float
    phi: float
    volts_per_photon: float
    ngm_gain: float
    noise_floor_sigma: float
    lsb: float
    pulses_per_bin: float

    @property
    def beta(self) -> float:
        return math.sqrt(self.photons_beta)

    @property
    def alpha(self) -> float:
        return math.sqrt(self.photons_alpha)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IgmRecord:
    igm_samples: np.ndarray
    ngm_samples: np.ndarray
    ceo_phase: float
    record_index: int
    true_shift: int = 0


@dataclass
class EnsembleTruth:
    """Noise-free reference traces on the unshifted time axis.

    ``model_variance_of_t`` and ``snl_of_t`` are in photons^2 per bin (total
    over both detectors in balanced mode). ``ngm_variance`` and
    ``snl_ngm_variance`` are the matching expected variances of one NGM
    channel in volts^2 after filtering, gain and electrical noise.
    """

    t: np.ndarray
    gamma_of_t: np.ndarray
    mean_of_t: np.ndarray
    snl_of_t: np.ndarray
    model_variance_of_t: np.ndarray
    ngm_variance: np.ndarray
    snl_ngm_variance: np.ndarray
    floor_ngm_variance: float


@dataclass
class Ensemble:
    comb: CombConfig
    acq: AcqConfig
    calibration: Calibration
    records: list[IgmRecord]
    truth: EnsembleTruth
    dark: dict[str, np.ndarray]
    partners: list[IgmRecord] | None = None

    @property
    def detector_mode(self) -> str:
        return self.acq.detector_mode


def resolve_phi(comb: CombConfig) -> float:
    if comb.phi_policy == "explicit":
        return float(comb.phi)
    beta = math.sqrt(photons_per_pulse(comb.power_sqz, comb.f_rep, comb.lambda_center))
    return kerr_squeeze_angle(beta, comb.r)


def calibrate(comb: CombConfig, acq: AcqConfig) -> Calibration:
    if not acq.hpf_cutoff > 5 * comb.igm_carrier:
        raise ConfigError("hpf_cutoff must exceed 5 x igm_carrier")
    per_bin = comb.f_rep / acq.sample_rate
    nb = photons_per_pulse(comb.power_sqz, comb.f_rep, comb.lambda_center) * per_bin
    na = photons_per_pulse(comb.power_coh, comb.f_rep, comb.lambda_center) * per_bin
    split = 2.0 if acq.detector_mode == "dual_balanced" else 1.0
    peak = comb.eta * (nb + na + 2 * comb.gamma_max * math.sqrt(nb * na)) / split
    vpp = acq.volts_per_photon or 0.5 * acq.full_scale / peak
    snl_volts = math.sqrt(comb.eta * (nb + na) / split) * vpp
    floor = acq.noise_floor_sigma if acq.noise_floor_sigma is not None else 0.25 * snl_volts
    band = passband_fraction(acq)
    gain = acq.ngm_gain or (acq.full_scale / 16) / (
        math.sqrt(snl_volts**2 + floor**2) * math.sqrt(band)
    )
    return Calibration(
        photons_beta=nb,
        photons_alpha=na,
        phi=resolve_phi(comb),
        volts_per_photon=vpp,
        ngm_gain=gain,
        noise_floor_sigma=floor,
        lsb=2 * acq.full_scale / 2**acq.adc_bits,
        pulses_per_bin=per_bin,
    )


def sample_times(acq: AcqConfig, shift: int = 0) -> np.ndarray:
    k = np.arange(acq.record_length)
    return (k - acq.record_length // 2 - shift) / acq.sample_rate


def overlap_trace(
    comb: CombConfig, acq: AcqConfig, ceo_phase: float = 0.0, shift: int = 0
) -> np.ndarray:
    """Complex mode overlap gamma(t) across one record.

    The centerburst sits at sample ``record_length//2 + shift``. The lab-time
    delay maps to an optical delay through the factor delta_f_rep / f_rep.
    """
    t = sample_times(acq, shift)
    tau = t / comb.magnification
    env = comb.gamma_max * np.exp(-(tau**2) / (2 * comb.sigma_tau**2))
    return env * np.exp(1j * (2 * np.pi * comb.igm_carrier * t + ceo_phase))


def _masks(n: int, acq: AcqConfig):
    f = np.fft.rfftfreq(n, 1 / acq.sample_rate)
    low = f <= acq.lpf_cutoff
    ngm = low & (f >= acq.hpf_cutoff)
    return low, ngm


def band_split(x: np.ndarray, acq: AcqConfig):
    """Partition a real stream into (below hpf, hpf..lpf, above lpf) bands.

    The three parts sum to ``x``. The IGM channel is the first two added
    together; the NGM channel is the middle band.
    """
    spec = np.fft.rfft(x)
    low, ngm = _masks(len(x), acq)
    below = low & ~ngm
    parts = [np.fft.irfft(spec * m, len(x)) for m in (below, ngm, ~low)]
    return tuple(parts)


def lowpass(x: np.ndarray, acq: AcqConfig) -> np.ndarray:
    low, _ = _masks(len(x), acq)
    return np.fft.irfft(np.fft.rfft(x) * low, len(x))


def ngm_band(x: np.ndarray, acq: AcqConfig) -> np.ndarray:
    _, ngm = _masks(len(x), acq)
    return np.fft.irfft(np.fft.rfft(x) * ngm, len(x))


def passband_fraction(acq: AcqConfig, n: int | None = None) -> float:
    """Fraction of white-noise power passed by the NGM filter (sum of h^2)."""
    n = n or acq.record_length
    return float(np.sum(_ngm_kernel(n, acq) ** 2))


def _ngm_kernel(n: int, acq: AcqConfig) -> np.ndarray:
    _, ngm = _masks(n, acq)
    return np.fft.irfft(ngm.astype(float), n)


def ngm_kernel_power(n: int, acq: AcqConfig) -> np.ndarray:
    """Squared impulse response of the NGM filter on an n-sample circle."""
    return _ngm_kernel(n, acq) ** 2


def filtered_variance(var: np.ndarray, acq: AcqConfig) -> np.ndarray:
    """Exact per-sample variance after the NGM filter for independent samples."""
    h2 = ngm_kernel_power(len(var), acq)
    return np.fft.irfft(np.fft.rfft(h2) * np.fft.rfft(var), len(var))


def quantize(x: np.ndarray, acq: AcqConfig, lsb: float):
    top = 2 ** (acq.adc_bits - 1)
    codes = np.round(x / lsb)
    clipped = int(np.sum((codes < -top) | (codes > top - 1)))
    return (np.clip(codes, -top, top - 1) * lsb).astype(np.float32), clipped


def quantum_params(comb: CombConfig, cal: Calibration, gamma) -> QuantumParams:
    return QuantumParams(
        alpha=cal.alpha,
        beta=cal.beta,
        squeeze=SqueezeSpec(comb.r, cal.phi),
        gamma=gamma,
        eta=comb.eta,
    )


def split_balanced(mean, variance, rng: np.random.Generator, noise_free: bool = False):
    """Photon counts on the two outputs of a 50:50 splitter.

    The sum carries the full single-detector statistics and the difference
    carries only partition (shot) noise with variance equal to the detected
    mean.
    """
    if noise_free:
        return mean / 2, mean / 2
    total = mean + np.sqrt(variance) * rng.standard_normal(np.shape(mean))
    diff = np.sqrt(mean) * rng.standard_normal(np.shape(mean))
    return (total + diff) / 2, (total - diff) / 2


def draw_ceo(comb: CombConfig, index: int, rng: np.random.Generator) -> float:
    model = comb.ceo_phase_model
    if model == "fixed":
        phase = comb.ceo_phase
    elif model == "uniform":
        phase = rng.uniform(-np.pi, np.pi)
    elif model == "normal":
        phase = comb.ceo_phase + comb.ceo_spread * rng.standard_normal()
    else:
        phase = comb.ceo_phases[index % len(comb.ceo_phases)]
    return float(np.mod(phase + np.pi, 2 * np.pi) - np.pi)


def _detector_channels(counts, cal, acq, rng):
    volts = counts * cal.volts_per_photon
    if not acq.noise_free:
        volts = volts + cal.noise_floor_sigma * rng.standard_normal(len(volts))
    igm = lowpass(volts, acq)
    ngm = ngm_band(igm, acq) * cal.ngm_gain
    igm_q, c1 = quantize(igm, acq, cal.lsb)
    ngm_q, c2 = quantize(ngm, acq, cal.lsb)
    return igm_q, ngm_q, c1, c2


def _make_record(comb, acq, cal, index, seq):
    rng = np.random.default_rng(seq)
    ceo = draw_ceo(comb, index, rng)
    shift = int(rng.integers(-acq.max_shift, acq.max_shift + 1)) if acq.max_shift else 0
    gamma = overlap_trace(comb, acq, ceo, shift)
    mean, var = photon_moments(quantum_params(comb, cal, gamma))
    if np.any(var < 0):
        raise ConfigError("model variance is negative; parameters are unphysical")
    if acq.detector_mode == "dual_balanced":
        a, b = split_balanced(mean, var, rng, acq.noise_free)
        ia, na, c1, c2 = _detector_channels(a, cal, acq, rng)
        ib, nb, c3, c4 = _detector_channels(b, cal, acq, rng)
        rec_a = IgmRecord(ia, na, ceo, index, shift)
        rec_b = IgmRecord(ib, nb, ceo, index, shift)
        return rec_a, rec_b, np.array([c1, c2, c3, c4])
    if acq.noise_free:
        counts = mean
    elif acq.exact_poisson:
        counts = rng.poisson(mean).astype(float)
    else:
        counts = mean + np.sqrt(var) * rng.standard_normal(len(mean))
    igm, ngm, c1, c2 = _detector_channels(counts, cal, acq, rng)
    return IgmRecord(igm, ngm, ceo, index, shift), None, np.array([c1, c2])


def ensemble_truth(comb: CombConfig, acq: AcqConfig, cal: Calibration) -> EnsembleTruth:
    t = sample_times(acq)
    gamma = overlap_trace(comb, acq, comb.ceo_phase)
    mean, var = photon_moments(quantum_params(comb, cal, gamma))
    split = 2.0 if acq.detector_mode == "dual_balanced" else 1.0
    scale = (cal.volts_per_photon * cal.ngm_gain) ** 2
    floor = 0.0 if acq.noise_free else (cal.noise_floor_sigma * cal.ngm_gain) ** 2
    floor *= passband_fraction(acq)
    quant = cal.lsb**2 / 12
    if acq.noise_free:
        ngm_var = np.zeros_like(t)
        snl_var = np.zeros_like(t)
    else:
        # per detector: (var + mean)/4 in balanced mode, var otherwise
        per_det = (var + mean) / 4 if split == 2 else var
        ngm_var = scale * filtered_variance(per_det, acq) + floor + quant
        snl_var = scale * filtered_variance(mean / split, acq) + floor + quant
    return EnsembleTruth(
        t=t,
        gamma_of_t=gamma,
        mean_of_t=mean,
        snl_of_t=mean,
        model_variance_of_t=var,
        ngm_variance=ngm_var,
        snl_ngm_variance=snl_var,
        floor_ngm_variance=floor + quant,
    )


def _dark_trace(acq, cal, seq):
    rng = np.random.default_rng(seq)
    x = cal.noise_floor_sigma * rng.standard_normal(acq.dark_length)
    if acq.noise_free:
        x[:] = 0.0
    ngm = ngm_band(lowpass(x, acq), acq) * cal.ngm_gain
    return quantize(ngm, acq, cal.lsb)[0]


def synthesize_ensemble(comb: CombConfig, acq: AcqConfig, jobs: int = 1) -> Ensemble:
    """Generate ``acq.n_igms`` records plus ground truth and dark traces."""
    if acq.exact_poisson and (comb.r != 0 or acq.detector_mode != "single"):
        raise ConfigError("exact_poisson requires r = 0 and a single detector")
    cal = calibrate(comb, acq)
    seqs = np.random.SeedSequence(acq.seed).spawn(acq.n_igms + 2)

    def work(i):
        return _make_record(comb, acq, cal, i, seqs[i])

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, range(acq.n_igms)))
    else:
        results = [work(i) for i in range(acq.n_igms)]

    clipped = np.sum([res[2] for res in results], axis=0)
    worst = np.max(clipped) / (acq.n_igms * acq.record_length)
    if worst > CLIP_LIMIT:
        raise ClippingError(f"{worst:.2%} of samples clipped on at least one channel")

    records = [res[0] for res in results]
    partners = [res[1] for res in results] if acq.detector_mode == "dual_balanced" else None
    dark = {"ngm": _dark_trace(acq, cal, seqs[-2])}
    if partners is not None:
        dark = {"ngm_a": dark["ngm"], "ngm_b": _dark_trace(acq, cal, seqs[-1])}
    return Ensemble(
        comb=comb,
        acq=acq,
        calibration=cal,
        records=records,
        truth=ensemble_truth(comb, acq, cal),
        dark=dark,
        partners=partners,
    )


def with_overrides(cfg, **changes):
    """``dataclasses.replace`` that ignores ``None`` values."""
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})


def dip_squeezing_db(comb: CombConfig, acq: AcqConfig | None = None, samples: int = 4096):
    """Model V_SQZ extremes (dB) at the centerburst over one fringe.

    Normalised to the shot-noise level at large path difference, as measured.
    Returns ``(min_db, max_db)``.
    """
    acq = acq or AcqConfig()
    cal = calibrate(comb, acq)
    phase = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    gamma = comb.gamma_max * np.exp(1j * phase)
    _, var = photon_moments(quantum_params(comb, cal, gamma))
    snl = comb.eta * (cal.photons_beta + cal.photons_alpha)
    db = 10 * np.log10(var / snl)
    return float(db.min()), float(db.max())


def r_for_dip(comb: CombConfig, target_db: float, lo: float = 0.05, hi: float = 4.0) -> float:
    """Squeezing parameter giving a centerburst minimum of ``target_db``.

    Bisection on r with the other settings of ``comb`` fixed; the model dip
    deepens monotonically with r over the bracket used here.
    """
    def f(r):
        return dip_squeezing_db(replace(comb, r=r))[0] - target_db

    if f(lo) < 0 or f(hi) > 0:
        raise ValueError("target dip not bracketed")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

