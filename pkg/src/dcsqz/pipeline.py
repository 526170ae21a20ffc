"""Reduction of IGM/NGM record streams to phase-resolved noise statistics.

The chain is: analytic signal of each IGM, envelope cross-correlation against
the first record, integer-sample alignment applied to both channels, CEO-phase
estimation and binning, per-sample ensemble standard deviation of the NGMs,
and the noise-floor-corrected squeezing factor against the shot-noise level
taken from the large-path-difference part of the record.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptySelectionError, LowCorrelationError

UNWRAP_FLOOR = 0.05


@dataclass
class AnalyticSignal:
    envelope: np.ndarray
    phase: np.ndarray
    carrier_phase_at_peak: float
    peak_index: int


def _analytic(x: np.ndarray, sample_rate: float | None = None, band=None) -> np.ndarray:
    n = len(x)
    spec = np.fft.fft(x)
    h = np.zeros(n)
    h[0] = 1.0
    h[1 : (n + 1) // 2] = 2.0
    if n % 2 == 0:
        h[n // 2] = 1.0
    if band is not None:
        f = np.fft.fftfreq(n, 1 / (sample_rate or 1.0))
        h = h * ((f >= band[0]) & (f <= band[1]))
    return np.fft.ifft(spec * h)


def wrap_pi(x):
    """Wrap onto [-pi, pi)."""
    return np.mod(np.asarray(x) + np.pi, 2 * np.pi) - np.pi


def unwrap_gated(wrapped: np.ndarray, envelope: np.ndarray, floor: float = UNWRAP_FLOOR):
    """Unwrap inside the contiguous region around the envelope peak.

    Outside the region where the envelope exceeds ``floor`` times its peak the
    phase is extended linearly with the slope fitted inside. The result is
    anchored so that its value at the peak equals the wrapped phase there.
    """
    n = len(wrapped)
    peak = int(np.argmax(envelope))
    above = envelope > floor * envelope[peak]
    lo = peak
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = peak
    while hi < n - 1 and above[hi + 1]:
        hi += 1
    inside = np.unwrap(wrapped[lo : hi + 1])
    inside += wrap_pi(wrapped[peak]) - inside[peak - lo]
    out = np.empty(n)
    out[lo : hi + 1] = inside
    idx = np.arange(n)
    if hi > lo:
        slope = np.polyfit(idx[lo : hi + 1], inside, 1)[0]
    else:
        slope = 0.0
    out[:lo] = inside[0] + slope * (idx[:lo] - lo)
    out[hi + 1 :] = inside[-1] + slope * (idx[hi + 1 :] - hi)
    return out


def analytic_signal(samples, sample_rate: float | None = None, band=None) -> AnalyticSignal:
    """Envelope and unwrapped phase via the one-sided spectrum.

    Odd or short inputs are zero-padded to an even length of at least 64 and
    trimmed back afterwards. ``band=(f_lo, f_hi)`` additionally restricts the
    analytic spectrum to that range (requires ``sample_rate``).
    """
    x = np.asarray(samples, dtype=float)
    n = len(x)
    m = max(64, n + (n % 2))
    z = _analytic(np.pad(x, (0, m - n)), sample_rate, band)[:n]
    env = np.abs(z)
    wrapped = np.angle(z)
    peak = int(np.argmax(env))
    phase = unwrap_gated(wrapped, env)
    return AnalyticSignal(env, phase, float(wrap_pi(wrapped[peak])), peak)


@dataclass
class Alignment:
    shifts: np.ndarray
    peak_corr: np.ndarray
    rejected: list[int] = field(default_factory=list)

    @property
    def accepted(self) -> np.ndarray:
        keep = np.ones(len(self.shifts), bool)
        keep[self.rejected] = False
        return np.flatnonzero(keep)


def envelope_xcorr(ref: np.ndarray, env: np.ndarray) -> tuple[int, float]:
    """Lag maximising the normalised circular cross-correlation, and its value."""
    a = ref - ref.mean()
    b = env - env.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0, 0.0
    c = np.fft.irfft(np.conj(np.fft.rfft(a)) * np.fft.rfft(b), len(a)) / denom
    k = int(np.argmax(c))
    lag = k - len(a) if k > len(a) // 2 else k
    return lag, float(c[k])


def align_records(envelopes, min_corr: float = 0.2, strict: bool = False) -> Alignment:
    """Integer shifts that bring each envelope onto the first one.

    ``np.roll(x, shift)`` aligns record ``x``. Records whose correlation peak
    falls below ``min_corr`` are marked rejected (or raise, if ``strict``).
    """
    envs = [np.asarray(e, dtype=float) for e in envelopes]
    if len(envs) < 2:
        raise DataError("need at least two records to align")
    shifts, corr, rejected = [], [], []
    for i, env in enumerate(envs):
        lag, c = envelope_xcorr(envs[0], env)
        shifts.append(-lag)
        corr.append(c)
        if c < min_corr:
            rejected.append(i)
    if rejected and strict:
        raise LowCorrelationError(f"records {rejected} correlate below {min_corr}")
    return Alignment(np.array(shifts, dtype=int), np.array(corr), rejected)


def ceo_phase(igm, shift: int = 0, peak_index: int | None = None,
              sample_rate: float | None = None, band=None) -> float:
    """Carrier phase of the aligned IGM at the envelope peak, in [-pi, pi)."""
    z = _analytic(np.roll(np.asarray(igm, dtype=float), shift), sample_rate, band)
    k = int(np.argmax(np.abs(z))) if peak_index is None else peak_index
    return float(wrap_pi(np.angle(z[k])))


def bin_by_ceo(phases, window: float, policy: str = "densest", target: float = 0.0) -> np.ndarray:
    """Indices of records whose CEO phase falls in the chosen circular window.

    ``densest`` picks the window of width ``window`` holding the most phases;
    ties go to the set with the lower mean index. ``nearest`` keeps phases
    within ``window/2`` of ``target``.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    ph = wrap_pi(np.asarray(phases, dtype=float))
    if policy == "nearest":
        sel = np.flatnonzero(np.abs(wrap_pi(ph - target)) <= window / 2)
    elif policy == "densest":
        best = None
        for start in ph:
            sel_i = np.flatnonzero(np.mod(ph - start, 2 * np.pi) <= window)
            key = (-len(sel_i), sel_i.mean())
            if best is None or key < best[0]:
                best = (key, sel_i)
        sel = best[1] if best else np.array([], dtype=int)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    if len(sel) == 0:
        raise EmptySelectionError("no records inside the CEO window")
    return np.sort(sel)


def ensemble_sigma(matrix) -> np.ndarray:
    """Unbiased standard deviation across records (axis 0)."""
    m = np.asarray(matrix, dtype=float)
    if m.shape[0] < 2:
        raise DataError("need at least two records")
    return m.std(axis=0, ddof=1)


def squeezing_factor(sigma_phi_sq, sigma_snl_sq, sigma_nf_sq):
    """Noise-floor-corrected variance ratio to the shot-noise level, linear and dB."""
    den = np.asarray(sigma_snl_sq, dtype=float) - sigma_nf_sq
    if np.any(den <= 0):
        raise ValueError("shot-noise variance must exceed the noise-floor variance")
    v = (np.asarray(sigma_phi_sq, dtype=float) - sigma_nf_sq) / den
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10 * np.log10(v)
    if np.ndim(v) == 0:
        return float(v), float(db)
    return v, db


def phase_axis(phases) -> np.ndarray:
    """Per-sample circular mean of several phase traces, re-unwrapped.

    ``phases`` is a (records, samples) array of unwrapped phases. Samples are
    gated by the resultant length so that incoherent regions do not drive the
    unwrap.
    """
    z = np.exp(1j * np.asarray(phases, dtype=float)).mean(axis=0)
    return unwrap_gated(np.angle(z), np.abs(z), floor=0.5)


@dataclass
class Histogram:
    counts: np.ndarray
    phase_edges: np.ndarray
    volt_edges: np.ndarray


def phase_histogram(ngm, phi, bins=(None, 64), sigma=None) -> Histogram:
    """Counts of NGM voltage per (phase, voltage) cell.

    With ``bins[0] = None`` every time sample is its own phase column, so each
    column sums to the record count. Voltage bins span +/- 5 max sigma.
    """
    ngm = np.asarray(ngm, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n_phase, n_volt = bins
    if n_volt < 16 or (n_phase is not None and n_phase < 16):
        raise ValueError("need at least 16 bins per axis")
    smax = float(np.max(sigma if sigma is not None else ngm.std(axis=0)))
    half = 5 * smax if smax > 0 else max(float(np.max(np.abs(ngm))), 1.0)
    volt_edges = np.linspace(-half, half, n_volt + 1)
    vbin = np.clip(np.searchsorted(volt_edges, ngm, side="right") - 1, 0, n_volt - 1)
    if n_phase is None:
        counts = np.zeros((ngm.shape[1], n_volt), dtype=np.int64)
        cols = np.broadcast_to(np.arange(ngm.shape[1]), ngm.shape)
        np.add.at(counts, (cols.ravel(), vbin.ravel()), 1)
        step = np.diff(phi).mean() if len(phi) > 1 else 1.0
        phase_edges = np.concatenate([phi - step / 2, [phi[-1] + step / 2]])
    else:
        phase_edges = np.linspace(phi.min(), phi.max(), n_phase + 1)
        pbin = np.clip(np.searchsorted(phase_edges, phi, side="right") - 1, 0, n_phase - 1)
        counts = np.zeros((n_phase, n_volt), dtype=np.int64)
        cols = np.broadcast_to(pbin, ngm.shape)
        np.add.at(counts, (cols.ravel(), vbin.ravel()), 1)
    return Histogram(counts, phase_edges, volt_edges)


def sum_diff(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b, a - b


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Centred circular moving average; ``width`` must be odd."""
    if width <= 1:
        return np.asarray(x, dtype=float)
    if width % 2 == 0:
        raise ValueError("smoothing width must be odd")
    k = width // 2
    xp = np.concatenate([x[-k:], x, x[:k]])
    return np.convolve(xp, np.ones(width) / width, mode="valid")


@dataclass(frozen=True)
class PipelineOptions:
    ceo_window: float = 0.05
    ceo_policy: str = "densest"
    ceo_target: float = 0.0
    ceo_select: bool = True
    min_corr: float = 0.2
    igm_band: tuple | None = None
    snl_threshold: float = 0.01
    region_threshold: float = 0.05
    smooth: int = 1
    hist_bins: tuple = (64, 64)
    jobs: int = 1


@dataclass
class NoiseStats:
    phi_axis: np.ndarray
    sigma_ngm: np.ndarray
    sigma_snl: float
    sigma_floor: float
    v_sqz: np.ndarray
    v_sqz_db: np.ndarray
    histogram: Histogram
    igm_mean: np.ndarray
    igm_envelope: np.ndarray
    region: np.ndarray
    snl_mask: np.ndarray
    selected: np.ndarray
    shifts: np.ndarray
    ceo_phases: np.ndarray
    rejected: list[int]
    sigma_snl_trace: np.ndarray | None = None
    sigma_diff: np.ndarray | None = None

    @property
    def n_records(self) -> int:
        return len(self.selected)


def default_band(comb, acq) -> tuple[float, float]:
    """IGM band: carrier +/- 3 spectral sigmas of the centerburst envelope."""
    sigma_f = 1 / (2 * np.pi * comb.envelope_sigma_lab)
    return (max(comb.igm_carrier - 3 * sigma_f, acq.sample_rate / acq.record_length),
            comb.igm_carrier + 3 * sigma_f)


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def reduce_channels(igms, ngms, sample_rate, opts: PipelineOptions, partners_ngm=None):
    """Align, CEO-select and stack. Returns a dict of intermediate arrays."""
    igms = np.asarray(igms, dtype=float)
    band = opts.igm_band

    def sig(x):
        return analytic_signal(x, sample_rate, band)

    sigs = _map(sig, list(igms), opts.jobs)
    align = align_records([s.envelope for s in sigs], opts.min_corr)
    keep = align.accepted
    rolled = np.array([np.roll(igms[i], align.shifts[i]) for i in keep])
    env_mean = np.mean([np.roll(sigs[i].envelope, align.shifts[i]) for i in keep], axis=0)
    peak = int(np.argmax(env_mean))
    ceo = np.array([ceo_phase(x, 0, peak, sample_rate, band) for x in rolled])
    if opts.ceo_select:
        pick = bin_by_ceo(ceo, opts.ceo_window, opts.ceo_policy, opts.ceo_target)
    else:
        pick = np.arange(len(keep))
    chosen = keep[pick]
    out = {
        "igm": rolled[pick],
        "ngm": np.array([np.roll(ngms[i], align.shifts[i]) for i in chosen]),
        "phases": np.array([np.roll(sigs[i].phase, align.shifts[i]) for i in chosen]),
        "selected": chosen,
        "shifts": align.shifts,
        "ceo": ceo,
        "rejected": align.rejected,
    }
    if partners_ngm is not None:
        out["ngm_b"] = np.array([np.roll(partners_ngm[i], align.shifts[i]) for i in chosen])
    return out


def analyze_arrays(igms, ngms, dark, sample_rate, opts: PipelineOptions = PipelineOptions(),
                   partners_ngm=None) -> NoiseStats:
    """Full reduction from raw channel arrays.

    In balanced mode (``partners_ngm`` given) the NGM analysed is the sum of
    the two detectors and the difference supplies the time-resolved SNL.
    ``dark`` is the noise-floor-only NGM trace (summed over detectors).
    """
    red = reduce_channels(igms, ngms, sample_rate, opts, partners_ngm)
    ngm = red["ngm"]
    diff_sigma = None
    if partners_ngm is not None:
        ngm, diff = sum_diff(ngm, red["ngm_b"])
        diff_sigma = ensemble_sigma(diff)
    sigma = ensemble_sigma(ngm)
    igm_mean = red["igm"].mean(axis=0)
    env = analytic_signal(igm_mean, sample_rate, opts.igm_band).envelope
    phi = phase_axis(red["phases"])
    region = env > opts.region_threshold * env.max()
    snl_mask = env < opts.snl_threshold * env.max()
    if not np.any(snl_mask):
        raise DataError("record has no large-path-difference segment for the SNL")
    var = moving_average(sigma**2, opts.smooth)
    snl_var = float(np.mean(sigma[snl_mask] ** 2))
    floor_var = float(np.var(np.asarray(dark, dtype=float), ddof=1))
    v, db = squeezing_factor(var, snl_var, floor_var)
    hist = phase_histogram(ngm[:, region], phi[region], opts.hist_bins, sigma[region])
    return NoiseStats(
        phi_axis=phi,
        sigma_ngm=sigma,
        sigma_snl=float(np.sqrt(snl_var)),
        sigma_floor=float(np.sqrt(floor_var)),
        v_sqz=v,
        v_sqz_db=db,
        histogram=hist,
        igm_mean=igm_mean,
        igm_envelope=env,
        region=region,
        snl_mask=snl_mask,
        selected=red["selected"],
        shifts=red["shifts"],
        ceo_phases=red["ceo"],
        rejected=red["rejected"],
        sigma_snl_trace=diff_sigma,
        sigma_diff=diff_sigma,
    )


def analyze(ens, opts: PipelineOptions | None = None) -> NoiseStats:
    """Run the pipeline on a :class:`dcsqz.synth.Ensemble`."""
    if opts is None:
        opts = PipelineOptions()
    if opts.igm_band is None:
        from dataclasses import replace
        opts = replace(opts, igm_band=default_band(ens.comb, ens.acq))
    igms = [r.igm_samples for r in ens.records]
    ngms = [r.ngm_samples for r in ens.records]
    fs = ens.acq.sample_rate
    if ens.partners is None:
        return analyze_arrays(igms, ngms, ens.dark["ngm"], fs, opts)
    dark = ens.dark["ngm_a"].astype(float) + ens.dark["ngm_b"].astype(float)
    return analyze_arrays(igms, ngms, dark, fs, opts, [p.ngm_samples for p in ens.partners])
