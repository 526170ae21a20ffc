"""Least-squares fit of the closed-form variance model to NGM sigma traces.

The free parameters are (r, phi, eta, gamma_scale, floor). The field
amplitudes |alpha| and |beta| are taken as known. The overlap enters through
the measured product ``eta_gamma(t)`` = eta |gamma(t)|, read off the IGM
envelope, so that |gamma| = gamma_scale * eta_gamma / eta and gamma_scale = 1
means "consistent with the measured fringe amplitude".
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import DataError
from .gaussian import (
    QuantumParams,
    SqueezeSpec,
    bifurcation_scan,
    count_periodic_extrema,
    photon_moments,
    wrap_half_pi,
)

PARAM_NAMES = ("r", "phi", "eta", "gamma_scale", "floor")


@dataclass(frozen=True)
class FitParams:
    r: float
    phi: float
    eta: float
    gamma_scale: float = 1.0
    floor: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.r, self.phi, self.eta, self.gamma_scale, self.floor], dtype=float)

    @classmethod
    def from_vector(cls, x) -> "FitParams":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class Amplitudes:
    """Known inputs of the model trace.

    ``alpha`` and ``beta`` are field amplitudes in sqrt(photons per bin),
    ``eta_gamma`` the measured eta |gamma(t)| trace, and ``scale`` converts
    photon-number standard deviation to NGM volts. When ``kernel`` (the
    squared impulse response of the NGM filter) is given, the per-sample
    variance is circularly convolved with it, which requires a complete,
    contiguous record; ``scale`` then excludes the filter's power gain.
    """

    alpha: float
    beta: float
    eta_gamma: np.ndarray
    scale: float
    kernel: np.ndarray | None = None


def model_variance(params: FitParams, phi_axis, amps: Amplitudes) -> np.ndarray:
    """Photon-number variance per sample for the given parameters."""
    eta = max(params.eta, 1e-12)
    gamma = np.clip(params.gamma_scale * np.asarray(amps.eta_gamma) / eta, 0.0, 1.0)
    q = QuantumParams(
        alpha=amps.alpha * np.exp(1j * np.asarray(phi_axis, dtype=float)),
        beta=amps.beta,
        squeeze=SqueezeSpec(max(params.r, 0.0), params.phi),
        gamma=gamma,
        eta=min(max(params.eta, 0.0), 1.0),
    )
    return photon_moments(q).variance


def model_sigma_trace(params: FitParams, phi_axis, amps: Amplitudes) -> np.ndarray:
    """sigma(t) = sqrt(scale^2 Var + floor^2) in NGM volts."""
    var = model_variance(params, phi_axis, amps)
    if amps.kernel is not None:
        k = np.asarray(amps.kernel)
        var = np.fft.irfft(np.fft.rfft(k) * np.fft.rfft(var), len(var))
    return np.sqrt(amps.scale**2 * np.maximum(var, 0.0) + params.floor**2)


@dataclass
class FitResult:
    r_hat: float
    phi_hat: float
    eta_hat: float
    gamma_scale_hat: float
    floor_hat: float
    uncertainty: dict
    rms_residual: float
    iterations: int
    converged: bool
    grad_norm: float
    cost_history: list = field(default_factory=list)
    projected: bool = False
    message: str = ""

    @property
    def params(self) -> FitParams:
        return FitParams(self.r_hat, self.phi_hat, self.eta_hat, self.gamma_scale_hat, self.floor_hat)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_history"] = [float(c) for c in self.cost_history]
        d["uncertainty"] = {k: float(v) for k, v in self.uncertainty.items()}
        return d


DEFAULT_BOUNDS = {
    "r": (0.0, 6.0),
    "phi": (-np.inf, np.inf),
    "eta": (0.01, 1.0),
    "gamma_scale": (0.05, 5.0),
    "floor": (0.0, np.inf),
}


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    gtol: float = 1e-6
    ftol: float = 1e-12
    fd_step: float = 1e-6
    weighting: str = "uniform"
    fixed: tuple = ()
    multistart: bool = True


class _Problem:
    def __init__(self, phi_axis, observed, amps, weights, free, base):
        self.phi = phi_axis
        self.obs = observed
        self.amps = amps
        self.w = weights
        self.free = free
        self.base = base

    def full(self, z):
        x = self.base.copy()
        x[self.free] = z
        return x

    def residual(self, z):
        p = FitParams.from_vector(self.full(z))
        return self.w * (self.obs - model_sigma_trace(p, self.phi, self.amps))


def _project(z, lo, hi):
    out = np.clip(z, lo, hi)
    return out, bool(np.any(out != z))


def _jacobian(prob, z, lo, hi, rel):
    cols = []
    for i in range(len(z)):
        h = rel * max(abs(z[i]), 1e-3)
        up, dn = z.copy(), z.copy()
        up[i] = min(z[i] + h, hi[i])
        dn[i] = max(z[i] - h, lo[i])
        span = up[i] - dn[i]
        if span == 0:
            cols.append(np.zeros(len(prob.obs)))
            continue
        cols.append((prob.residual(up) - prob.residual(dn)) / span)
    return np.column_stack(cols)


def _scaled_gradient(J, f, z, lo, hi):
    """Cosine between the residual and each Jacobian column, bound-projected."""
    g = J.T @ f
    # a component pushing against an active bound cannot be reduced further
    at_lo = (z <= lo) & (g > 0)
    at_hi = (z >= hi) & (g < 0)
    g = np.where(at_lo | at_hi, 0.0, g)
    norms = np.linalg.norm(J, axis=0) * max(np.linalg.norm(f), 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, np.abs(g) / norms, 0.0)
    return float(np.max(cos)) if len(cos) else 0.0


def levenberg_marquardt(prob: _Problem, z0, lo, hi, opts: FitOptions):
    """Damped Gauss-Newton with Marquardt diagonal scaling and box projection."""
    z, projected = _project(np.asarray(z0, dtype=float), lo, hi)
    f = prob.residual(z)
    cost = 0.5 * float(f @ f)
    history = [cost]
    # residuals at rounding level: the model reproduces the data exactly
    exact = 0.5 * 1e-24 * float(np.sum((prob.w * prob.obs) ** 2))
    lam = 1e-3
    converged = False
    it = 0
    gnorm = np.inf
    for it in range(1, opts.max_iter + 1):
        if cost <= exact:
            converged, gnorm = True, 0.0
            break
        J = _jacobian(prob, z, lo, hi, opts.fd_step)
        gnorm = _scaled_gradient(J, f, z, lo, hi)
        if gnorm < opts.gtol:
            converged = True
            break
        A = J.T @ J
        g = J.T @ f
        d = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            z_new, hit = _project(z + step, lo, hi)
            f_new = prob.residual(z_new)
            cost_new = 0.5 * float(f_new @ f_new)
            if np.isfinite(cost_new) and cost_new < cost:
                projected |= hit
                rel = (cost - cost_new) / max(cost, 1e-300)
                z, f, cost = z_new, f_new, cost_new
                history.append(cost)
                lam = max(lam / 3, 1e-12)
                improved = True
                break
            lam *= 4
        if not improved or rel < opts.ftol:
            J = _jacobian(prob, z, lo, hi, opts.fd_step)
            gnorm = _scaled_gradient(J, f, z, lo, hi)
            converged = gnorm < max(opts.gtol, 1e-4) or cost <= exact
            break
    return z, f, cost, history, it, converged, gnorm, projected


def _uncertainty(prob, z, f, lo, hi, rel, dof):
    J = _jacobian(prob, z, lo, hi, rel)
    A = J.T @ J
    s2 = float(f @ f) / max(dof, 1)
    diag = np.diag(A)
    out = np.full(len(z), np.inf)
    ok = diag > 1e-12 * max(np.max(diag), 1e-300)
    if np.any(ok):
        cov = np.linalg.pinv(A[np.ix_(ok, ok)]) * s2
        out[ok] = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return out


def _guess_r(sig, floor, eta=0.5):
    v = np.maximum(sig**2 - floor**2, 1e-300)
    q = float(v.max() / v.min())
    if q <= 1.0 + 1e-9:
        return 0.0

    def ratio(r):
        return (eta * math.expm1(2 * r) + 1) / (eta * math.expm1(-2 * r) + 1) - q

    try:
        return float(brentq(ratio, 0.0, 5.0))
    except ValueError:
        return 5.0


def initial_guess(phi_axis, observed, amps: Amplitudes, floor0: float | None = None) -> FitParams:
    """Heuristic start: r from the max/min sigma ratio near the centerburst,
    phi from the mean-field phase at the sigma minimum, eta = 0.5."""
    eg = np.asarray(amps.eta_gamma)
    core = eg > 0.5 * eg.max() if eg.max() > 0 else np.ones(len(eg), bool)
    floor = 0.1 * float(observed.min()) if floor0 is None else floor0
    r0 = _guess_r(observed[core], floor)
    k = np.flatnonzero(core)[np.argmin(observed[core])]
    nu = amps.beta + 2 * eg[k] * amps.alpha * np.exp(1j * phi_axis[k])
    return FitParams(r0, float(wrap_half_pi(np.angle(nu))), 0.5, 1.0, floor)


def start_grid(g: FitParams) -> list[FitParams]:
    """Fixed 8-point grid around the heuristic guess (2 r values x 4 angles)."""
    rs = (g.r, max(0.5 * g.r, 0.05))
    dphi = (0.0, np.pi / 4, np.pi / 2, -np.pi / 4)
    return [replace(g, r=r, phi=g.phi + d) for r in rs for d in dphi]


def fit_variance_model(
    phi_axis,
    observed,
    amps: Amplitudes,
    initial: FitParams | list | None = None,
    bounds: dict | None = None,
    opts: FitOptions = FitOptions(),
    mask=None,
) -> FitResult:
    """Fit (r, phi, eta, gamma_scale, floor) to an observed sigma trace.

    ``opts.fixed`` names parameters held at their initial values. With
    ``opts.multistart`` and no explicit ``initial`` the fit is run from a fixed
    8-point grid and the lowest-cost result is kept (first wins on ties).
    ``initial`` may also be a list of starting points.
    """
    phi_axis = np.asarray(phi_axis, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if mask is not None:
        phi_axis = phi_axis[mask]
        observed = observed[mask]
        if amps.kernel is not None:
            raise ValueError("a filter kernel needs the full record; drop the mask")
        amps = replace(amps, eta_gamma=np.asarray(amps.eta_gamma)[mask])
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    free = np.array([n not in opts.fixed for n in PARAM_NAMES])
    n_free = int(free.sum())
    if len(observed) < 8 * n_free:
        raise DataError(f"{len(observed)} points is fewer than 8 per fitted parameter")
    if not np.all(np.isfinite(observed)):
        raise DataError("observed trace contains non-finite values")
    if opts.weighting == "uniform":
        w = np.ones_like(observed)
    elif opts.weighting == "chi2":
        w = 1.0 / np.maximum(observed, 1e-300)
    else:
        raise ValueError(f"unknown weighting {opts.weighting!r}")

    lo_all = np.array([bounds[n][0] for n in PARAM_NAMES])
    hi_all = np.array([bounds[n][1] for n in PARAM_NAMES])
    if initial is None:
        guess = initial_guess(phi_axis, observed, amps)
        starts = start_grid(guess) if opts.multistart else [guess]
    elif isinstance(initial, FitParams):
        starts = [initial]
    else:
        starts = list(initial)

    best = None
    for s in starts:
        base = s.vector()
        prob = _Problem(phi_axis, observed, amps, w, free, base)
        res = levenberg_marquardt(prob, base[free], lo_all[free], hi_all[free], opts)
        if best is None or res[2] < best[1][2]:
            best = (prob, res)
    prob, (z, f, cost, history, it, converged, gnorm, projected) = best
    x = prob.full(z)
    x[1] = float(wrap_half_pi(x[1]))
    unc = np.zeros(5)
    unc[free] = _uncertainty(prob, z, f, lo_all[free], hi_all[free], opts.fd_step,
                             len(observed) - n_free)
    unc[1] = min(unc[1], np.pi / 2)
    resid = observed - model_sigma_trace(FitParams.from_vector(x), phi_axis, amps)
    msg = "converged" if converged else "stopped without meeting the gradient tolerance"
    if projected:
        msg += "; steps were projected onto the bounds"
    return FitResult(
        r_hat=x[0],
        phi_hat=x[1],
        eta_hat=x[2],
        gamma_scale_hat=x[3],
        floor_hat=x[4],
        uncertainty=dict(zip(PARAM_NAMES, unc.tolist())),
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        iterations=it,
        converged=converged,
        grad_norm=gnorm,
        cost_history=history,
        projected=projected,
        message=msg,
    )


def amplitudes_from_stats(stats, calibration, acq) -> Amplitudes:
    """Known model inputs for a pipeline result.

    The IGM fringe amplitude is 2 eta |beta||alpha||gamma| volts-per-photon
    (halved per detector in balanced mode), which gives eta |gamma(t)|.
    """
    from .synth import ngm_kernel_power

    split = 2.0 if acq.detector_mode == "dual_balanced" else 1.0
    denom = 2 * calibration.alpha * calibration.beta * calibration.volts_per_photon / split
    env = np.asarray(stats.igm_envelope)
    return Amplitudes(
        alpha=calibration.alpha,
        beta=calibration.beta,
        eta_gamma=env / denom,
        scale=calibration.volts_per_photon * calibration.ngm_gain,
        kernel=ngm_kernel_power(len(env), acq),
    )


STATS_FIXED = ("gamma_scale", "floor")


def fit_stats(stats, calibration, acq, opts: FitOptions | None = None, initial=None) -> FitResult:
    """Fit a pipeline result.

    By default the overlap scale is held at 1 (the measured IGM amplitude) and
    the floor at the dark-trace value; both otherwise trade off against eta.
    """
    opts = opts or FitOptions(fixed=STATS_FIXED)
    amps = amplitudes_from_stats(stats, calibration, acq)
    if initial is None:
        guess = initial_guess(stats.phi_axis, stats.sigma_ngm, amps, stats.sigma_floor)
        initial = start_grid(guess) if opts.multistart else guess
    return fit_variance_model(stats.phi_axis, stats.sigma_ngm, amps, initial, opts=opts)


def harmonic_extrema(phi, values, harmonics: int = 4, samples: int = 1024) -> int:
    """Extrema per 2 pi of a truncated Fourier series fitted to (phi, values)."""
    phi = np.asarray(phi, dtype=float)
    cols = [np.ones_like(phi)]
    for k in range(1, harmonics + 1):
        cols += [np.cos(k * phi), np.sin(k * phi)]
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), values, rcond=None)
    grid = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    series = coef[0] + sum(
        coef[2 * k - 1] * np.cos(k * grid) + coef[2 * k] * np.sin(k * grid)
        for k in range(1, harmonics + 1)
    )
    return count_periodic_extrema(series)


def fitted_template(fit: FitResult, amps: Amplitudes) -> QuantumParams:
    """Point model at the centerburst peak for extrema counting."""
    g = min(fit.gamma_scale_hat * float(np.max(amps.eta_gamma)) / max(fit.eta_hat, 1e-12), 1.0)
    return QuantumParams(
        alpha=amps.alpha,
        beta=amps.beta,
        squeeze=SqueezeSpec(fit.r_hat, fit.phi_hat),
        gamma=g,
        eta=fit.eta_hat,
    )


@dataclass
class ScanRow:
    power: float
    ratio: float
    fit: FitResult | None = None
    extrema_count: int | None = None
    extrema_count_direct: int | None = None
    extrema_count_model: int | None = None
    min_db: float = float("nan")
    max_db: float = float("nan")
    error: str = ""


@dataclass
class ScanResult:
    rows: list
    anti_squeezing_monotone: bool
    transition_consistent: bool
    threshold_measured: float | None
    threshold_model: float | None


def _first_four(powers, counts):
    for p, c in zip(powers, counts):
        if c is not None and c >= 4:
            return p
    return None


def _scan_row(i, power, comb, acq, popts, fopts):
    from . import pipeline, synth

    seed = int(np.random.SeedSequence([acq.seed, i]).generate_state(1)[0])
    c = replace(comb, power_coh=power)
    a = replace(acq, seed=seed)
    cal = None
    row = ScanRow(power=power, ratio=float("nan"))
    if power <= 0:
        row.error = "coherent power must be positive"
        return row
    try:
        cal = synth.calibrate(c, a)
        row.ratio = comb.gamma_max * cal.alpha / cal.beta
        ens = synth.synthesize_ensemble(c, a)
        stats = pipeline.analyze(ens, popts)
        row.min_db = float(np.nanmin(stats.v_sqz_db[stats.region]))
        row.max_db = float(np.nanmax(stats.v_sqz_db[stats.region]))
        amps = amplitudes_from_stats(stats, cal, a)
        core = np.asarray(amps.eta_gamma) > 0.9 * np.max(amps.eta_gamma)
        row.extrema_count_direct = harmonic_extrema(stats.phi_axis[core], stats.sigma_ngm[core] ** 2)
        row.fit = fit_stats(stats, cal, a, fopts)
        row.extrema_count = _safe_count(fitted_template(row.fit, amps))
    except Exception as exc:  # a failed row is reported, not fatal
        row.error = f"{type(exc).__name__}: {exc}"
    if cal is not None:
        truth = QuantumParams(cal.alpha, cal.beta, SqueezeSpec(c.r, cal.phi), c.gamma_max, c.eta)
        row.extrema_count_model = _safe_count(truth)
    return row


def _safe_count(p: QuantumParams):
    from .gaussian import count_variance_extrema

    try:
        return count_variance_extrema(p, 2048)
    except ValueError:
        return None


def power_scan(comb, acq, powers, popts=None, fopts: FitOptions | None = None, jobs: int = 1,
               db_tolerance: float = 0.0) -> ScanResult:
    """Synthesize, analyze and fit at each coherent power.

    Rows are independent and seeded from ``(acq.seed, row index)``. The
    anti-squeezing flag allows ``db_tolerance`` of statistical slack between
    neighbouring rows.
    """
    from .pipeline import PipelineOptions

    powers = [float(p) for p in powers]
    if any(b < a for a, b in zip(powers, powers[1:])):
        raise ValueError("powers must be ascending")
    popts = popts or PipelineOptions()
    args = [(i, p, comb, acq, popts, fopts) for i, p in enumerate(powers)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(lambda a: _scan_row(*a), args))
    else:
        rows = [_scan_row(*a) for a in args]

    good = [r for r in rows if not r.error]
    maxes = [r.max_db for r in good]
    monotone = all(b >= a - db_tolerance for a, b in zip(maxes, maxes[1:]))
    measured = _first_four(powers, [r.extrema_count for r in rows])
    model = _first_four(powers, [r.extrema_count_model for r in rows])
    if measured is None or model is None:
        consistent = measured is None and model is None
    else:
        consistent = abs(powers.index(measured) - powers.index(model)) <= 1
    return ScanResult(rows, monotone, consistent, measured, model)


def reference_scan(comb, acq, powers):
    """Extrema counts from the closed form at the scan's true parameters."""
    from .synth import calibrate

    cal = calibrate(comb, acq)
    template = QuantumParams(cal.alpha, cal.beta, SqueezeSpec(comb.r, cal.phi), comb.gamma_max, comb.eta)
    per_watt = cal.photons_alpha / comb.power_coh
    alphas = [math.sqrt(per_watt * p) for p in powers]
    return bifurcation_scan(template, alphas, 2048)
