"""Closed-form Gaussian model of a displaced Kerr-squeezed pulse.

Amplitudes are in sqrt(photons per detection bin), so ``abs(z)**2`` is a mean
photon number. Variances are photon-number variances. Quadratures use the
vacuum-variance-1/2 convention, ``x_phi = cos(phi) x + sin(phi) p``, and the
squeezing operator ``S(r, phi) = exp(r/2 (e^{-2i phi} b^2 - e^{2i phi} b^{+2}))``
so that the quadrature at angle ``phi`` carries variance ``exp(-2r)/2``.

Every field of :class:`QuantumParams` may be a NumPy array; all operations
broadcast. Nothing here holds mutable state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateStateError, ExtremaTieError, SqueezeDomainError


def wrap_half_pi(phi):
    """Map an angle onto [-pi/2, pi/2), the period of the squeezing ellipse."""
    phi = np.asarray(phi, dtype=float)
    inside = (phi >= -np.pi / 2) & (phi < np.pi / 2)
    return np.where(inside, phi, np.mod(phi + np.pi / 2, np.pi) - np.pi / 2)


@dataclass(frozen=True)
class SqueezeSpec:
    r: float
    phi: float

    def __post_init__(self):
        if np.any(np.asarray(self.r) < 0):
            raise ValueError("squeezing parameter r must be non-negative")
        phi = wrap_half_pi(self.phi)
        object.__setattr__(self, "phi", float(phi) if phi.ndim == 0 else phi)


@dataclass(frozen=True)
class QuantumParams:
    """State and detector description for a single detection bin.

    ``alpha`` is the weak displacing field, ``beta`` the bright squeezed field,
    ``gamma`` the complex temporal-mode overlap and ``eta`` the detection
    efficiency.
    """

    alpha: complex
    beta: complex
    squeeze: SqueezeSpec
    gamma: complex = 1.0
    eta: float = 1.0

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("eta must lie in [0, 1]")
        if np.any(np.abs(self.gamma) > 1 + 1e-12):
            raise ValueError("|gamma| must not exceed 1")
        for name in ("alpha", "beta", "gamma"):
            if not np.all(np.isfinite(np.asarray(getattr(self, name)))):
                raise ValueError(f"{name} must be finite")

    @property
    def r(self):
        return self.squeeze.r

    @property
    def phi(self):
        return self.squeeze.phi

    @property
    def ratio(self):
        """Displacement strength R = |gamma alpha| / |beta|."""
        return np.abs(self.gamma * self.alpha) / np.abs(self.beta)

    def replace(self, **changes) -> "QuantumParams":
        fields = dict(
            alpha=self.alpha,
            beta=self.beta,
            squeeze=self.squeeze,
            gamma=self.gamma,
            eta=self.eta,
        )
        if "r" in changes or "phi" in changes:
            fields["squeeze"] = SqueezeSpec(
                changes.pop("r", self.r), changes.pop("phi", self.phi)
            )
        fields.update(changes)
        return QuantumParams(**fields)


class MomentPair(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray


def displaced_amplitude(p: QuantumParams):
    """Mean field of the squeezed mode after displacement, nu = beta + gamma alpha."""
    return p.beta + p.gamma * p.alpha


def mean_field_phase_exact(p: QuantumParams):
    """Argument of nu via atan2. Raises if nu vanishes anywhere."""
    nu = np.asarray(displaced_amplitude(p))
    if np.any(np.abs(nu) == 0):
        raise DegenerateStateError("mean field is zero; its phase is undefined")
    phase = np.angle(nu)
    return float(phase) if phase.ndim == 0 else phase


def mean_field_phase_approx(p: QuantumParams):
    """Small-displacement phase |gamma alpha| sin(phi_alpha) / |beta|.

    ``phi_alpha`` is measured relative to the phase of ``beta``. A
    :class:`UserWarning` is emitted once R reaches 0.5, where the
    linearisation is no longer meaningful.
    """
    ratio = p.ratio
    if np.any(ratio >= 0.5):
        warnings.warn("R = |gamma alpha|/|beta| >= 0.5; phase approximation invalid")
    rel = np.angle(p.gamma * p.alpha) - np.angle(p.beta)
    out = ratio * np.sin(rel)
    return float(out) if np.ndim(out) == 0 else out


def _amplitude_terms(p: QuantumParams):
    nu = displaced_amplitude(p)
    nu2 = np.abs(nu) ** 2
    coherent = (
        np.abs(p.beta) ** 2
        + np.abs(p.alpha) ** 2
        + 2 * np.real(np.conj(p.beta) * p.gamma * p.alpha)
    )
    # np.angle(0) == 0 keeps the nu = 0 case finite; its prefactor vanishes anyway.
    two_theta = 2 * (p.phi - np.angle(nu))
    return nu2, coherent, two_theta


def photon_moments(p: QuantumParams) -> MomentPair:
    """Detected photon-number mean and variance in the large-mean-field form.

    Drops the sinh^2(r) squeezed-vacuum contributions, which are negligible next
    to ``|beta|^2`` at realistic powers. Use :func:`photon_moments_full` to keep
    them.
    """
    nu2, coherent, two_theta = _amplitude_terms(p)
    r, eta = p.r, p.eta
    squeezed = 2 * np.sinh(r) ** 2 - np.sinh(2 * r) * np.cos(two_theta)
    mean = eta * coherent
    variance = eta**2 * nu2 * squeezed + mean
    return MomentPair(mean, variance)


def photon_moments_full(p: QuantumParams) -> MomentPair:
    """Detected moments including squeezed-vacuum, vacuum-port and perpendicular-mode terms."""
    nu2, _, two_theta = _amplitude_terms(p)
    r, eta = p.r, p.eta
    sh2 = np.sinh(r) ** 2
    perp = (1 - np.abs(p.gamma) ** 2) * np.abs(p.alpha) ** 2
    mode_mean = nu2 + sh2
    mode_var = (
        2 * sh2**2
        + 2 * sh2
        + nu2 * (np.cosh(2 * r) - np.sinh(2 * r) * np.cos(two_theta))
    )
    mean = eta * (mode_mean + perp)
    variance = eta**2 * mode_var + eta * (1 - eta) * mode_mean + eta * perp
    return MomentPair(mean, variance)


def kerr_squeeze_angle(beta, r):
    """Squeezing angle that leaves the amplitude noise of a Kerr state unchanged.

    Returns the ``+`` branch, ``theta + arccos(x)/2`` with ``theta = arg(beta)``
    and ``x = tanh(r) (2|beta|^2 + cosh(2r) + 1) / (2|beta|^2)``. The ``-``
    branch mirrors the ellipse about the mean field; a positive Kerr
    coefficient produces that one, so negate the offset for it.
    """
    b2 = np.abs(beta) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.tanh(r) * (2 * b2 + np.cosh(2 * r) + 1) / (2 * b2)
    if np.any(~np.isfinite(arg)) or np.any(np.abs(arg) > 1):
        raise SqueezeDomainError(
            "tanh(r)(2|beta|^2 + cosh 2r + 1)/(2|beta|^2) exceeds 1; r too large for |beta|"
        )
    out = 0.5 * np.arccos(arg) + np.angle(beta)
    return float(out) if np.ndim(out) == 0 else out


def haus_squeeze_estimate(g, beta):
    """Squeezing parameter produced by a Kerr phase of ``g`` rad per photon.

    ``-log(1 + 2s^2 - 2s sqrt(1 + s^2)) / 2`` with ``s = g |beta|^2`` is
    identically ``asinh(s)``, which is what is evaluated here (no cancellation
    at large ``s``). ``g`` is the self-phase shift per photon, i.e. twice the
    coefficient in ``exp(i c n^2)``.
    """
    if np.any(np.asarray(g) < 0):
        raise ValueError("g must be non-negative")
    return np.arcsinh(g * np.abs(beta) ** 2)


def taylor_variance_small_R(phi, R, phi_alpha):
    """First-order expansion of cos(2 phi - 2 R sin phi_alpha) in R."""
    if np.any(np.asarray(R) < 0):
        raise ValueError("R must be non-negative")
    return np.cos(2 * phi) + 2 * R * np.sin(2 * phi) * np.sin(phi_alpha)


def count_periodic_extrema(values, rtol=1e-12) -> int:
    """Number of strict local extrema of a periodic sequence.

    Neighbours closer than ``rtol * max|values|`` count as equal and raise
    :class:`ExtremaTieError`.
    """
    v = np.asarray(values, dtype=float)
    tol = rtol * max(np.max(np.abs(v)), np.finfo(float).tiny)
    left = v - np.roll(v, 1)
    right = v - np.roll(v, -1)
    if np.any(np.abs(left) <= tol):
        raise ExtremaTieError("plateau in variance trace; extrema are ambiguous")
    return int(np.sum((left > 0) & (right > 0)) + np.sum((left < 0) & (right < 0)))


def variance_vs_displacement_phase(template: QuantumParams, samples: int = 1024):
    """Variance over one turn of the displacement phase, other magnitudes fixed."""
    phase = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    p = template.replace(alpha=np.abs(template.alpha) * np.exp(1j * phase))
    return phase, photon_moments(p).variance


def count_variance_extrema(template: QuantumParams, samples: int = 1024) -> int:
    if samples < 256:
        raise ValueError("need at least 256 samples per turn")
    _, var = variance_vs_displacement_phase(template, samples)
    return count_periodic_extrema(var)


def bifurcation_scan(
    template: QuantumParams, alpha_mags: Sequence[float], samples: int = 1024
) -> list[tuple[float, int]]:
    """Extrema count per displacement magnitude, as ``(R, count)`` pairs."""
    mags = np.asarray(alpha_mags, dtype=float)
    if np.any(np.diff(mags) < 0):
        raise ValueError("alpha_mags must be sorted ascending")
    out = []
    for a in mags:
        p = template.replace(alpha=a)
        out.append((float(p.ratio), count_variance_extrema(p, samples)))
    return out


def bifurcation_threshold(
    template: QuantumParams, lo: float, hi: float, rtol: float = 1e-3, samples: int = 2048
) -> float:
    """Bisect the displacement magnitude where the extrema count goes 2 -> 4.

    Returns the threshold as R = |gamma alpha| / |beta|.
    """
    def count(a):
        return count_variance_extrema(template.replace(alpha=a), samples)

    if count(lo) != 2 or count(hi) != 4:
        raise ValueError("bracket must go from 2 extrema at lo to 4 at hi")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if count(mid) == 2:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    return float(np.abs(template.gamma) * a / np.abs(template.beta))
