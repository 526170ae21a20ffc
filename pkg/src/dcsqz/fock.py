"""Exact truncated-Fock-space and Monte Carlo oracles for the Gaussian model.

These routines exist to check :mod:`dcsqz.gaussian` by an independent route:
states are built by exponentiating the ladder-operator generators on the
vacuum, and moments are read off the number distribution. Photon numbers up to
a few hundred are practical; the experimental 1e8-photon regime is not
reachable here and is covered only by the closed forms.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln

from .errors import TruncationError
from .gaussian import QuantumParams, SqueezeSpec, displaced_amplitude

TAIL_TOL = 1e-8
MC_CHUNK = 50_000


@dataclass(frozen=True)
class FockState:
    coeffs: np.ndarray

    @property
    def truncation(self) -> int:
        return len(self.coeffs) - 1

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))

    def tail_mass(self) -> float:
        start = int(math.ceil(0.9 * self.truncation)) + 1
        return float(np.sum(np.abs(self.coeffs[start:]) ** 2))


@dataclass(frozen=True)
class OracleMoments:
    mean: float
    variance: float
    truncation_error: float = 0.0
    mean_se: float = 0.0
    variance_se: float = 0.0


def adequacy_bound(nu, r) -> int:
    return int(math.ceil(8 * (abs(nu) ** 2 + math.sinh(r) ** 2) + 32))


def default_truncation(nu, r) -> int:
    return max(512, adequacy_bound(nu, r))


def _warn_if_small(N, nu, r):
    need = adequacy_bound(nu, r)
    if N < need:
        warnings.warn(f"truncation N={N} is below the adequacy bound {need}", stacklevel=3)


def _annihilation(N: int):
    n = np.arange(1, N + 1)
    return sparse.diags(np.sqrt(n), 1, shape=(N + 1, N + 1), format="csr", dtype=complex)


def _checked(coeffs: np.ndarray) -> FockState:
    state = FockState(coeffs / np.linalg.norm(coeffs))
    tail = state.tail_mass()
    if tail > TAIL_TOL:
        raise TruncationError(f"tail mass {tail:.2e} above {TAIL_TOL:.0e}; raise N")
    return state


def vacuum(N: int) -> np.ndarray:
    v = np.zeros(N + 1, dtype=complex)
    v[0] = 1.0
    return v


def build_displaced_squeezed(nu: complex, s: SqueezeSpec, N: int | None = None) -> FockState:
    """D(nu) S(r, phi) |0> on number states 0..N."""
    if N is None:
        N = default_truncation(nu, s.r)
    _warn_if_small(N, nu, s.r)
    b = _annihilation(N)
    bd = b.conj().T
    psi = vacuum(N)
    if s.r > 0:
        gen = (s.r / 2) * (np.exp(-2j * s.phi) * (b @ b) - np.exp(2j * s.phi) * (bd @ bd))
        psi = expm_multiply(gen.tocsc(), psi)
    if nu != 0:
        gen = nu * bd - np.conj(nu) * b
        psi = expm_multiply(gen.tocsc(), psi)
    return _checked(psi)


def coherent_coeffs(beta: complex, N: int) -> np.ndarray:
    n = np.arange(N + 1)
    if beta == 0:
        return vacuum(N)
    logmag = -abs(beta) ** 2 / 2 + n * math.log(abs(beta)) - 0.5 * gammaln(n + 1)
    return np.exp(logmag) * np.exp(1j * n * np.angle(beta))


def apply_kerr_exact(beta: complex, g: float, N: int | None = None) -> FockState:
    """exp(i g n^2) |beta>, built directly from the Poisson amplitudes."""
    if N is None:
        N = default_truncation(beta, 0.0)
    _warn_if_small(N, beta, 0.0)
    n = np.arange(N + 1)
    return _checked(coherent_coeffs(beta, N) * np.exp(1j * g * n.astype(float) ** 2))


def number_moments(s: FockState) -> OracleMoments:
    p = np.abs(s.coeffs) ** 2
    n = np.arange(len(p), dtype=float)
    mean = float(np.sum(n * p))
    var = float(np.sum(n**2 * p) - mean**2)
    return OracleMoments(mean, var, truncation_error=s.tail_mass() + abs(1 - s.norm))


def ladder_moments(s: FockState):
    """Return <b>, <b^2>, <b+b>."""
    c = s.coeffs
    n = np.arange(len(c), dtype=float)
    b1 = np.sum(np.conj(c[:-1]) * c[1:] * np.sqrt(n[1:]))
    b2 = np.sum(np.conj(c[:-2]) * c[2:] * np.sqrt(n[2:] * n[1:-1]))
    return b1, b2, float(np.sum(n * np.abs(c) ** 2))


def quadrature_variances(s: FockState, angles) -> np.ndarray:
    """Var(x_theta) for x_theta = (e^{-i theta} b + e^{i theta} b+)/sqrt(2)."""
    b1, b2, nbar = ladder_moments(s)
    spread = nbar - abs(b1) ** 2
    corr = b2 - b1**2
    angles = np.asarray(angles, dtype=float)
    return 0.5 + spread + np.real(np.exp(-2j * angles) * corr)


def min_quadrature_variance(s: FockState, samples: int = 3600) -> tuple[float, float]:
    """Minimum quadrature variance and its angle from an angle sweep over [0, pi)."""
    angles = np.linspace(0, np.pi, samples, endpoint=False)
    v = quadrature_variances(s, angles)
    i = int(np.argmin(v))
    return float(v[i]), float(angles[i])


def apply_loss(m: OracleMoments, eta: float) -> OracleMoments:
    """Beamsplitter loss acting on the first two number moments."""
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    return OracleMoments(
        eta * m.mean,
        eta**2 * m.variance + eta * (1 - eta) * m.mean,
        truncation_error=m.truncation_error,
        mean_se=eta * m.mean_se,
        variance_se=eta**2 * m.variance_se,
    )


def _mc_chunk(nu, r, phi, n, seed_seq):
    rng = np.random.default_rng(seed_seq)
    c, s = math.cos(phi), math.sin(phi)
    # principal axes: squeezed along phi, anti-squeezed at phi + pi/2
    u = rng.standard_normal(n) * math.sqrt(0.5 * math.exp(-2 * r))
    v = rng.standard_normal(n) * math.sqrt(0.5 * math.exp(2 * r))
    x = math.sqrt(2) * nu.real + c * u - s * v
    p = math.sqrt(2) * nu.imag + s * u + c * v
    h = 0.5 * (x * x + p * p)
    return n, float(np.sum(h)), float(np.sum(h * h)), float(np.sum(h**3)), float(np.sum(h**4))


def wigner_mc_moments(
    p: QuantumParams, n_samples: int = 200_000, seed: int = 0, jobs: int = 1
) -> OracleMoments:
    """Monte Carlo photon-number moments from Wigner sampling.

    Samples the squeezed mode's Gaussian Wigner function, converts the
    symmetric-ordered moments of h = (x^2 + p^2)/2 to normally ordered ones
    (<n> = <h> - 1/2, Var n = Var h - 1/4), applies loss and adds the Poisson
    statistics of the perpendicular displacement mode.

    The sample budget is cut into fixed-size chunks with seeds spawned from
    ``seed``, so the result does not depend on ``jobs``.
    """
    if n_samples < 100_000:
        raise ValueError("n_samples must be at least 1e5")
    nu = complex(displaced_amplitude(p))
    sizes = [MC_CHUNK] * (n_samples // MC_CHUNK)
    if n_samples % MC_CHUNK:
        sizes.append(n_samples % MC_CHUNK)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(nu, float(p.r), float(p.phi), n, sq) for n, sq in zip(sizes, seqs)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda a: _mc_chunk(*a), args))
    else:
        parts = [_mc_chunk(*a) for a in args]
    tot = np.sum(np.array(parts), axis=0)
    n = tot[0]
    m1, m2, m3, m4 = tot[1] / n, tot[2] / n, tot[3] / n, tot[4] / n
    var_h = m2 - m1**2
    mu4 = m4 - 4 * m3 * m1 + 6 * m2 * m1**2 - 3 * m1**4
    mode = OracleMoments(
        mean=m1 - 0.5,
        variance=var_h - 0.25,
        mean_se=math.sqrt(var_h / n),
        variance_se=math.sqrt(max(mu4 - var_h**2, 0.0) / n),
    )
    out = apply_loss(mode, float(p.eta))
    perp = float(p.eta) * (1 - abs(complex(p.gamma)) ** 2) * abs(complex(p.alpha)) ** 2
    return OracleMoments(
        out.mean + perp,
        out.variance + perp,
        mean_se=out.mean_se,
        variance_se=out.variance_se,
    )
