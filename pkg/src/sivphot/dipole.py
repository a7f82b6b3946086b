"""Point dipole in vacuum above a planar half-space of permittivity epsilon.

The dipole field is expanded in plane waves (angular spectrum); each
component is reflected with the Fresnel coefficient of its polarization.
All integrals run over the transverse wavenumber normalized to k0,
s = k_par/k0, with s_z = sqrt(1 - s^2) and the branch Im(s_z) >= 0.

Sign convention: r_s = (kz1 - kz2)/(kz1 + kz2) and
r_p = (eps*kz1 - kz2)/(eps*kz1 + kz2), so at normal incidence r_p = -r_s,
and a perfect conductor has r_s = -1, r_p = +1.  With this convention a
perpendicular dipole adds to its image (r_p) and a parallel one subtracts.

Rates are normalized to the free-space total rate gamma_0:

    gamma_tot/gamma_0 = 1 + 3/2 Re int s^3/s_z r_p exp(2i k0 z s_z) ds          (perp)
    gamma_tot/gamma_0 = 1 + 3/4 Re int s/s_z [r_s - s_z^2 r_p] exp(...) ds       (par)

Three quantities are computed independently: the total rate, the far-field
power in the upper half-space (angular integral of the pattern) and the
power entering the substrate (plane-wave flux through the interface).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from .errors import QuadratureFailure

QUAD_RTOL = 1e-6
TAIL_DECAY = 20.0      # evanescent cutoff: exp(-2*TAIL_DECAY) truncation
N_THETA = 512
MIN_HEIGHT_NM = 5.0

_GL_X, _GL_W = np.polynomial.legendre.leggauss(N_THETA)


class NearFieldWarning(UserWarning):
    """Height below the range where the dipole model is quantitatively meaningful."""


@dataclass(frozen=True)
class DipoleEnvironment:
    height_z: float                                   # nm
    wavelength: float                                 # nm, vacuum
    epsilon_substrate: complex
    orientation: Literal["parallel", "perpendicular"]
    NA: float = 0.8

    def __post_init__(self):
        if not self.height_z > 0:
            raise ValueError("height_z must be > 0")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not 0.0 < self.NA <= 1.0:
            raise ValueError("NA must lie in (0, 1]")
        if complex(self.epsilon_substrate).imag < 0:
            raise ValueError("Im(epsilon) must be >= 0 (passive medium)")
        if self.orientation not in ("parallel", "perpendicular"):
            raise ValueError("orientation must be 'parallel' or 'perpendicular'")
        if self.height_z < MIN_HEIGHT_NM:
            warnings.warn(f"height {self.height_z} nm < {MIN_HEIGHT_NM} nm: near-field "
                          "energy transfer regime", NearFieldWarning, stacklevel=3)

    @property
    def k0(self) -> float:
        return 2 * math.pi / self.wavelength

    @property
    def kz(self) -> float:
        """Dimensionless phase k0*z."""
        return self.k0 * self.height_z

    @property
    def absorbing(self) -> bool:
        return complex(self.epsilon_substrate).imag > 0


@dataclass(frozen=True)
class DecayRates:
    gamma_r_rel: float
    gamma_nr_rel: float
    gamma_tot_rel: float
    eta_a: float
    gamma_up_rel: float           # far-field power into the upper half-space
    balance_error: float          # |tot - (r + nr)| / tot

    def as_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class RadiationPattern:
    theta: np.ndarray             # rad, 0..pi/2
    intensity: np.ndarray         # power per solid angle (azimuth-averaged), units of gamma_0
    weights: np.ndarray           # quadrature weights incl. 2*pi*sin(theta)

    def integral(self, theta_max: float = math.pi / 2) -> float:
        sel = self.theta <= theta_max
        return float(np.sum(self.intensity[sel] * self.weights[sel]))


def _kz(eps, s):
    q = np.sqrt(eps - np.asarray(s, dtype=complex) ** 2)
    return np.where(q.imag < 0, -q, q)


def fresnel(epsilon: complex, s):
    """(r_s, r_p) for vacuum above a half-space of permittivity ``epsilon``."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("s must be >= 0")
    k1 = _kz(1.0, s)
    k2 = _kz(complex(epsilon), s)
    # identical media at grazing incidence give 0/0; no interface means r = 0
    ds, dp_ = k1 + k2, epsilon * k1 + k2
    with np.errstate(invalid="ignore", divide="ignore"):
        rs = np.where(ds == 0, 0.0, (k1 - k2) / np.where(ds == 0, 1.0, ds))
        rp = np.where(dp_ == 0, 0.0, (epsilon * k1 - k2) / np.where(dp_ == 0, 1.0, dp_))
    if rs.ndim == 0:
        return complex(rs), complex(rp)
    return rs, rp


def _quad(f, a, b, **kw):
    # the error estimate is checked below; scipy's own warning is redundant
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        val, err = quad(f, a, b, epsabs=0.0, epsrel=1e-10, limit=2000, **kw)
    if not np.isfinite(val) or err > QUAD_RTOL * max(abs(val), 1e-3):
        raise QuadratureFailure(f"quadrature error {err:.2e} on [{a}, {b}] exceeds tolerance")
    return val


def _spectral_weights(env: DipoleEnvironment, s, sz):
    """(w_s, w_p) such that the plane-wave power of each polarization per ds
    is w * (s/s_z) up to the common 3/4 (par) or 3/2 (perp) prefactor."""
    if env.orientation == "perpendicular":
        return np.zeros_like(s), s * s
    return np.ones_like(s), -sz * sz


def _total_rate(env: DipoleEnvironment) -> float:
    eps, x = complex(env.epsilon_substrate), 2.0 * env.kz
    perp = env.orientation == "perpendicular"
    pref = 1.5 if perp else 0.75

    # propagating, q = s_z in [0, 1]: (s/s_z) ds = dq
    def g(q):
        s = math.sqrt(max(1.0 - q * q, 0.0))
        rs, rp = fresnel(eps, s)
        return s * s * rp if perp else rs - q * q * rp

    prop = (_quad(lambda q: g(q).real, 0.0, 1.0, weight="cos", wvar=x)
            - _quad(lambda q: g(q).imag, 0.0, 1.0, weight="sin", wvar=x))

    # evanescent, s_z = i u: (s/s_z) ds = -i du; Re(-i * h) = Im(h)
    def h(u):
        s = math.sqrt(1.0 + u * u)
        rs, rp = fresnel(eps, s)
        val = s * s * rp if perp else rs + u * u * rp
        return val.imag * math.exp(-x * u)

    evan = _quad(h, 0.0, TAIL_DECAY / env.kz, points=[1.0])
    return 1.0 + pref * (prop + evan)


def _substrate_flux(env: DipoleEnvironment) -> float:
    """Power crossing the interface downward, in units of gamma_0.

    Propagating components carry (1 - |r|^2) of their incident power; an
    evanescent component carries 2 Im(r) exp(-2 k0 z u).
    """
    eps, x = complex(env.epsilon_substrate), 2.0 * env.kz
    perp = env.orientation == "perpendicular"
    pref = 0.75 if perp else 0.375

    def g(q):
        s = math.sqrt(max(1.0 - q * q, 0.0))
        rs, rp = fresnel(eps, s)
        if perp:
            return s * s * (1 - abs(rp) ** 2)
        return (1 - abs(rs) ** 2) + q * q * (1 - abs(rp) ** 2)

    def h(u):
        s = math.sqrt(1.0 + u * u)
        rs, rp = fresnel(eps, s)
        val = s * s * rp.imag if perp else rs.imag + u * u * rp.imag
        return 2.0 * val * math.exp(-x * u)

    prop = _quad(g, 0.0, 1.0)
    evan = _quad(h, 0.0, TAIL_DECAY / env.kz, points=[1.0])
    return pref * (prop + evan)


def _pattern_values(env: DipoleEnvironment, theta):
    s, c = np.sin(theta), np.cos(theta)
    rs, rp = fresnel(complex(env.epsilon_substrate), s)
    ph = np.exp(2j * env.kz * c)
    if env.orientation == "perpendicular":
        return 3 / (8 * math.pi) * s * s * np.abs(1 + rp * ph) ** 2
    return 3 / (16 * math.pi) * (c * c * np.abs(1 - rp * ph) ** 2 + np.abs(1 + rs * ph) ** 2)


def _gauss_grid(theta_max: float):
    theta = 0.5 * theta_max * (_GL_X + 1.0)
    w = 0.5 * theta_max * _GL_W * 2 * math.pi * np.sin(theta)
    return theta, w


def radiation_pattern(env: DipoleEnvironment) -> RadiationPattern:
    """Upper half-space far-field pattern from direct plus reflected waves.

    The parallel dipole is averaged over azimuth.  The pattern integrates to
    the power radiated into the upper half-space (``gamma_up_rel``).
    """
    theta, w = _gauss_grid(math.pi / 2)
    return RadiationPattern(theta, _pattern_values(env, theta), w)


def _cone_power(env: DipoleEnvironment, theta_max: float) -> float:
    theta, w = _gauss_grid(theta_max)
    return float(np.sum(_pattern_values(env, theta) * w))


def decay_rates(env: DipoleEnvironment) -> DecayRates:
    """Total, radiative and non-radiative rates relative to free space.

    gamma_r is the power reaching the far field: the upper half-space only
    above an absorbing substrate, plus the transmitted power when the
    substrate is lossless.  gamma_nr is the power absorbed by the substrate.
    """
    tot = _total_rate(env)
    up = _cone_power(env, math.pi / 2)
    down = _substrate_flux(env)
    if env.absorbing:
        g_r, g_nr = up, down
    else:
        g_r, g_nr = up + down, 0.0
    balance = abs(tot - (g_r + g_nr)) / abs(tot)
    return DecayRates(g_r, g_nr, tot, g_r / (g_r + g_nr), up, balance)


def collection_efficiency(env: DipoleEnvironment,
                          reference: Literal["upper", "total"] = "upper") -> float:
    """Fraction of radiated power inside the objective cone theta <= arcsin(NA).

    ``reference="upper"`` divides by the power radiated into the upper
    half-space; ``"total"`` divides by all far-field radiated power, which
    for free space is the full 4 pi solid angle.
    """
    cone = _cone_power(env, math.asin(env.NA))
    if reference == "upper":
        return cone / _cone_power(env, math.pi / 2)
    if reference == "total":
        return cone / decay_rates(env).gamma_r_rel
    raise ValueError("reference must be 'upper' or 'total'")


def effective_quantum_yield(eta0: float, rates: DecayRates) -> float:
    """eta = eta0 / ((1 - eta0)/gamma_r_rel + eta0/eta_a)."""
    if not 0.0 < eta0 <= 1.0:
        raise ValueError("eta0 must lie in (0, 1]")
    if rates.gamma_r_rel <= 0 or rates.eta_a <= 0:
        return 0.0
    return eta0 / ((1.0 - eta0) / rates.gamma_r_rel + eta0 / rates.eta_a)


def height_sweep(heights, wavelength: float, epsilon: complex, orientation: str,
                 NA: float = 0.8, eta0: float | None = None) -> dict:
    """Rates, collection efficiency and (optionally) effective yield versus z."""
    cols = {k: [] for k in ("z", "gamma_r_rel", "gamma_nr_rel", "gamma_tot_rel",
                            "eta_a", "eta_coll")}
    if eta0 is not None:
        cols["eta_eff"] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NearFieldWarning)
        for z in heights:
            env = DipoleEnvironment(float(z), wavelength, epsilon, orientation, NA)
            r = decay_rates(env)
            cols["z"].append(float(z))
            for k in ("gamma_r_rel", "gamma_nr_rel", "gamma_tot_rel", "eta_a"):
                cols[k].append(getattr(r, k))
            cols["eta_coll"].append(collection_efficiency(env))
            if eta0 is not None:
                cols["eta_eff"].append(effective_quantum_yield(eta0, r))
    return {k: np.array(v) for k, v in cols.items()}
