"""Recompute published table values and dipole figures from the models.

Each function returns plain rows (dicts) holding the model value next to
the published one, so callers can report deviations or apply tolerances.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import dipole as dp
from .inference import constant_rate_counterpart, constant_rate_prediction, estimate_quantum_efficiency
from .rate_model import absorption_cross_section, power_to_photon_flux, shape_from_rates, steady_state
from .reference import (DESHELVING_FITS, ETA_COLL, ETA_DET_INT, IR_EPSILON, POPULATION_SUMMARY,
                        ZPL_WAVELENGTH_NM)

# published calibration examples: (power uW, wavelength nm, photons/s/cm^2)
FLUX_EXAMPLES = ((692.0, 695, 2.1e23), (14.3, 671, 4.1e21))
# published absorption cross-section range (cm^2)
CROSS_SECTION_RANGE = (1.4e-14, 4.2e-14)
BALANCE_HEIGHTS = (10.0, 40.0, 75.0, 80.0, 100.0, 200.0)


def population_table() -> list:
    """Saturated excited-state population and quantum efficiencies per emitter."""
    rows = []
    for name, row in POPULATION_SUMMARY.items():
        rc = row.rates
        I_inf = row.I_inf_mcps * 1e6
        rows.append({
            "name": name,
            "n2_inf": steady_state(rc, math.inf).n2,
            "n2_inf_published": row.n2_inf,
            "qe_parallel_pct": 100 * estimate_quantum_efficiency(
                I_inf, rc, ETA_DET_INT, ETA_COLL["parallel"]),
            "qe_parallel_pct_published": row.qe_parallel_pct,
            "qe_perpendicular_pct": 100 * estimate_quantum_efficiency(
                I_inf, rc, ETA_DET_INT, ETA_COLL["perpendicular"]),
            "qe_perpendicular_pct_published": row.qe_perpendicular_pct,
        })
    return rows


def model_contrast(fraction: float = 0.01) -> list:
    """tau2 of the constant-rate and de-shelving models at ``fraction``*Psat."""
    rows = []
    for name, fit in DESHELVING_FITS.items():
        rc = fit.rates
        P = fraction * fit.Psat
        k21, k23, k31, sigma = constant_rate_counterpart(rc, fit.Psat)
        const = constant_rate_prediction(k21, k23, k31, sigma, [P])["tau2"][0]
        desh = shape_from_rates(rc, P).tau2
        rows.append({"name": name, "power": P, "tau2_deshelving": desh, "tau2_constant": const,
                     "ratio": desh / const, "strong_deshelving": rc.d > 10 * rc.k31_0})
    return rows


def calibration() -> dict:
    flux = [{"power": P, "wavelength_nm": wl, "flux": power_to_photon_flux(P, wl),
             "flux_published": ref} for P, wl, ref in FLUX_EXAMPLES]
    sigmas = [absorption_cross_section(f.rates.sigma, f.wavelength_nm)
              for f in DESHELVING_FITS.values()]
    return {"flux": flux, "cross_section_min": min(sigmas), "cross_section_max": max(sigmas),
            "cross_section_range_published": CROSS_SECTION_RANGE}


def _env(z, orientation, NA=0.8, eps=IR_EPSILON, wavelength=ZPL_WAVELENGTH_NM):
    return dp.DipoleEnvironment(float(z), wavelength, eps, orientation, NA)


def dipole_summary(n_heights: int = 61) -> dict:
    """Collection efficiency, rate bounds, power balance and effective yield
    for both orientations above Ir at the zero-phonon line."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", dp.NearFieldWarning)
        for o in ("parallel", "perpendicular"):
            zr = np.linspace(40.0, 100.0, n_heights)
            coll = np.array([dp.collection_efficiency(_env(z, o)) for z in zr])
            zs = np.linspace(10.0, 300.0, 291)
            # above an absorbing substrate gamma_r is the upward far-field power,
            # so the fine scan skips the Sommerfeld quadrature
            gr = np.array([dp.radiation_pattern(_env(z, o)).integral() for z in zs])
            ze = np.concatenate([np.linspace(5.0, 20.0, 16), np.linspace(25.0, 300.0, 56)])
            eta = np.array([dp.effective_quantum_yield(0.05, dp.decay_rates(_env(z, o)))
                            for z in ze])
            balance = [dp.decay_rates(_env(z, o)).balance_error for z in BALANCE_HEIGHTS]
            out[o] = {
                "eta_coll_75nm": dp.collection_efficiency(_env(75.0, o)),
                "eta_coll_published": ETA_COLL[o],
                "range_heights": zr, "range_eta_coll": coll,
                "range_center": 0.5 * (coll.max() + coll.min()),
                "range_rel_halfwidth": (coll.max() - coll.min()) / (coll.max() + coll.min()),
                "gamma_r_heights": zs, "gamma_r_rel": gr, "gamma_r_max": float(gr.max()),
                "balance_heights": BALANCE_HEIGHTS, "balance_error": balance,
                "eta_eff_heights": ze, "eta_eff": eta,
            }
    return out
