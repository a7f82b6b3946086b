"""Published parameters of individual SiV emitters, used as reproduction targets.

``DESHELVING_FITS`` holds the six emitters with complete de-shelving model
fits (rates, pump slope sigma, de-shelving saturation power c, and the
measured saturation power).  ``POPULATION_SUMMARY`` holds the fourteen
emitters with saturated excited-state population, maximum count rate and
quantum efficiency for parallel and perpendicular dipole orientation.

The two sets disagree on k23 of ND3 (23.3 vs 23.6 MHz); each is kept as
published and used only to reproduce its own columns.
"""

from dataclasses import dataclass

from .rate_model import RateCoefficients

# excitation wavelengths used for the two host types (nm)
EXCITATION_WAVELENGTH = {"ND": 671, "NI": 695}

ETA_DET_INT = 0.25
ETA_COLL = {"parallel": 0.78, "perpendicular": 0.28}


@dataclass(frozen=True)
class DeshelvingFit:
    name: str
    rates: RateCoefficients
    Psat: float

    @property
    def wavelength_nm(self) -> int:
        return EXCITATION_WAVELENGTH[self.name[:2]]


@dataclass(frozen=True)
class PopulationRow:
    name: str
    k21: float
    k23: float
    k31_0: float
    d: float
    n2_inf: float
    I_inf_mcps: float
    qe_parallel_pct: float
    qe_perpendicular_pct: float

    @property
    def rates(self) -> RateCoefficients:
        return RateCoefficients(k21=self.k21, k23=self.k23, k31_0=self.k31_0, d=self.d)


def _fit(name, k21, k23, k31_0, d, sigma, c, Psat):
    return DeshelvingFit(name, RateCoefficients(k21, k23, k31_0, d, c=c, sigma=sigma), Psat)


DESHELVING_FITS = {
    f.name: f for f in (
        _fit("ND1", 4408, 137.0, 0.27, 18.6, 12.0, 11.9, 30.6),
        _fit("ND2", 3424, 24.6, 1.7, 24.4, 8.9, 177, 167),
        _fit("ND3", 771, 23.3, 0.35, 24.7, 5.7, 57, 105.3),
        _fit("ND4", 1084, 31.7, 0.12, 13.1, 7.0, 2743, 282),
        _fit("NI1", 3479, 92.6, 0.82, 45.5, 4.2, 1067, 692),
        _fit("NI7", 1638, 1.5, 0.16, 0.7, 7.2, 300, 46.9),
    )
}

_SUMMARY_ROWS = [
    ("ND1", 4408, 137, 0.27, 18.6, 0.12, 0.84, 0.8, 2.2),
    ("ND2", 3424, 24.6, 1.7, 24.4, 0.51, 1.53, 0.4, 1.2),
    ("ND3", 771, 23.6, 0.35, 24.7, 0.51, 2.46, 3.2, 8.9),
    ("ND4", 1084, 31.7, 0.12, 13.1, 0.29, 2.06, 3.3, 9.2),
    ("ND5", 1545.1, 17.4, 1, 11.9, 0.43, 2.39, 1.9, 5.2),
    ("ND6", 770.1, 11.1, 0.79, 5.65, 0.37, 0.78, 1.4, 3.9),
    ("ND7", 1053.6, 21.7, 0.11, 3.44, 0.14, 0.59, 2.1, 5.7),
    ("NI1", 3479, 92.6, 0.82, 45.5, 0.33, 6.24, 2.8, 7.7),
    ("NI3", 161, 7.3, 0.24, 11.9, 0.62, 0.17, 0.9, 2.4),
    ("NI7", 1638, 1.5, 0.16, 0.7, 0.36, 0.34, 0.3, 0.8),
    ("NI8", 2487, 12.5, 0.15, 5.3, 0.30, 0.9, 0.6, 1.7),
    ("NI9", 1181.7, 1.8, 0.21, 3.1, 0.65, 3.82, 2.6, 7.1),
    ("NI10", 798.8, 34.6, 0.22, 16.2, 0.32, 0.8, 1.6, 4.4),
    ("NI11", 1076, 13.3, 0.32, 8.2, 0.39, 0.52, 0.6, 1.8),
]

POPULATION_SUMMARY = {row[0]: PopulationRow(*row) for row in _SUMMARY_ROWS}

# Ir at the SiV zero-phonon line
IR_EPSILON = complex(-18, 25)
ZPL_WAVELENGTH_NM = 740.0
