"""Exception types shared across the package."""


class SivPhotError(Exception):
    """Base class for all package errors."""


class ComplexEigenvalue(SivPhotError, ValueError):
    """The rate matrix has complex eigenvalues (A^2 < 4B): no real tau1, tau2."""


class InvalidLimits(SivPhotError, ValueError):
    """Limiting values of a, tau1, tau2 do not map onto positive rate coefficients."""


class UnknownCalibration(SivPhotError, ValueError):
    """No power-to-photon-flux calibration is stored for the requested wavelength."""


class EmptyChannel(SivPhotError, ValueError):
    """A detector channel holds no events, so no correlation can be formed."""


class DegenerateTrace(SivPhotError, ValueError):
    """Every window of a time trace sits below the absolute floor."""


class NoConvergence(SivPhotError, RuntimeError):
    """The least-squares optimizer stopped without meeting its tolerances."""


class StageDivergence(SivPhotError, RuntimeError):
    """One stage of the staged power-dependence fit failed.

    The ``stage`` attribute names the failing stage ("limits", "sigma",
    "c" or "refine").
    """

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class OutOfRange(SivPhotError, ValueError):
    """A derived probability exceeds 1, signalling inconsistent inputs."""


class QuadratureFailure(SivPhotError, RuntimeError):
    """Adaptive quadrature could not reach the requested relative tolerance."""


class FileFormatError(SivPhotError, ValueError):
    """A timestamp, series or histogram file could not be parsed."""
