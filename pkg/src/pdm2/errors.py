"""Exception hierarchy shared by every pdm2 module.

Each exception carries the process exit code the command-line front end
reports for it, so library errors and CLI exit statuses stay in one place.
"""

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_NONCONVERGENCE = 5
EXIT_LOW_CONFIDENCE = 6


class Pdm2Error(Exception):
    """Base class for all pdm2 errors."""

    exit_code = EXIT_DEGENERATE

    @property
    def code(self):
        return type(self).__name__


# -- bad arguments ---------------------------------------------------------

class InvalidBand(Pdm2Error, ValueError):
    exit_code = EXIT_BAD_ARGS


class WindowOutOfRange(Pdm2Error, ValueError):
    exit_code = EXIT_BAD_ARGS


class InvalidParameter(Pdm2Error, ValueError):
    exit_code = EXIT_BAD_ARGS


# -- degenerate data -------------------------------------------------------

class EmptyInput(Pdm2Error, ValueError):
    pass


class MismatchedGrid(Pdm2Error, ValueError):
    pass


class DegenerateDesign(Pdm2Error, ValueError):
    pass


class DegeneratePoints(Pdm2Error, ValueError):
    pass


class NoSignal(Pdm2Error, ValueError):
    pass


class InsufficientMotion(Pdm2Error, ValueError):
    pass


class RankDeficient(Pdm2Error, ValueError):
    pass


class SeriesTooShort(Pdm2Error, ValueError):
    pass


class EmptyModel(Pdm2Error, ValueError):
    pass


class InsufficientData(Pdm2Error, ValueError):
    pass


class EmptySession(Pdm2Error, ValueError):
    pass


class PlanInfeasible(Pdm2Error, ValueError):
    pass


# -- estimator outcomes ----------------------------------------------------

class LowConfidence(Pdm2Error):
    """The searched modality is absent (correlation peak below threshold)."""

    exit_code = EXIT_LOW_CONFIDENCE

    def __init__(self, message, peak_ncc=None):
        super().__init__(message)
        self.peak_ncc = peak_ncc


class NonConvergence(Pdm2Error):
    exit_code = EXIT_NONCONVERGENCE


class FormatError(Pdm2Error, OSError):
    exit_code = EXIT_IO


# -- soft warnings ---------------------------------------------------------

class OutOfCalibratedRange(UserWarning):
    """ToF outside the range the rectification model was fit on."""


class DegenerateBinning(UserWarning):
    """Equi-depth boundaries collapsed; equi-width fallback in use."""


class SingularNormalEquations(UserWarning):
    """LM normal equations stayed singular after damping increases."""
