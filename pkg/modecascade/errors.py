"""Exceptions raised while planning, synthesizing and running mode cascades."""


class CascadeError(Exception):
    """Base class for every error raised by modecascade.

    Parameters
    ----------
    message : str
        Human readable description of the failure.
    step_index : int | None
        Index of the cascade step the error belongs to, if known.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index

    def at_step(self, step_index: int) -> "CascadeError":
        """Tag the error with a cascade step index and return it."""
        self.step_index = step_index
        return self

    def __str__(self) -> str:
        message = super().__str__()
        if self.step_index is None:
            return message
        return f"step {self.step_index}: {message}"


# spectrum
class ZeroNormalization(CascadeError, ValueError):
    """|a+b|² equals |a|², so the line has no normalization constant."""


class WrongDirection(CascadeError, ValueError):
    """The sign of |a+b|² − |a|² contradicts the requested direction."""


class NegativeCoefficient(CascadeError, ValueError):
    """Some d_k on the window is negative."""


class WindowTooSmall(CascadeError, ValueError):
    """The window cannot certify the minimum or the tail of the spectrum."""


# planner
class ParallelVectors(CascadeError, ValueError):
    """a and b are parallel, so there is no shear direction."""


class AssumptionFail(CascadeError, ValueError):
    """A planned step does not meet the configured spectral thresholds."""


class LiftNotFound(CascadeError, ValueError):
    """No sum of three squares was found in (n, n+8]."""


class DownhillNotDown(CascadeError, ValueError):
    """The downhill target is not strictly closer to the origin."""


# controller
class DegenerateSpacing(CascadeError, ValueError):
    """d_{k+1} equals d_{1−k}, so the Newton system is singular."""


class NoContraction(CascadeError, RuntimeError):
    """The dyadic Newton iteration stopped contracting."""


class Stage1Fail(CascadeError, RuntimeError):
    """The feedback stage did not empty mode 0."""


class WaitTimeout(CascadeError, RuntimeError):
    """Free decay cannot reach the requested off-mode ratio."""


class NoPush(CascadeError, RuntimeError):
    """The downhill push left too little mass on mode 1."""


# integrator
class ZeroMass(CascadeError, ValueError):
    """A state with zero total mass was given."""


class LeakExceeded(CascadeError, RuntimeError):
    """Too much mass reached the edge of the window or box."""


class BlowUp(CascadeError, RuntimeError):
    """Mass grew although every diffusion coefficient is nonnegative."""


# pipeline
class ResidualTooLarge(CascadeError, RuntimeError):
    """A step finished with an off-mode residual above tolerance."""


class InsufficientData(CascadeError, ValueError):
    """Too few samples to fit a decay model."""
