"""Exception hierarchy shared by the compute modules and the CLI."""


class VDarwinError(Exception):
    """Base class for all package errors."""


class DegenerateKernel(VDarwinError, ValueError):
    """Singular kernel evaluated at coincident points with zero softening."""


class InvalidExponents(VDarwinError, ValueError):
    pass


class EmptyEnsemble(VDarwinError, ValueError):
    pass


class NoConvergence(VDarwinError, RuntimeError):
    """The Picard iteration for the vector potential did not reach its tolerance.

    ``time`` is filled in by the flow integrator when the failure happens
    during a time step.
    """

    def __init__(self, residual, iterations, time=None):
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.time = time
        super().__init__(self._message())

    def _message(self):
        msg = f"fixed point not reached: residual={self.residual:.3e} after {self.iterations} iterations"
        if self.time is not None:
            msg += f" (t={self.time:.6g})"
        return msg

    def at_time(self, t):
        self.time = float(t)
        self.args = (self._message(),)
        return self


class AprioriBoundViolated(VDarwinError, RuntimeError):
    """A Picard iterate left the ball of radius C-bar."""


class QuadratureTooCoarse(VDarwinError, RuntimeError):
    pass


class SizeMismatch(VDarwinError, ValueError):
    pass


class WeightMismatch(VDarwinError, ValueError):
    pass


class ThetaOutOfRange(VDarwinError, ValueError):
    pass


class LabelMismatch(VDarwinError, ValueError):
    pass


class RegimeViolated(VDarwinError, ValueError):
    pass


class NonPositiveQ(VDarwinError, ValueError):
    pass


class InvalidSpec(VDarwinError, ValueError):
    """Bad user configuration (maps to CLI exit code 2)."""
