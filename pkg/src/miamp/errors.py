"""Exception taxonomy for the package.

Everything derives from MiampError so callers can catch one base class.
"""


class MiampError(Exception):
    pass


class UnsupportedDimension(MiampError):
    """Index count p outside the supported range (1..8)."""


class InvalidSpec(MiampError):
    """Malformed link specification (empty polynomial, bad noise, ...)."""


class AllocationTooLarge(MiampError):
    """Requested dataset exceeds the configured entry budget."""


class QuadratureFailure(MiampError):
    """Quadrature error estimate exceeded tolerance, or internal cross-checks
    of two integration routes disagreed beyond tolerance."""


class DegenerateLikelihood(MiampError):
    """z_out underflowed: the (y, omega) pair is (numerically) impossible."""


class DenoiserFailure(MiampError):
    """Denoiser backend failed; carries the offending sample index if any."""

    def __init__(self, msg, sample_index=None):
        super().__init__(msg)
        self.sample_index = sample_index


class SingularV(MiampError):
    """I - M (or a supplied V) is singular beyond the epsilon regularizer."""


class NoConvergence(MiampError):
    """Iteration hit max_iter without meeting the convergence criterion."""


class NonConvergentPowerIteration(MiampError):
    """Power iteration failed to settle within the iteration cap."""


class FixedPointUnavailable(MiampError):
    """A conditioned fixed point was required but could not be computed."""


class DimensionMismatch(MiampError):
    """Dataset / channel / state dimensions disagree."""


class SingularOnsager(MiampError):
    """(I + A_k) not invertible even after regularization."""


class MissingInput(MiampError):
    """An expected result file is absent."""
