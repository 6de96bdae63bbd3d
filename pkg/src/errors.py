"""
Exception hierarchy for factorlab.

Every error carries the process exit code the CLI maps it to: domain failures
exit with 1, malformed input and usage errors with 2.
"""


class FactorLabError(Exception):
    """Base class for all factorlab errors."""
    exit_code = 1


class UsageError(FactorLabError):
    """Invalid command-line usage or parameters."""
    exit_code = 2


class MalformedFileError(FactorLabError):
    """A measure, point or manifest file failed strict parsing."""
    exit_code = 2


# measure-core

class DimensionMismatchError(FactorLabError):
    """A vector does not have the dimension of the torus."""
    pass


class NonGridShiftError(FactorLabError):
    """Exact translation was requested for a shift that is not a grid multiple."""
    pass


class IncompatibleDirectionError(FactorLabError):
    """The invariant subspace cannot be represented on the grid."""
    pass


class BadResolutionError(FactorLabError):
    """Quantization resolution does not divide the grid resolution."""
    pass


class InvalidMeasureError(FactorLabError):
    """A measure violates its structural invariants."""
    pass


# metric

class GeometryMismatchError(FactorLabError):
    """Two measures live on different tori."""
    pass


class TotalMassMismatchError(FactorLabError):
    """Two measures that must have equal totals do not."""
    pass


class ShellUnresolvableError(FactorLabError):
    """No grid vector lies in the requested shell."""
    pass


# symmetry / factor-pp

class HasInvariantDirectionError(FactorLabError):
    """The measure has an invariant direction, so no nonempty factor point process exists."""
    pass


class EpsilonNotFoundError(FactorLabError):
    """The shell distance is too small for every admissible epsilon = 1/M."""
    pass


class NoCandidateError(FactorLabError):
    """No translate passes the A_epsilon test."""
    pass


class EmptyOccupancyError(FactorLabError):
    """The occupancy set came out empty."""
    pass


class KeyPropertyViolationError(FactorLabError):
    """Two occupancy vectors lie at a distance inside the forbidden annulus."""

    def __init__(self, message: str, pair=None, distance: float = None):
        super().__init__(message)
        self.pair = pair
        self.distance = distance


# allocation

class EmptyPatternError(FactorLabError):
    """An allocation needs at least one point."""
    pass


class MassMismatchError(FactorLabError):
    """Source and target masses of a local match differ."""
    pass


class NotDiffuseError(FactorLabError):
    """The source measure has atoms."""
    pass


class DegenerateBasisError(FactorLabError):
    """The invariant basis is not linearly independent."""
    pass


class ChartMismatchError(FactorLabError):
    """A chart-level allocation does not fit the chart or the full grid."""
    pass


class FiberAtomError(FactorLabError):
    """The projected source measure concentrates on a single fiber."""
    pass


class NotUniformError(FactorLabError):
    """Full invariance was detected but the measures are not uniform."""
    pass


# genlab

class BadLatticeError(FactorLabError):
    """Lattice generators are not compatible with the grid."""
    pass

