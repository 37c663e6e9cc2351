"""
Exception hierarchy for the platoon control services.

Errors are grouped by the CLI exit code they map to: design/factorization
failures (DesignError, exit 3) and simulation divergence (exit 4).
"""


class PlatoonError(Exception):
    """Base class for all platoon control errors."""
    pass


# --- rational algebra -------------------------------------------------------

class TransferFunctionError(PlatoonError):
    """Rational function / matrix algebra errors."""
    pass


class DivisionByZeroFn(TransferFunctionError):
    """Division by the identically zero rational function."""
    pass


class ImproperSystem(TransferFunctionError):
    """Relative degree below zero where a proper system is required."""
    pass


class UnstableSystem(TransferFunctionError):
    """A norm was requested for a system with poles outside the open LHP."""
    pass


class NotStrictlyProper(TransferFunctionError):
    """Strict properness required (H2 norm, plant G_wp)."""
    pass


class NegativeDelay(TransferFunctionError):
    """Negative delay passed to the Padé approximation."""
    pass


class DegreeOverflow(TransferFunctionError):
    """Polynomial degree grew beyond the configured cap."""
    pass


class StructureViolation(TransferFunctionError):
    """A structure tag does not match the matrix entries."""
    pass


class SingularFactor(TransferFunctionError):
    """A rational matrix could not be inverted."""
    pass


# --- design -------------------------------------------------------------------

class DesignError(PlatoonError):
    """Failures of factorization, parameterization or model matching."""
    pass


class InvalidVehicle(DesignError):
    """Vehicle parameters do not yield a unimodular weighting."""
    pass


class RequiresPositiveHeadway(DesignError):
    """Operation is only defined for h > 0."""
    pass


class DegenerateCancellation(DesignError):
    """Plant numerator and denominator share (near) common roots."""
    pass


class BezoutViolation(DesignError):
    """Bézout identity residual exceeds tolerance."""
    pass


class UnstableParameter(DesignError):
    """Youla parameter with unstable entries."""
    pass


class SingularYFactor(DesignError):
    """Y_wp − Q·H·Ñ_wp is identically zero."""
    pass


class BasisTooSmall(DesignError):
    """Optimizer saturated the coefficient box of the Q basis."""
    pass


class RequiresHomogeneous(DesignError):
    """Operation requires Φ_k = 1 for every vehicle."""
    pass


class RequiresZeroHeadway(DesignError):
    """Operation requires constant spacing (h = 0)."""
    pass


class InfiniteCost(DesignError):
    """H2 cost is infinite for the requested problem."""
    pass


class DesignFailure(DesignError):
    """The numerical optimizer did not reach a solution."""
    pass


class MismatchedPlantDelay(DesignError):
    """The design plant does not absorb the delay being compensated."""
    pass


# --- simulation ---------------------------------------------------------------

class SimulationError(PlatoonError):
    """Time-domain simulation errors."""
    pass


class NonIntegerDelay(SimulationError):
    """Delay is not an integer number of samples."""
    pass


class Divergence(SimulationError):
    """A simulated signal left the finite range."""
    pass
