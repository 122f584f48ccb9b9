from __future__ import annotations

from typing import Any, Optional


class FermiError(Exception):
    """Base for every error raised while computing Fermi curves."""


# ----------------------------
# Input and region problems
# ----------------------------
class DegenerateLattice(FermiError, ValueError):
    pass


class InvalidParameters(FermiError, ValueError):
    pass


class SmallnessViolated(FermiError, ValueError):
    """The magnetic potential is too large for the certified estimates."""


class TripleTube(FermiError, ValueError):
    pass


class MultipleExceptional(FermiError, ValueError):
    pass


class RelationViolated(FermiError, ValueError):
    pass


class SingularDenominator(FermiError, ValueError):
    pass


class RegionViolation(FermiError, ValueError):
    """The momentum does not lie in the region an equation is valid on."""


# ----------------------------
# Numerical failures
# ----------------------------
class CertificateFail(FermiError, RuntimeError):
    """The contraction bound for R_{G'G'} is not below 17/18."""


class NumericallySingular(FermiError, RuntimeError):
    pass


class NotContracting(FermiError, RuntimeError):
    pass


class StepTooLarge(FermiError, RuntimeError):
    pass


class HypothesisFail(FermiError, RuntimeError):
    pass


class NormalFormStall(FermiError, RuntimeError):
    pass


class OracleMismatch(FermiError, RuntimeError):
    pass


class NoConvergence(FermiError, RuntimeError):
    """Base for iterations that stopped without meeting their tolerance.

    The last iterate and its residual are kept so callers can report them.
    """

    def __init__(self, message: str, last_iterate: Any = None, residual: Optional[float] = None) -> None:
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class NewtonDiverged(NoConvergence):
    pass


class RegionExit(NoConvergence):
    pass


__all__ = [
    "FermiError",
    "DegenerateLattice",
    "InvalidParameters",
    "SmallnessViolated",
    "TripleTube",
    "MultipleExceptional",
    "RelationViolated",
    "SingularDenominator",
    "RegionViolation",
    "CertificateFail",
    "NumericallySingular",
    "NotContracting",
    "StepTooLarge",
    "HypothesisFail",
    "NormalFormStall",
    "OracleMismatch",
    "NoConvergence",
    "NewtonDiverged",
    "RegionExit",
]
