"""
Measure Validator - precondition checks for the metric and allocation modules.

Checks return (is_valid, error_message) pairs; validate_and_raise turns the
first failing check into the matching factorlab error.
"""

import math
from typing import Optional, Tuple, Type

from config import settings
from errors import (
    FactorLabError,
    GeometryMismatchError,
    NotDiffuseError,
    TotalMassMismatchError,
)
from models import Measure


class MeasureValidator:
    """
    Validates pairs of measures before they are compared or balanced.
    """

    @classmethod
    def check_same_geometry(cls, a: Measure, b: Measure) -> Tuple[bool, str]:
        if a.geometry != b.geometry:
            return False, f"measures live on different tori: {a.geometry} vs {b.geometry}"
        return True, ""

    @classmethod
    def check_equal_totals(cls, a: Measure, b: Measure, rel_tol: float) -> Tuple[bool, str]:
        ta = math.fsum(list(a.cell_mass) + [x.mass for x in a.atoms])
        tb = math.fsum(list(b.cell_mass) + [x.mass for x in b.atoms])
        if not math.isclose(ta, tb, rel_tol=rel_tol, abs_tol=0.0) and not (ta == 0.0 and tb == 0.0):
            return False, f"total masses differ: {ta!r} vs {tb!r} (rel_tol={rel_tol})"
        return True, ""

    @classmethod
    def check_diffuse(cls, mu: Measure) -> Tuple[bool, str]:
        if mu.atoms:
            return False, f"source measure has {len(mu.atoms)} atoms; it must be diffuse"
        return True, ""

    @classmethod
    def validate(
        cls,
        phi: Measure,
        psi: Measure,
        rel_tol: Optional[float] = None,
        require_diffuse: bool = False,
    ) -> Tuple[bool, str, Optional[Type[FactorLabError]]]:
        """
        Validate a (source, target) pair.

        Args:
            phi: Source measure
            psi: Target measure
            rel_tol: Relative tolerance on equal totals; None skips the check
            require_diffuse: Whether phi must have no atoms

        Returns:
            Tuple of (is_valid, error_message, error_class)
        """
        ok, message = cls.check_same_geometry(phi, psi)
        if not ok:
            return False, message, GeometryMismatchError

        if require_diffuse:
            ok, message = cls.check_diffuse(phi)
            if not ok:
                return False, message, NotDiffuseError

        if rel_tol is not None:
            ok, message = cls.check_equal_totals(phi, psi, rel_tol)
            if not ok:
                return False, message, TotalMassMismatchError

        return True, "", None

    @classmethod
    def validate_and_raise(
        cls,
        phi: Measure,
        psi: Measure,
        rel_tol: Optional[float] = None,
        require_diffuse: bool = False,
    ) -> None:
        """
        Validate a pair and raise the matching error if invalid.

        Raises:
            GeometryMismatchError, NotDiffuseError or TotalMassMismatchError
        """
        is_valid, error_message, error_class = cls.validate(phi, psi, rel_tol, require_diffuse)
        if not is_valid:
            raise error_class(error_message)


def validate_balance_inputs(phi: Measure, psi: Measure) -> None:
    """Preconditions shared by every balancing entry point."""
    MeasureValidator.validate_and_raise(phi, psi, rel_tol=settings.total_rel_tol, require_diffuse=True)
