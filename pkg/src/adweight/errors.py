"""Exception hierarchy.

Every error carries a ``category`` and an ``exit_code`` so the command-line
front-end can map failures to distinct process exit statuses.
"""

from __future__ import annotations


class AdweightError(Exception):
    """Base class for all estimation errors."""

    category = "error"
    exit_code = 1

    def __init__(self, message: str, *, module: str | None = None):
        super().__init__(message)
        self.module = module

    def to_dict(self) -> dict:
        return {"category": self.category, "module": self.module, "message": str(self)}


class SchemaError(AdweightError, ValueError):
    category = "schema"
    exit_code = 2


class DimensionError(AdweightError, ValueError):
    category = "schema"
    exit_code = 2


class DomainError(AdweightError, ValueError):
    category = "domain"
    exit_code = 2


class UnknownStudyError(AdweightError, KeyError):
    category = "schema"
    exit_code = 2

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return self.args[0] if self.args else ""


class ConvergenceError(AdweightError, RuntimeError):
    category = "convergence"
    exit_code = 3


class SeparationError(ConvergenceError):
    category = "separation"


class SingularDesignError(ConvergenceError):
    category = "singular"


class OverlapError(AdweightError, RuntimeError):
    category = "overlap"
    exit_code = 4


class BoundaryError(AdweightError, ValueError):
    """An aggregate outcome mean of exactly 0 or 1 (logit undefined)."""

    category = "boundary"
    exit_code = 5


class MomentError(AdweightError, ValueError):
    """Requested moment missing, or recovered moments incompatible."""

    category = "moment"
    exit_code = 5


class PseudoDataSizeError(MomentError):
    category = "pseudo_size"


class OverlapWarning(UserWarning):
    """Over-identified weight model fits poorly; case-mix may not overlap."""


class MomentWarning(UserWarning):
    """Recovered second moments look inconsistent with the aggregate means."""
