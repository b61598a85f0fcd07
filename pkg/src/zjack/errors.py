"""Exception types raised across the toolkit."""

from __future__ import annotations


class ZJackError(Exception):
    """Base class for all toolkit errors."""


class NumericDomainError(ZJackError, ValueError):
    """A moment, Jacobian or probe evaluated to a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class RecordValidationError(ZJackError, ValueError):
    """A record does not fit the layout its model expects."""


class SolverError(ZJackError, RuntimeError):
    """The Newton system stayed singular after ridge escalation."""

    def __init__(self, message: str, condition_number: float = float("nan"),
                 index: int | None = None):
        super().__init__(message)
        self.condition_number = condition_number
        self.index = index


class RankDeficiencyError(ZJackError, ValueError):
    """A Gram or Jacobian matrix needed for a closed form is singular."""

    def __init__(self, message: str, condition_number: float = float("nan")):
        super().__init__(message)
        self.condition_number = condition_number


class OverlapError(ZJackError, ValueError):
    """A fitted propensity is exactly 0 or 1 at a record that needs its inverse."""


class JackknifeUndefinedError(ZJackError, RuntimeError):
    """Some leave-one-out solves failed, so the jackknife is undefined."""

    def __init__(self, failed: list[int]):
        shown = failed[:10]
        more = "" if len(failed) <= 10 else f" (+{len(failed) - 10} more)"
        super().__init__(f"leave-one-out solves failed at indices {shown}{more}")
        self.failed = list(failed)


class DegenerateLeverageError(ZJackError, ValueError):
    """A first-stage leverage equals one, so the JIVE1 rescaling is undefined."""


class UnreliableVarianceError(ZJackError, RuntimeError):
    """Too many bootstrap replicates failed for the variance to be trusted."""

    def __init__(self, message: str, failures: int, replicates: int):
        super().__init__(message)
        self.failures = failures
        self.replicates = replicates


class ConfigError(ZJackError, ValueError):
    """An experiment configuration is inconsistent."""
