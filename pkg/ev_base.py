"""
Shared framework for the Eigen-Value data-valuation toolkit.

Holds what every module needs: the error hierarchy, the run configuration,
the ValueVector result type and the abstract Valuer that baseline methods
implement so that EV can plug into any of them.
"""

import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np


# ============================================================================
# Errors
# ============================================================================

class EVError(Exception):
    """Base class for every toolkit error."""


class NotCentered(EVError, ValueError):
    pass


class NonFinite(EVError, ValueError):
    pass


class NoConvergence(EVError, RuntimeError):
    pass


class ZeroVector(EVError, ValueError):
    pass


class DimensionMismatch(EVError, ValueError):
    pass


class SingularCovariance(EVError, ValueError):
    """Covariance too close to singular for the discrepancy bound."""

    def __init__(self, lambda_min: float, suggested_ridge: float, index: Optional[int] = None):
        self.lambda_min = lambda_min
        self.suggested_ridge = suggested_ridge
        self.index = index
        where = f" (leave-one-out index {index})" if index is not None else ""
        super().__init__(
            f"singular covariance{where}: lambda_min={lambda_min:.3e}; "
            f"retry with ridge eps={suggested_ridge:.3e}"
        )


class DegenerateBase(EVError, ValueError):
    pass


class EmptyValidation(EVError, ValueError):
    pass


class TooLarge(EVError, ValueError):
    pass


class ZeroRow(EVError, ValueError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"row {index} has zero L2 norm")


class BadMagic(EVError, ValueError):
    pass


class TruncatedFile(EVError, ValueError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated file: expected {expected} bytes, found {actual}")


class LabelOutOfRange(EVError, ValueError):
    pass


class RaggedRows(EVError, ValueError):
    pass


class InfeasibleShift(EVError, ValueError):
    pass


class StepExceedsPool(EVError, ValueError):
    pass


class InsufficientSource(EVError, ValueError):
    pass


class TrainerFailure(EVError, RuntimeError):
    def __init__(self, model_index: int, cause: Exception):
        self.model_index = model_index
        self.cause = cause
        super().__init__(f"bootstrap model {model_index} failed: {cause}")


# ============================================================================
# Configuration
# ============================================================================

THREADS_ENV = "EV_THREADS"


def resolve_workers(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, then EV_THREADS, then 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return 1


@dataclass
class RunConfig:
    """Knobs shared by the numerical modules."""
    threads: Optional[int] = None  # None -> EV_THREADS -> 1
    verbose: bool = False
    ridge: bool = False  # add eps*I when the covariance is singular
    eig_tol: float = 1e-12
    eig_max_iter: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.eig_tol <= 0:
            raise ValueError("eig_tol must be positive")
        if self.eig_max_iter < 1:
            raise ValueError("eig_max_iter must be at least 1")

    @property
    def workers(self) -> int:
        return resolve_workers(self.threads)


def say(verbose: bool, message: str) -> None:
    """Plain per-stage progress line."""
    if verbose:
        print(message, flush=True)


# ============================================================================
# Results
# ============================================================================

@dataclass
class ValueVector:
    """Per-point scores from one valuation method."""
    method: str
    scores: np.ndarray
    weight_w: float = 0.0  # 0 when no combination applied
    seed: Optional[int] = None
    ridge: float = 0.0
    notes: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            bad = int(np.flatnonzero(~np.isfinite(self.scores))[0])
            raise NonFinite(f"{self.method}: score {bad} is not finite")
        if not 0.0 <= self.weight_w <= 1.0:
            raise ValueError(f"weight_w must lie in [0, 1], got {self.weight_w}")

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def ranking(self) -> np.ndarray:
        """Point ids ordered by descending score, ties by ascending id."""
        idx = np.arange(len(self))
        return np.lexsort((idx, -self.scores))


# ============================================================================
# Valuer base
# ============================================================================

class Valuer(ABC):
    """
    Abstract base for valuation methods EV can be combined with.

    Implement `value` to make a method usable by every protocol.
    """

    name: str = "valuer"
    needs_validation: bool = False

    @abstractmethod
    def value(self, train: Any, val: Optional[Any] = None, seed: int = 0) -> ValueVector:
        """Score every point of `train`."""
        pass

    def describe(self) -> Dict[str, Any]:
        """Parameters echoed into reports."""
        return {"name": self.name}
