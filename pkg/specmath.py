"""
Dense symmetric linear algebra for the Eigen-Value method.

Covariance construction, an exact cyclic Jacobi eigensolver (the in-repo
oracle), a fast power-iteration path for the two extreme eigenpairs, and the
Rayleigh quotient.

Jacobi sweeps use the round-robin (tournament) ordering: every round rotates
d/2 disjoint (p, q) pairs at once, so one sweep is d-1 vectorized rounds
instead of d(d-1)/2 scalar rotations.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import numpy as np

from ev_base import DimensionMismatch, NoConvergence, NonFinite, NotCentered, ZeroVector


SYMMETRY_TOL = 1e-12
CENTERING_TOL = 1e-8
JACOBI_TOL = 1e-12  # off-diagonal target, relative to ||m||_F
RESIDUAL_FLOOR = 1e-9  # ||Mv - lambda v|| <= RESIDUAL_FLOOR * max(1, |lambda|)


@dataclass
class SymMatrix:
    """Real symmetric d x d matrix (read-only copy of the entries)."""
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFinite("matrix has non-finite entries")
        gap = np.abs(a - a.T)
        if np.any(gap > SYMMETRY_TOL * np.maximum(1.0, np.abs(a))):
            raise ValueError(f"matrix is not symmetric (max asymmetry {gap.max():.3e})")
        a.setflags(write=False)
        self.entries = a

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.entries))

    def trace(self) -> float:
        return float(np.trace(self.entries))


MatrixLike = Union[SymMatrix, np.ndarray]


def as_sym(m: MatrixLike) -> SymMatrix:
    return m if isinstance(m, SymMatrix) else SymMatrix(m)


@dataclass
class SpectralSummary:
    """Extreme eigenpairs of one covariance matrix."""
    dim: int
    lambda_max: float
    lambda_min: float
    u_max: np.ndarray
    u_min: np.ndarray
    discrepancy: Optional[float] = None  # f(Sigma), filled in by evcore
    degenerate: bool = False  # lambda_max - lambda_min <= tol
    iterations: int = 0
    ridge: float = 0.0
    trace: Optional[float] = None  # of the matrix that was solved

    def with_discrepancy(self, value: float) -> "SpectralSummary":
        return replace(self, discrepancy=value)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip v so its largest-magnitude entry is non-negative."""
    j = int(np.argmax(np.abs(v)))
    return -v if v[j] < 0 else v


# ============================================================================
# Covariance
# ============================================================================

def covariance(rows: np.ndarray) -> SymMatrix:
    """(1/n) rows^T rows for column-centered rows."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"rows must be an n x d matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 rows, got {n}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("rows contain non-finite entries")
    means = x.mean(axis=0)
    worst = float(np.max(np.abs(means)))
    if worst > CENTERING_TOL:
        raise NotCentered(f"column means must be zero (max |mean| = {worst:.3e}); center the rows first")
    c = (x.T @ x) / n
    return SymMatrix((c + c.T) / 2.0)


# ============================================================================
# Exact path: cyclic Jacobi
# ============================================================================

@lru_cache(maxsize=64)
def _round_robin(d: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: d-1 rounds (d rounds if d is odd) of disjoint pairs."""
    m = d if d % 2 == 0 else d + 1
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(p, q) for p, q in pairs if p < d and q < d]
        if pairs:
            p = np.array([a for a, _ in pairs], dtype=np.intp)
            q = np.array([b for _, b in pairs], dtype=np.intp)
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _max_off_diagonal(a: np.ndarray) -> float:
    off = np.abs(a - np.diag(np.diag(a)))
    return float(off.max()) if off.size else 0.0


def jacobi_eigh(m: MatrixLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigen-decomposition by cyclic Jacobi rotations.

    Returns (values, vectors) with values descending and vectors as
    sign-canonicalized columns.
    """
    a = np.array(as_sym(m).entries, dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    fro = float(np.linalg.norm(a))
    if d == 1 or fro == 0.0:
        return np.diag(a).copy(), v

    threshold = JACOBI_TOL * fro
    rounds = _round_robin(d)
    max_sweeps = 100 * d * d

    for sweep in range(max_sweeps + 1):
        if _max_off_diagonal(a) <= threshold:
            break
        if sweep == max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (d={d})")
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                sign = np.where(theta >= 0.0, 1.0, -1.0)
                t = sign / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active & np.isfinite(t), t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    v = v[:, order]
    for k in range(d):
        v[:, k] = canonical_sign(v[:, k])
    return values, v


def eig_full(m: MatrixLike) -> List[Tuple[float, np.ndarray]]:
    """All eigenpairs, descending by eigenvalue."""
    values, vectors = jacobi_eigh(m)
    return [(float(values[k]), vectors[:, k].copy()) for k in range(values.shape[0])]


# ============================================================================
# Fast path: power iteration with spectral shift
# ============================================================================

def _power_iteration(a: np.ndarray, tol: float, max_iter: int,
                     rng: np.random.Generator) -> Tuple[float, np.ndarray, int]:
    """Dominant (largest |lambda|) eigenpair of a symmetric matrix."""
    d = a.shape[0]
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    if not np.any(a):
        return 0.0, x, 0

    y = a @ x
    previous = None
    for it in range(max_iter):
        lam = float(x @ y)
        residual = float(np.linalg.norm(y - lam * x))
        if previous is not None and abs(lam - previous) <= tol \
                and residual <= RESIDUAL_FLOOR * max(1.0, abs(lam)):
            return lam, x, it
        previous = lam
        norm_y = float(np.linalg.norm(y))
        if norm_y == 0.0:
            # landed in the null space; restart
            x = rng.standard_normal(d)
            x /= np.linalg.norm(x)
            previous = None
        else:
            x = y / norm_y
        y = a @ x
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations (d={d})")


def eig_extreme(m: MatrixLike, tol: float = 1e-12, max_iter: int = 100_000,
                seed: int = 0) -> SpectralSummary:
    """
    lambda_max by power iteration, lambda_min by power iteration on
    (lambda_max*I - m). The discrepancy field is left unset.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = as_sym(m).entries
    d = a.shape[0]
    rng = np.random.default_rng(seed)

    mu, x, it1 = _power_iteration(a, tol, max_iter, rng)
    if mu < 0:
        # most negative eigenvalue dominated; shift it to zero and go again
        top, x, extra = _power_iteration(a - mu * np.eye(d), tol, max_iter, rng)
        mu = mu + top
        it1 += extra
    lambda_max = mu

    shifted = lambda_max * np.eye(d) - a
    spread, y, it2 = _power_iteration(shifted, tol, max_iter, rng)
    lambda_min = lambda_max - spread

    return SpectralSummary(
        dim=d,
        lambda_max=float(lambda_max),
        lambda_min=float(min(lambda_min, lambda_max)),
        u_max=canonical_sign(x),
        u_min=canonical_sign(y),
        degenerate=bool(lambda_max - lambda_min <= tol),
        iterations=it1 + it2,
        trace=float(np.trace(a)),
    )


# ============================================================================
# Spectral identities
# ============================================================================

def rayleigh(m: MatrixLike, v: np.ndarray) -> float:
    """v^T M v / v^T v."""
    a = as_sym(m).entries
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"vector length {v.shape[0]} != matrix dim {a.shape[0]}")
    vv = float(v @ v)
    if vv == 0.0:
        raise ZeroVector("Rayleigh quotient of the zero vector")
    return float(v @ a @ v) / vv


def spectral_rank(values: np.ndarray, rel: float = 1e-10) -> int:
    """Eigenvalues above rel * lambda_max."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max())
    if top <= 0:
        return 0
    return int(np.sum(values > rel * top))


def residual(m: MatrixLike, value: float, vector: np.ndarray) -> float:
    a = as_sym(m).entries
    return float(np.linalg.norm(a @ vector - value * vector))
