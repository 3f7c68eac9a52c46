"""
Eigen-Value (EV): per-point marginal contribution to a spectral bound on
out-of-distribution loss.

The bound is f(S) = (lambda_max*sqrt(d) + sqrt(d^2 - d)) / lambda_min for the
covariance S of the centered ID embeddings. Removing point k perturbs S by
Delta_k = -(1/n) x_k x_k^T; first-order perturbation gives the eigenvalue
shifts delta = u^T Delta_k u without a new eigendecomposition, and a
first-order expansion of f turns them into the marginal value.

Score convention: higher = removing the point raises the bound more.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from ev_base import DegenerateBase, DimensionMismatch, SingularCovariance, ValueVector, resolve_workers
from specmath import SpectralSummary, SymMatrix, covariance, eig_extreme, jacobi_eigh


SINGULAR_TOL = 1e-12
RIDGE_SCALE = 1e-8
BASE_STD_TOL = 1e-12


@dataclass(frozen=True)
class PerturbationDelta:
    """First-order eigenvalue shifts from removing point `index`."""
    index: int
    delta_max: float
    delta_min: float


# ============================================================================
# Bound and its first-order marginal
# ============================================================================

def _suggested_ridge(s: SpectralSummary) -> float:
    """The eps = RIDGE_SCALE * trace / d that ridge=True would add."""
    if s.ridge:
        return s.ridge
    # hand-built summaries may lack the trace; lambda_max is its lower bound
    trace = s.trace if s.trace is not None else s.lambda_max
    if trace > 0:
        return RIDGE_SCALE * trace / s.dim
    return RIDGE_SCALE


def _check_nonsingular(s: SpectralSummary, index: Optional[int] = None) -> None:
    if not s.lambda_min > SINGULAR_TOL * max(1.0, s.lambda_max):
        raise SingularCovariance(s.lambda_min, _suggested_ridge(s), index)


def _numerator(lambda_max: float, d: int) -> float:
    return lambda_max * math.sqrt(d) + math.sqrt(d * d - d)


def discrepancy_bound(s: SpectralSummary) -> float:
    """f(S) = (lambda_max*sqrt(d) + sqrt(d^2-d)) / lambda_min."""
    _check_nonsingular(s)
    return _numerator(s.lambda_max, s.dim) / s.lambda_min


def perturbation_arrays(rows: np.ndarray, s: SpectralSummary) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized (delta_max, delta_min) for every row; O(n*d)."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != s.dim:
        raise DimensionMismatch(f"rows have width {x.shape[-1]}, spectrum has dim {s.dim}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    delta_max = -np.square(x @ s.u_max) / n
    delta_min = -np.square(x @ s.u_min) / n
    return delta_max, delta_min


def perturbation_deltas(rows: np.ndarray, s: SpectralSummary) -> List[PerturbationDelta]:
    delta_max, delta_min = perturbation_arrays(rows, s)
    return [
        PerturbationDelta(index=k, delta_max=float(delta_max[k]), delta_min=float(delta_min[k]))
        for k in range(delta_max.shape[0])
    ]


def _marginal(s: SpectralSummary, delta_max, delta_min):
    # f(S_-k) - f(S) ~ sqrt(d)*dmax/B - A*dmin/B^2 with A the numerator, B = lambda_min
    a = _numerator(s.lambda_max, s.dim)
    b = s.lambda_min
    return math.sqrt(s.dim) * delta_max / b - a * delta_min / (b * b)


def ev_marginal(s: SpectralSummary, delta: PerturbationDelta) -> float:
    """First-order estimate of f(S_-k) - f(S)."""
    _check_nonsingular(s)
    return float(_marginal(s, delta.delta_max, delta.delta_min))


# ============================================================================
# Scores
# ============================================================================

def prepare_covariance(rows: np.ndarray, ridge: bool = False) -> Tuple[SymMatrix, float]:
    """Covariance of centered rows, plus eps*I with eps = 1e-8*trace/d when ridge is on."""
    cov = covariance(rows)
    if not ridge:
        return cov, 0.0
    eps = RIDGE_SCALE * cov.trace() / cov.dim
    return SymMatrix(cov.entries + eps * np.eye(cov.dim)), eps


def spectral_summary(rows: np.ndarray, ridge: bool = False, tol: float = 1e-12,
                     max_iter: int = 100_000, seed: int = 0) -> SpectralSummary:
    """Covariance, extreme eigenpairs and f(S) in one call."""
    cov, eps = prepare_covariance(rows, ridge)
    s = eig_extreme(cov, tol=tol, max_iter=max_iter, seed=seed)
    s.ridge = eps
    return s.with_discrepancy(discrepancy_bound(s))


def ev_scores(rows: np.ndarray, ridge: bool = False, tol: float = 1e-12,
              max_iter: int = 100_000, seed: int = 0) -> ValueVector:
    """Approximate EV for every point: one covariance, one extreme eigensolve."""
    s = spectral_summary(rows, ridge=ridge, tol=tol, max_iter=max_iter, seed=seed)
    delta_max, delta_min = perturbation_arrays(rows, s)
    scores = _marginal(s, delta_max, delta_min)
    return ValueVector(
        method="ev-approx",
        scores=scores,
        ridge=s.ridge,
        notes={
            "lambda_max": s.lambda_max,
            "lambda_min": s.lambda_min,
            "discrepancy": s.discrepancy,
            "degenerate_spectrum": s.degenerate,
        },
    )


def _extremes(matrix: np.ndarray) -> Tuple[float, float]:
    values, _ = jacobi_eigh(matrix)
    return float(values[0]), float(values[-1])


def _leave_one_out_chunk(gram: np.ndarray, x: np.ndarray, eps: float,
                         indices: np.ndarray) -> List[Tuple[float, float]]:
    # gram and x are in the eigenbasis of the full covariance, where S_-k is near-diagonal
    n, d = x.shape
    out = []
    for k in indices:
        s_k = (gram - np.outer(x[k], x[k])) / (n - 1)
        s_k = (s_k + s_k.T) / 2.0
        if eps:
            s_k = s_k + eps * np.eye(d)
        out.append(_extremes(s_k))
    return out


def leave_one_out_extremes(rows: np.ndarray, ridge: bool = False,
                           workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float, float, float]:
    """
    Exact (lambda_max, lambda_min) of every S_-k = (1/(n-1)) sum_{i!=k} x_i x_i^T.

    Returns (lmax_k, lmin_k, lambda_max, lambda_min, eps) where the last
    three describe the full covariance.
    """
    x = np.asarray(rows, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"leave-one-out needs at least 3 rows, got {n}")
    cov, eps = prepare_covariance(x, ridge)
    values, basis = jacobi_eigh(cov)
    lam_max, lam_min = float(values[0]), float(values[-1])
    x = x @ basis
    gram = x.T @ x

    workers = resolve_workers(workers)
    chunks = [c for c in np.array_split(np.arange(n), max(1, workers * 4)) if c.size]
    with Parallel(n_jobs=workers, prefer="threads") as parallel:
        parts = parallel(delayed(_leave_one_out_chunk)(gram, x, eps, c) for c in chunks)
    pairs = [pair for part in parts for pair in part]
    lmax_k = np.array([p[0] for p in pairs])
    lmin_k = np.array([p[1] for p in pairs])
    return lmax_k, lmin_k, lam_max, lam_min, eps


def _trace(rows: np.ndarray) -> float:
    """trace of (1/n) rows^T rows without forming the matrix."""
    return float(np.einsum("ij,ij->", rows, rows)) / rows.shape[0]


def _bound(lambda_max: float, lambda_min: float, d: int, eps: float, index: Optional[int] = None,
           trace: float = 0.0) -> float:
    if not lambda_min > SINGULAR_TOL * max(1.0, lambda_max):
        raise SingularCovariance(lambda_min, eps or RIDGE_SCALE * (trace if trace > 0 else 1.0) / d, index)
    return _numerator(lambda_max, d) / lambda_min


def ev_scores_exact(rows: np.ndarray, ridge: bool = False, workers: Optional[int] = None) -> ValueVector:
    """Brute-force EV: exact f(S_-k) - f(S) with a full eigensolve per point."""
    x = np.asarray(rows, dtype=np.float64)
    d = x.shape[1]
    lmax_k, lmin_k, lam_max, lam_min, eps = leave_one_out_extremes(x, ridge, workers)
    trace = _trace(x)
    base = _bound(lam_max, lam_min, d, eps, trace=trace)
    scores = np.array([
        _bound(lmax_k[k], lmin_k[k], d, eps, index=k, trace=trace) - base for k in range(x.shape[0])
    ])
    return ValueVector(
        method="ev-exact",
        scores=scores,
        ridge=eps,
        notes={"lambda_max": lam_max, "lambda_min": lam_min, "discrepancy": base},
    )


# ============================================================================
# Plug-and-play combination
# ============================================================================

def combine(base: ValueVector, ev: ValueVector, w: float) -> ValueVector:
    """V_base + w * (V_ev - mean(V_base)) / std(V_base), population std."""
    if len(base) != len(ev):
        raise DimensionMismatch(f"base has {len(base)} scores, ev has {len(ev)}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    mu = float(np.mean(base.scores))
    sigma = float(np.std(base.scores))
    if sigma <= BASE_STD_TOL:
        raise DegenerateBase(f"{base.method} scores are constant (std {sigma:.3e}); cannot standardize EV")
    if w == 0.0:
        scores = base.scores.copy()
    else:
        scores = base.scores + w * (ev.scores - mu) / sigma
    return ValueVector(
        method=base.method + "+ev",
        scores=scores,
        weight_w=w,
        seed=base.seed,
        ridge=ev.ridge,
        notes={"mu_base": mu, "sigma_base": sigma, "std_divisor": "n"},
    )


# ============================================================================
# Approximation fidelity
# ============================================================================

@dataclass
class FidelityReport:
    """Predicted vs exact leave-one-out eigenvalue shifts."""
    predicted_max: np.ndarray
    predicted_min: np.ndarray
    exact_max: np.ndarray
    exact_min: np.ndarray
    approx_scores: np.ndarray
    exact_scores: np.ndarray
    pearson_max: float
    pearson_min: float
    spearman_scores: float

    def summary(self) -> dict:
        return {
            "pearson_delta_max": self.pearson_max,
            "pearson_delta_min": self.pearson_min,
            "spearman_scores": self.spearman_scores,
            "mean_abs_score_error": float(np.mean(np.abs(self.approx_scores - self.exact_scores))),
        }


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(stats.pearsonr(a, b)[0])


def eigen_shift_fidelity(rows: np.ndarray, ridge: bool = False, workers: Optional[int] = None,
                         seed: int = 0) -> FidelityReport:
    x = np.asarray(rows, dtype=np.float64)
    d = x.shape[1]
    cov, eps = prepare_covariance(x, ridge)
    values, vectors = jacobi_eigh(cov)
    s = SpectralSummary(dim=d, lambda_max=float(values[0]), lambda_min=float(values[-1]),
                        u_max=vectors[:, 0], u_min=vectors[:, -1], ridge=eps, trace=cov.trace())
    pred_max, pred_min = perturbation_arrays(x, s)
    lmax_k, lmin_k, lam_max, lam_min, _ = leave_one_out_extremes(x, ridge, workers)
    approx = ev_scores(x, ridge=ridge, seed=seed).scores
    trace = cov.trace()
    base = _bound(lam_max, lam_min, d, eps, trace=trace)
    exact = np.array([_bound(lmax_k[k], lmin_k[k], d, eps, k, trace) - base for k in range(x.shape[0])])
    return FidelityReport(
        predicted_max=pred_max,
        predicted_min=pred_min,
        exact_max=lmax_k - lam_max,
        exact_min=lmin_k - lam_min,
        approx_scores=approx,
        exact_scores=exact,
        pearson_max=_pearson(pred_max, lmax_k - lam_max),
        pearson_min=_pearson(pred_min, lmin_k - lam_min),
        spearman_scores=float(stats.spearmanr(approx, exact)[0]),
    )
