"""
Baseline in-distribution valuers that EV plugs into, the brute-force Shapley
oracle, and the softmax-regression trainer shared by every protocol.

Every valuer implements ev_base.Valuer so protocols can take any of them by
name (see make_valuer).
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.special import comb, log_softmax, softmax

from datahub import EmbeddingDataset, center_rows, check_compatible
from ev_base import (
    DimensionMismatch,
    EmptyValidation,
    NonFinite,
    RunConfig,
    TooLarge,
    TrainerFailure,
    Valuer,
    ValueVector,
    resolve_workers,
)
from evcore import combine, ev_scores


ORACLE_MAX_N = 12
KNN_CHUNK = 64  # validation points per distance block


# ============================================================================
# Softmax regression
# ============================================================================

@dataclass
class SoftmaxModel:
    """Multinomial logistic regression: p(y|x) = softmax(W x + b)."""
    weights: np.ndarray  # C x d
    bias: np.ndarray  # C
    losses: List[float] = field(default_factory=list)

    @property
    def classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"model expects d={self.dim}, got {x.shape[1]}")
        return x @ self.weights.T + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest class index
        return np.argmax(self.logits(x), axis=1).astype(np.int64)


def softmax_loss_and_grad(weights: np.ndarray, bias: np.ndarray, x: np.ndarray,
                          y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to (weights, bias)."""
    n = x.shape[0]
    rows = np.arange(n)
    logp = log_softmax(x @ weights.T + bias, axis=1)
    loss = -float(np.mean(logp[rows, y]))
    residual = np.exp(logp)
    residual[rows, y] -= 1.0
    residual /= n
    return loss, residual.T @ x, residual.sum(axis=0)


def train_softmax(train: EmbeddingDataset, epochs: int = 30, lr: float = 0.01) -> SoftmaxModel:
    """Full-batch gradient descent from a zero initialization, exactly `epochs` steps."""
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if lr <= 0:
        raise ValueError("lr must be positive")
    x, y = train.features, train.labels
    weights = np.zeros((train.num_classes, train.d))
    bias = np.zeros(train.num_classes)
    losses = []
    for epoch in range(epochs):
        loss, grad_w, grad_b = softmax_loss_and_grad(weights, bias, x, y)
        if not np.isfinite(loss):
            raise NonFinite(f"training loss became non-finite at epoch {epoch}; lower the learning rate")
        losses.append(loss)
        weights -= lr * grad_w
        bias -= lr * grad_b
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
        raise NonFinite("trained parameters are not finite; lower the learning rate")
    return SoftmaxModel(weights=weights, bias=bias, losses=losses)


def evaluate(model: SoftmaxModel, test: EmbeddingDataset) -> float:
    """Fraction of argmax-correct predictions."""
    if test.d != model.dim:
        raise DimensionMismatch(f"model has d={model.dim}, test set has d={test.d}")
    return float(np.mean(model.predict(test.features) == test.labels))


# ============================================================================
# KNN-Shapley
# ============================================================================

@dataclass
class ShapleyConfig:
    k_neighbors: int = 100
    empty_set_utility: float = 0.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be a positive integer")
        if self.empty_set_utility != 0.0:
            raise ValueError("only U(empty set) = 0 is supported")

    def check(self, n: int) -> None:
        if self.k_neighbors > n:
            raise ValueError(f"k_neighbors={self.k_neighbors} exceeds the {n} training points")


def _check_pair(train: EmbeddingDataset, val: Optional[EmbeddingDataset]) -> None:
    if val is None or val.n == 0:
        raise EmptyValidation("a non-empty validation set is required")
    check_compatible(train, val)


def _neighbor_order(train: EmbeddingDataset, val_x: np.ndarray) -> np.ndarray:
    """Training ids sorted by distance to each validation row; ties by id."""
    diff = val_x[:, None, :] - train.features[None, :, :]
    dist = np.sqrt(np.einsum("vnd,vnd->vn", diff, diff))
    return np.argsort(dist, axis=1, kind="stable")


def _knn_shapley_chunk(train: EmbeddingDataset, val_x: np.ndarray, val_y: np.ndarray, k: int) -> np.ndarray:
    n = train.n
    order = _neighbor_order(train, val_x)
    match = (train.labels[order] == val_y[:, None]).astype(np.float64)

    i = np.arange(1, n + 1, dtype=np.float64)
    weight = np.minimum(k, i) / (k * i)

    s_sorted = np.empty_like(match)
    s_sorted[:, -1] = match[:, -1] * weight[-1]
    if n > 1:
        steps = (match[:, :-1] - match[:, 1:]) * weight[:-1]
        tail = np.cumsum(steps[:, ::-1], axis=1)[:, ::-1]
        s_sorted[:, :-1] = s_sorted[:, -1:] + tail

    per_val = np.empty_like(s_sorted)
    np.put_along_axis(per_val, order, s_sorted, axis=1)
    return per_val.sum(axis=0)


def knn_shapley(train: EmbeddingDataset, val: EmbeddingDataset, cfg: ShapleyConfig,
                workers: Optional[int] = None) -> ValueVector:
    """Exact KNN-Shapley by the sorted-neighbor recursion, averaged over validation points."""
    _check_pair(train, val)
    cfg.check(train.n)
    workers = resolve_workers(workers)
    bounds = list(range(0, val.n, KNN_CHUNK)) + [val.n]
    with Parallel(n_jobs=workers, prefer="threads") as parallel:
        parts = parallel(
            delayed(_knn_shapley_chunk)(train, val.features[a:b], val.labels[a:b], cfg.k_neighbors)
            for a, b in zip(bounds[:-1], bounds[1:])
        )
    total = np.sum(np.vstack(parts), axis=0)
    return ValueVector(
        method="knn-shapley",
        scores=total / val.n,
        notes={"k_neighbors": cfg.k_neighbors, "num_validation": val.n},
    )


def knn_utility(train: EmbeddingDataset, val: EmbeddingDataset, cfg: ShapleyConfig,
                members: Optional[Sequence[int]] = None) -> float:
    """U(S): mean over validation of matches among the min(K,|S|) nearest members of S, over K."""
    _check_pair(train, val)
    keep = np.ones(train.n, dtype=bool) if members is None else np.isin(np.arange(train.n), members)
    if not keep.any():
        return cfg.empty_set_utility
    order = _neighbor_order(train, val.features)
    total = 0.0
    for v in range(val.n):
        nearest = order[v][keep[order[v]]][:cfg.k_neighbors]
        total += np.sum(train.labels[nearest] == val.labels[v]) / cfg.k_neighbors
    return total / val.n


def shapley_oracle(train: EmbeddingDataset, val: EmbeddingDataset, cfg: ShapleyConfig) -> ValueVector:
    """Exact Shapley values by enumerating all 2^n coalitions."""
    _check_pair(train, val)
    n = train.n
    if n > ORACLE_MAX_N:
        raise TooLarge(f"shapley_oracle enumerates 2^n subsets; n={n} exceeds {ORACLE_MAX_N}")
    cfg.check(n)
    k = cfg.k_neighbors
    order = _neighbor_order(train, val.features)
    hits = train.labels[order] == val.labels[:, None]

    masks = np.arange(1 << n)
    in_mask = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    sizes = in_mask.sum(axis=1)

    utility = np.zeros(masks.size)
    for v in range(val.n):
        present = in_mask[:, order[v]]  # coalition membership in distance order
        rank = np.cumsum(present, axis=1)
        utility += np.sum(present & (rank <= k) & hits[v], axis=1) / k
    utility /= val.n
    utility[0] = cfg.empty_set_utility

    phi = np.zeros(n)
    for j in range(n):
        without = ~in_mask[:, j]
        s = sizes[without]
        weight = 1.0 / (n * comb(n - 1, s))
        phi[j] = np.sum(weight * (utility[masks[without] | (1 << j)] - utility[masks[without]]))
    return ValueVector(method="shapley-oracle", scores=phi, notes={"utility_full": float(utility[-1])})


# ============================================================================
# Data-OOB
# ============================================================================

def _oob_model(train: EmbeddingDataset, model_index: int, seed: int, epochs: int, lr: float,
               indices: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    n = train.n
    if indices is None:
        indices = np.random.default_rng(seed + model_index).integers(0, n, size=n)
    out_of_bag = np.bincount(indices, minlength=n) == 0
    try:
        model = train_softmax(train.subset(indices), epochs=epochs, lr=lr)
    except Exception as exc:
        raise TrainerFailure(model_index, exc) from exc
    correct = np.zeros(n, dtype=np.int64)
    if out_of_bag.any():
        correct[out_of_bag] = model.predict(train.features[out_of_bag]) == train.labels[out_of_bag]
    return out_of_bag.astype(np.int64), correct


def data_oob(train: EmbeddingDataset, num_models: int = 100, seed: int = 0, epochs: int = 10,
             lr: float = 0.01, bootstrap_indices: Optional[Sequence[Sequence[int]]] = None,
             workers: Optional[int] = None) -> ValueVector:
    """
    Out-of-bag accuracy per point over `num_models` bootstrap softmax models.

    Model m draws its bootstrap with default_rng(seed + m). `bootstrap_indices`
    forces the draws (one index array per model).
    """
    if num_models < 1:
        raise ValueError("num_models must be at least 1")
    if train.n < 2:
        raise ValueError("data_oob needs at least 2 points")
    if bootstrap_indices is not None and len(bootstrap_indices) != num_models:
        raise ValueError(f"expected {num_models} bootstrap index arrays, got {len(bootstrap_indices)}")

    forced = [None] * num_models if bootstrap_indices is None else [
        np.asarray(b, dtype=np.intp) for b in bootstrap_indices
    ]
    workers = resolve_workers(workers)
    with Parallel(n_jobs=workers, prefer="threads") as parallel:
        results = parallel(
            delayed(_oob_model)(train, m, seed, epochs, lr, forced[m]) for m in range(num_models)
        )
    oob_counts = np.sum([r[0] for r in results], axis=0)
    correct = np.sum([r[1] for r in results], axis=0)

    scores = np.zeros(train.n)
    seen = oob_counts > 0
    scores[seen] = correct[seen] / oob_counts[seen]
    return ValueVector(
        method="data-oob",
        scores=scores,
        seed=seed,
        notes={
            "num_models": num_models,
            "epochs": epochs,
            "never_oob": [int(i) for i in np.flatnonzero(~seen)],
        },
    )


# ============================================================================
# Random
# ============================================================================

def random_valuer(n: int, seed: int = 0) -> ValueVector:
    if n < 1:
        raise ValueError("n must be at least 1")
    return ValueVector(method="random", scores=np.random.default_rng(seed).uniform(0.0, 1.0, size=n), seed=seed)


# ============================================================================
# Valuer classes and registry
# ============================================================================

class RandomValuer(Valuer):
    name = "random"

    def value(self, train, val=None, seed=0):
        return random_valuer(train.n, seed)


class IndexValuer(Valuer):
    """Score = point index; ignores features, labels and seed."""
    name = "index"

    def value(self, train, val=None, seed=0):
        return ValueVector(method="index", scores=np.arange(train.n, dtype=np.float64), seed=seed)


class KnnShapleyValuer(Valuer):
    name = "knn-shapley"
    needs_validation = True

    def __init__(self, k_neighbors: int = 100, workers: Optional[int] = None):
        self.k_neighbors = k_neighbors
        self.workers = workers

    def value(self, train, val=None, seed=0):
        # desk-scale sets can be smaller than the default K
        cfg = ShapleyConfig(k_neighbors=min(self.k_neighbors, train.n))
        out = knn_shapley(train, val, cfg, workers=self.workers)
        out.seed = seed
        return out

    def describe(self):
        return {"name": self.name, "k_neighbors": self.k_neighbors}


class DataOobValuer(Valuer):
    name = "data-oob"

    def __init__(self, num_models: int = 100, epochs: int = 10, lr: float = 0.01,
                 workers: Optional[int] = None):
        self.num_models = num_models
        self.epochs = epochs
        self.lr = lr
        self.workers = workers

    def value(self, train, val=None, seed=0):
        return data_oob(train, self.num_models, seed, epochs=self.epochs, lr=self.lr, workers=self.workers)

    def describe(self):
        return {"name": self.name, "num_models": self.num_models, "epochs": self.epochs, "lr": self.lr}


class EigenValuer(Valuer):
    """EV on its own: the bound change from removing each point."""
    name = "ev"

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or RunConfig()

    def value(self, train, val=None, seed=0):
        rows, _ = center_rows(train.features)
        out = ev_scores(rows, ridge=self.config.ridge, tol=self.config.eig_tol,
                        max_iter=self.config.eig_max_iter, seed=seed)
        out.seed = seed
        return out

    def describe(self):
        return {"name": self.name, "ridge": self.config.ridge, "eig_tol": self.config.eig_tol}


VALUERS = {
    "random": RandomValuer,
    "index": IndexValuer,
    "knn-shapley": KnnShapleyValuer,
    "data-oob": DataOobValuer,
    "ev": EigenValuer,
}


def make_valuer(name: str, k_neighbors: int = 100, num_models: int = 100, oob_epochs: int = 10,
                lr: float = 0.01, ridge: bool = False, workers: Optional[int] = None) -> Valuer:
    if name not in VALUERS:
        raise ValueError(f"unknown valuer {name!r}; choose from {', '.join(sorted(VALUERS))}")
    if name == "knn-shapley":
        return KnnShapleyValuer(k_neighbors=k_neighbors, workers=workers)
    if name == "data-oob":
        return DataOobValuer(num_models=num_models, epochs=oob_epochs, lr=lr, workers=workers)
    if name == "ev":
        return EigenValuer(RunConfig(ridge=ridge))
    return VALUERS[name]()


def value_with_ev(valuer: Valuer, train: EmbeddingDataset, val: Optional[EmbeddingDataset] = None,
                  w: float = 0.0, seed: int = 0, ridge: bool = False) -> ValueVector:
    """Base scores, plus w times the standardized EV scores when w > 0."""
    base = valuer.value(train, val, seed=seed)
    if w == 0.0:
        return base
    rows, _ = center_rows(train.features)
    ev = ev_scores(rows, ridge=ridge, seed=seed)
    out = combine(base, ev, w)
    out.notes.update({"base_method": base.method, "ev_discrepancy": ev.notes.get("discrepancy")})
    if "never_oob" in base.notes:
        out.notes["never_oob"] = base.notes["never_oob"]
    return out
