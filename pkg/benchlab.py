"""
Experiment protocols: data removal, point addition, rank stability, timing,
and the supporting fidelity, PCA-gap and alignment runs.

Every protocol returns an ExperimentReport of flat (seed, step_or_repeat,
metric, value) rows plus aggregates that are recomputed and checked on
every save and load.
"""

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from datahub import EmbeddingDataset, center_rows, marginal_alignment, pca_variance_gap
from ev_base import InsufficientSource, StepExceedsPool, Valuer, resolve_workers, say
from evcore import combine, eigen_shift_fidelity, ev_scores, ev_scores_exact
from valuers import evaluate, make_valuer, train_softmax, value_with_ev


REPORT_FORMAT_VERSION = 1
GENERATOR = f"numpy.random.default_rng (PCG64), numpy {np.__version__}"
AGGREGATE_TOL = 1e-12


# ============================================================================
# Configuration
# ============================================================================

@dataclass
class ClassifierConfig:
    epochs: int = 30
    lr: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class StabilityConfig:
    pool: int = 300
    fixed: int = 290
    repeats: int = 5

    def __post_init__(self):
        if not 0 < self.fixed < self.pool:
            raise ValueError(f"need 0 < fixed < pool, got fixed={self.fixed}, pool={self.pool}")
        if self.repeats < 2:
            raise ValueError("repeats must be at least 2")

    @property
    def varied(self) -> int:
        return self.pool - self.fixed

    @property
    def required(self) -> int:
        """Source points needed when replacements are never reused."""
        return self.pool + self.varied * self.repeats


@dataclass
class TimingConfig:
    warmup: int = 3
    repeats: int = 5

    def __post_init__(self):
        if self.warmup < 0 or self.repeats < 1:
            raise ValueError("timing needs warmup >= 0 and repeats >= 1")


@dataclass
class ProtocolConfig:
    """Everything a protocol run needs; echoed verbatim into its report."""
    valuer: str = "knn-shapley"
    weight_w: float = 0.0
    removal_fraction: float = 0.5
    addition_steps: List[int] = field(default_factory=lambda: [100, 300, 500])
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    k_neighbors: int = 100
    num_models: int = 100
    oob_epochs: int = 10
    ridge: bool = False
    compare: List[str] = field(default_factory=lambda: ["random"])
    weight_sweep: List[float] = field(default_factory=lambda: [0.25, 0.5, 1.0])
    timing: TimingConfig = field(default_factory=TimingConfig)
    threads: Optional[int] = None
    verbose: bool = False

    def __post_init__(self):
        if isinstance(self.stability, dict):
            self.stability = StabilityConfig(**self.stability)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        if isinstance(self.timing, dict):
            self.timing = TimingConfig(**self.timing)
        if not 0.0 < self.removal_fraction < 1.0:
            raise ValueError(f"removal_fraction must lie in (0, 1), got {self.removal_fraction}")
        for w in [self.weight_w] + list(self.weight_sweep):
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"weights must lie in [0, 1], got {w}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if any(step < 0 for step in self.addition_steps):
            raise ValueError("addition steps must be non-negative")

    @property
    def workers(self) -> int:
        return resolve_workers(self.threads)

    def label(self, valuer: Optional[str] = None, w: Optional[float] = None) -> str:
        name = valuer or self.valuer
        w = self.weight_w if w is None else w
        return f"{name}+ev" if w > 0 else name

    def build_valuer(self, name: Optional[str] = None, workers: Optional[int] = None) -> Valuer:
        return make_valuer(name or self.valuer, k_neighbors=self.k_neighbors, num_models=self.num_models,
                           oob_epochs=self.oob_epochs, lr=self.classifier.lr, ridge=self.ridge,
                           workers=workers)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ============================================================================
# Reports
# ============================================================================

@dataclass
class MetricRow:
    seed: int
    step_or_repeat: int
    metric: str
    value: float


@dataclass
class Aggregate:
    metric: str
    step_or_repeat: int
    mean: float
    std: float
    count: int


def aggregate(rows: Sequence[MetricRow]) -> List[Aggregate]:
    """Mean and population std per (metric, step_or_repeat), in first-seen order."""
    groups: Dict[Tuple[str, int], List[float]] = {}
    for row in rows:
        groups.setdefault((row.metric, row.step_or_repeat), []).append(row.value)
    return [
        Aggregate(metric, step, float(np.mean(vals)), float(np.std(vals)), len(vals))
        for (metric, step), vals in groups.items()
    ]


@dataclass
class ExperimentReport:
    protocol: str
    config: Dict[str, Any]
    rows: List[MetricRow] = field(default_factory=list)
    aggregates: List[Aggregate] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)
    generator: str = GENERATOR
    format_version: int = REPORT_FORMAT_VERSION

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    def validate(self) -> None:
        """Aggregates must equal recomputation from the rows."""
        if self.format_version != REPORT_FORMAT_VERSION:
            raise ValueError(f"unsupported report format version {self.format_version}")
        fresh = {(a.metric, a.step_or_repeat): a for a in aggregate(self.rows)}
        stored = {(a.metric, a.step_or_repeat): a for a in self.aggregates}
        if fresh.keys() != stored.keys():
            raise ValueError(f"{self.protocol}: aggregate keys do not match the rows")
        for key, a in stored.items():
            b = fresh[key]
            if a.count != b.count or abs(a.mean - b.mean) > AGGREGATE_TOL or abs(a.std - b.std) > AGGREGATE_TOL:
                raise ValueError(f"{self.protocol}: aggregate {key} does not match its rows")

    def mean(self, metric: str, step_or_repeat: int = 0) -> float:
        for a in self.aggregates:
            if a.metric == metric and a.step_or_repeat == step_or_repeat:
                return a.mean
        raise KeyError(f"{self.protocol}: no metric {metric!r} at step {step_or_repeat}")

    def values(self, metric: str, step_or_repeat: int = 0) -> List[float]:
        return [r.value for r in self.rows if r.metric == metric and r.step_or_repeat == step_or_repeat]

    def headline(self) -> str:
        parts = [f"{a.metric}[{a.step_or_repeat}]={a.mean:.4f}+-{a.std:.4f}" for a in self.aggregates]
        return f"{self.protocol}: " + "  ".join(parts)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentReport":
        data = dict(data)
        rows = [MetricRow(**r) for r in data.pop("rows", [])]
        aggs = [Aggregate(**a) for a in data.pop("aggregates", [])]
        return cls(rows=rows, aggregates=aggs, **data)

    def save(self, directory: Path) -> Tuple[Path, Path]:
        """Write <protocol>.json and the flat <protocol>.csv table."""
        self.validate()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / f"{self.protocol}.json"
        csv_path = directory / f"{self.protocol}.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable), encoding="utf-8")
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "step_or_repeat", "metric", "value"])
            for row in self.rows:
                writer.writerow([row.seed, row.step_or_repeat, row.metric, repr(float(row.value))])
        return json_path, csv_path

    @classmethod
    def load(cls, path: Path) -> "ExperimentReport":
        report = cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        report.validate()
        return report


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


# ============================================================================
# Shared pieces
# ============================================================================

def fit_and_score(train: EmbeddingDataset, test: EmbeddingDataset, cfg: ProtocolConfig) -> float:
    model = train_softmax(train, epochs=cfg.classifier.epochs, lr=cfg.classifier.lr)
    return evaluate(model, test)


def _over_seeds(cfg: ProtocolConfig, job: Callable[[int, Optional[int]], List[MetricRow]]) -> List[MetricRow]:
    """Run job(seed, inner_workers) for every seed; rows come back in seed order."""
    workers = cfg.workers
    outer = min(workers, len(cfg.seeds))
    inner = 1 if outer > 1 else workers
    with Parallel(n_jobs=outer, prefer="threads") as parallel:
        parts = parallel(delayed(job)(seed, inner) for seed in cfg.seeds)
    return [row for part in parts for row in part]


def _note_never_oob(store: Dict[str, List[int]], key, values) -> None:
    """Record the indices data-oob never held out, keyed by seed (or seed:repeat)."""
    if "never_oob" in values.notes:
        store[str(key)] = [int(i) for i in values.notes["never_oob"]]


def _with_never_oob(extras: Dict[str, Any], store: Dict[str, List[int]]) -> Dict[str, Any]:
    if store:
        extras["never_oob"] = dict(sorted(store.items()))
    return extras


def removal_keep(values, fraction: float) -> np.ndarray:
    """Indices left after dropping the top floor(fraction*n) scores, ascending."""
    drop = int(math.floor(fraction * len(values)))
    return np.sort(values.ranking()[drop:])


# ============================================================================
# Protocols
# ============================================================================

def run_removal(train: EmbeddingDataset, val: Optional[EmbeddingDataset], ood_test: EmbeddingDataset,
                cfg: ProtocolConfig) -> ExperimentReport:
    """Drop the highest-valued fraction, retrain, score on OOD (lower is better)."""
    label = cfg.label()
    say(cfg.verbose, f"[removal] {label}: n={train.n}, dropping {cfg.removal_fraction:.0%}, seeds {cfg.seeds}")
    never_oob: Dict[str, List[int]] = {}

    def job(seed, inner):
        values = value_with_ev(cfg.build_valuer(workers=inner), train, val, cfg.weight_w, seed, cfg.ridge)
        _note_never_oob(never_oob, seed, values)
        keep = removal_keep(values, cfg.removal_fraction)
        acc = fit_and_score(train.subset(keep), ood_test, cfg)
        say(cfg.verbose, f"[removal] seed {seed}: kept {keep.size}, ood accuracy {acc:.4f}")
        return [MetricRow(seed, 0, "ood_accuracy", acc)]

    rows = _over_seeds(cfg, job)
    return ExperimentReport("removal", cfg.to_dict(), rows, extras=_with_never_oob({"label": label}, never_oob))


def run_removal_sweep(train: EmbeddingDataset, val: Optional[EmbeddingDataset], ood_test: EmbeddingDataset,
                      cfg: ProtocolConfig) -> ExperimentReport:
    """Removal for the base valuer and for every w in weight_sweep; the base is valued once per seed."""
    weights = [0.0] + [w for w in cfg.weight_sweep if w > 0]
    say(cfg.verbose, f"[removal-sweep] {cfg.valuer}: w in {weights}, seeds {cfg.seeds}")
    never_oob: Dict[str, List[int]] = {}

    def job(seed, inner):
        base = value_with_ev(cfg.build_valuer(workers=inner), train, val, 0.0, seed, cfg.ridge)
        _note_never_oob(never_oob, seed, base)
        ev = None
        rows = []
        for w in weights:
            values = base
            if w > 0:
                if ev is None:
                    ev = ev_scores(center_rows(train.features)[0], ridge=cfg.ridge, seed=seed)
                values = combine(base, ev, w)
            acc = fit_and_score(train.subset(removal_keep(values, cfg.removal_fraction)), ood_test, cfg)
            say(cfg.verbose, f"[removal-sweep] seed {seed} w={w:g}: ood accuracy {acc:.4f}")
            rows.append(MetricRow(seed, 0, f"ood_accuracy@w={w:g}", acc))
        return rows

    rows = _over_seeds(cfg, job)
    return ExperimentReport("removal_sweep", cfg.to_dict(), rows,
                            extras=_with_never_oob({"weights": weights}, never_oob))


def run_addition(initial: EmbeddingDataset, pool: EmbeddingDataset, ood_test: EmbeddingDataset,
                 cfg: ProtocolConfig, val: Optional[EmbeddingDataset] = None) -> ExperimentReport:
    """Grow `initial` with the top-valued pool prefix at each configured step."""
    steps = sorted(set(cfg.addition_steps))
    if steps and steps[-1] > pool.n:
        raise StepExceedsPool(f"step {steps[-1]} exceeds the pool of {pool.n} points")
    reference = val if val is not None else initial
    label = cfg.label()
    say(cfg.verbose, f"[addition] {label}: |initial|={initial.n}, |pool|={pool.n}, steps {steps}")
    never_oob: Dict[str, List[int]] = {}

    def job(seed, inner):
        values = value_with_ev(cfg.build_valuer(workers=inner), pool, reference, cfg.weight_w, seed, cfg.ridge)
        _note_never_oob(never_oob, seed, values)
        order = values.ranking()
        rows = []
        for step in steps:
            data = initial if step == 0 else initial.concat(pool.subset(np.sort(order[:step])))
            acc = fit_and_score(data, ood_test, cfg)
            say(cfg.verbose, f"[addition] seed {seed} step {step}: ood accuracy {acc:.4f}")
            rows.append(MetricRow(seed, step, "ood_accuracy", acc))
        return rows

    rows = _over_seeds(cfg, job)
    return ExperimentReport("addition", cfg.to_dict(), rows, extras=_with_never_oob({"label": label}, never_oob))


def random_rank_std_reference(pool: int, fixed: int, repeats: int, trials: int = 200, seed: int = 0) -> float:
    """Mean per-point rank std when every repeat ranks the pool uniformly at random."""
    rng = np.random.default_rng(seed)
    ranks = np.argsort(rng.random((trials, repeats, pool)), axis=2).argsort(axis=2)
    return float(np.mean(np.std(ranks[:, :, :fixed], axis=1)))


def _ranks(values) -> np.ndarray:
    """Ordinal rank per point (0 = highest score), ties by index."""
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[values.ranking()] = np.arange(len(values))
    return ranks


def run_stability(source: EmbeddingDataset, cfg: ProtocolConfig,
                  val: Optional[EmbeddingDataset] = None) -> ExperimentReport:
    """
    Keep `fixed` points, swap the rest for fresh ones each repeat, and report the
    mean per-point rank std of the fixed points for the configured valuer and
    every name in cfg.compare.

    Replacement points are never reused across repeats. Without an explicit
    validation set, source points beyond the ones used for the pools serve as one;
    when the source holds exactly the points the pools need, each repeat's own pool
    is its reference set. extras["reference"] records which of the three was used.
    """
    st = cfg.stability
    if source.n < st.required:
        raise InsufficientSource(f"stability needs {st.required} source points "
                                 f"({st.pool} + {st.varied} x {st.repeats}), got {source.n}")
    entries = [(cfg.valuer, cfg.weight_w)] + [(name, 0.0) for name in cfg.compare]
    reference_kind = "val" if val is not None else ("leftover" if source.n > st.required else "pool")
    say(cfg.verbose, f"[stability] {st.fixed}/{st.pool} fixed, {st.repeats} repeats, "
                     f"valuers {[cfg.label(n, w) for n, w in entries]}, reference {reference_kind}")

    never_oob: Dict[str, List[int]] = {}

    def job(seed, inner):
        perm = np.random.default_rng(seed).permutation(source.n)
        fixed_ids = perm[:st.fixed]
        reference = val
        if reference_kind == "leftover":
            reference = source.subset(np.sort(perm[st.required:]))
        rows = []
        for name, w in entries:
            valuer = cfg.build_valuer(name, workers=inner)
            fixed_ranks = []
            for r in range(st.repeats):
                start = st.fixed + r * st.varied
                members = np.concatenate([fixed_ids, perm[start:start + st.varied]])
                pool = source.subset(members)
                values = value_with_ev(valuer, pool, pool if reference_kind == "pool" else reference,
                                       w, seed * 1000 + r, cfg.ridge)
                _note_never_oob(never_oob, f"{seed}:{r}", values)
                fixed_ranks.append(_ranks(values)[:st.fixed])
            mean_std = float(np.mean(np.std(np.vstack(fixed_ranks), axis=0)))
            say(cfg.verbose, f"[stability] seed {seed} {cfg.label(name, w)}: mean rank std {mean_std:.3f}")
            rows.append(MetricRow(seed, 0, f"mean_rank_std/{cfg.label(name, w)}", mean_std))
        return rows

    extras = {
        "replacement": "without reuse",
        "reference": reference_kind,
        "random_rank_std_reference": random_rank_std_reference(st.pool, st.fixed, st.repeats),
    }
    rows = _over_seeds(cfg, job)
    return ExperimentReport("stability", cfg.to_dict(), rows, extras=_with_never_oob(extras, never_oob))


def measure(fn: Callable[[], Any], timing: TimingConfig) -> List[float]:
    """Wall-clock seconds of the measured runs (monotonic clock)."""
    for _ in range(timing.warmup):
        fn()
    out = []
    for _ in range(timing.repeats):
        start = time.perf_counter()
        fn()
        out.append(time.perf_counter() - start)
    return out


def run_timing(train: EmbeddingDataset, cfg: ProtocolConfig, baselines: Sequence[str] = ("random", "knn-shapley", "data-oob"),
               val: Optional[EmbeddingDataset] = None) -> ExperimentReport:
    """Median wall-clock of approximate EV, exact EV and each baseline valuer."""
    if train.n < 100:
        raise ValueError(f"timing needs n >= 100, got {train.n}")
    rows_x, _ = center_rows(train.features)
    seed = cfg.seeds[0]
    reference = val if val is not None else train
    methods: Dict[str, Callable[[], Any]] = {
        "ev_scores": lambda: ev_scores(rows_x, ridge=cfg.ridge, seed=seed),
        "ev_scores_exact": lambda: ev_scores_exact(rows_x, ridge=cfg.ridge, workers=cfg.workers),
    }
    for name in baselines:
        valuer = cfg.build_valuer(name, workers=cfg.workers)
        methods[name] = lambda valuer=valuer: valuer.value(train, reference, seed=seed)

    rows, medians = [], {}
    for name, fn in methods.items():
        times = measure(fn, cfg.timing)
        medians[name] = float(np.median(times))
        say(cfg.verbose, f"[timing] {name}: median {medians[name]:.4f}s over {len(times)} runs")
        rows.extend(MetricRow(seed, r, f"{name}_seconds", t) for r, t in enumerate(times))
    ratio = medians["ev_scores_exact"] / medians["ev_scores"]
    rows.append(MetricRow(seed, 0, "exact_over_approx_ratio", ratio))
    extras = {"median_seconds": medians, "n": train.n, "d": train.d}
    return ExperimentReport("timing", cfg.to_dict(), rows, extras=extras)


def run_fidelity(train: EmbeddingDataset, cfg: ProtocolConfig) -> ExperimentReport:
    """Predicted vs exact leave-one-out eigenvalue shifts."""
    rows_x, _ = center_rows(train.features)
    seed = cfg.seeds[0]
    report = eigen_shift_fidelity(rows_x, ridge=cfg.ridge, workers=cfg.workers, seed=seed)
    summary = report.summary()
    say(cfg.verbose, f"[fidelity] n={train.n} d={train.d}: " +
        ", ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    rows = [MetricRow(seed, 0, key, float(value)) for key, value in summary.items()]
    return ExperimentReport("fidelity", cfg.to_dict(), rows, extras={"n": train.n, "d": train.d})


def run_pca_gap(train: EmbeddingDataset, cfg: ProtocolConfig, val: Optional[EmbeddingDataset] = None,
                top_fraction: float = 0.5) -> ExperimentReport:
    """Top-3 principal-component variance of the top- and bottom-valued groups."""
    say(cfg.verbose, f"[pca-gap] {cfg.label()}: top fraction {top_fraction}")

    never_oob: Dict[str, List[int]] = {}

    def job(seed, inner):
        values = value_with_ev(cfg.build_valuer(workers=inner), train, val, cfg.weight_w, seed, cfg.ridge)
        _note_never_oob(never_oob, seed, values)
        gap = pca_variance_gap(train, values, top_fraction)
        return [MetricRow(seed, 0, key, float(v)) for key, v in gap.as_dict().items()]

    rows = _over_seeds(cfg, job)
    return ExperimentReport("pca_gap", cfg.to_dict(), rows,
                            extras=_with_never_oob({"top_fraction": top_fraction}, never_oob))


def run_alignment(a: EmbeddingDataset, b: EmbeddingDataset, cfg: ProtocolConfig) -> ExperimentReport:
    """Empirical matching-marginal check between two domains."""
    report = marginal_alignment(a, b)
    seed = cfg.seeds[0]
    rows = [MetricRow(seed, 0, key, float(v)) for key, v in report.as_dict().items() if math.isfinite(v)]
    return ExperimentReport("alignment", cfg.to_dict(), rows, extras={"domains": [a.domain_tag, b.domain_tag]})
