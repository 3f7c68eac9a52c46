#!/usr/bin/env python3
"""
Full-scale acceptance runs for the statistical and timing properties.

These are experiments rather than unit tests: each one builds its own
synthetic data at the stated scale, runs the relevant protocol, and reports
PASS/FAIL together with the measured numbers and wall-clock time.

Usage:
    python acceptance.py              # all runs
    python acceptance.py fidelity     # one run by name
"""

import sys
import time
from typing import Callable, Dict, Tuple

import numpy as np

from benchlab import (
    ClassifierConfig,
    ProtocolConfig,
    StabilityConfig,
    TimingConfig,
    fit_and_score,
    run_addition,
    run_removal,
    run_removal_sweep,
    run_stability,
    run_timing,
)
from datahub import ShiftSpec, gaussian_dataset, synth_shift_pair
from ev_base import resolve_workers
from evcore import eigen_shift_fidelity


Outcome = Tuple[bool, str]


def check_fidelity() -> Outcome:
    """Predicted vs exact leave-one-out eigenvalue shifts, n=1000, d=32."""
    data = gaussian_dataset(1000, 32, seed=0, scales=np.linspace(3.0, 0.5, 32))
    start = time.perf_counter()
    report = eigen_shift_fidelity(data.features.copy(), workers=resolve_workers())
    elapsed = time.perf_counter() - start
    ok = report.pearson_max >= 0.99 and report.pearson_min >= 0.95 and elapsed < 30.0
    return ok, (f"pearson(delta_max)={report.pearson_max:.4f} pearson(delta_min)={report.pearson_min:.4f} "
                f"in {elapsed:.1f}s")


def check_removal(seeds: int = 20) -> Outcome:
    """Lowest-valued half, EV+KNN-Shapley vs KNN-Shapley alone, paired per seed."""
    cfg_args = dict(valuer="knn-shapley", k_neighbors=100, weight_sweep=[1.0],
                    classifier=ClassifierConfig(epochs=30, lr=0.01))
    start = time.perf_counter()
    base, with_ev = [], []
    for seed in range(seeds):
        spec = ShiftSpec(n_id=2500, n_ood=1000, d=32, shift_strength=0.3, seed=seed)
        id_set, ood_set, _ = synth_shift_pair(spec)
        train, val = id_set.subset(range(2000)), id_set.subset(range(2000, 2500))
        report = run_removal_sweep(train, val, ood_set, ProtocolConfig(seeds=[seed], **cfg_args))
        base.extend(report.values("ood_accuracy@w=0"))
        with_ev.extend(report.values("ood_accuracy@w=1"))
    elapsed = time.perf_counter() - start
    gap = float(np.mean(with_ev) - np.mean(base))
    ok = gap <= 0.005 and elapsed < 600.0
    return ok, (f"knn-shapley={np.mean(base):.4f} knn-shapley+ev={np.mean(with_ev):.4f} "
                f"(diff {gap:+.4f}) in {elapsed:.0f}s")


def check_random_removal(seeds: int = 20) -> Outcome:
    """Random valuer at fraction 0.5 vs training on a uniformly drawn half."""
    cfg_args = dict(valuer="random", classifier=ClassifierConfig(epochs=30, lr=0.01))
    start = time.perf_counter()
    removed, uniform = [], []
    for seed in range(seeds):
        spec = ShiftSpec(n_id=2000, n_ood=1000, d=32, shift_strength=0.3, seed=seed)
        train, ood_set, _ = synth_shift_pair(spec)
        cfg = ProtocolConfig(seeds=[seed], **cfg_args)
        removed.extend(run_removal(train, None, ood_set, cfg).values("ood_accuracy"))
        half = np.random.default_rng(10_000 + seed).choice(train.n, train.n // 2, replace=False)
        uniform.append(fit_and_score(train.subset(np.sort(half)), ood_set, cfg))
    elapsed = time.perf_counter() - start
    gap = float(np.mean(removed) - np.mean(uniform))
    ok = abs(gap) <= 0.03
    return ok, (f"random removal={np.mean(removed):.4f} uniform half={np.mean(uniform):.4f} "
                f"(diff {gap:+.4f}) in {elapsed:.0f}s")


def check_addition(seeds: int = 10) -> Outcome:
    """Top-valued additions at 100/300/500, EV+KNN-Shapley vs KNN-Shapley alone."""
    steps = [100, 300, 500]
    start = time.perf_counter()
    base, with_ev = [], []
    for seed in range(seeds):
        spec = ShiftSpec(n_id=2500, n_ood=1000, d=32, shift_strength=0.3, seed=seed)
        id_set, ood_set, _ = synth_shift_pair(spec)
        initial, pool = id_set.subset(range(1000)), id_set.subset(range(1000, 2000))
        val = id_set.subset(range(2000, 2500))
        for w, sink in ((0.0, base), (1.0, with_ev)):
            cfg = ProtocolConfig(valuer="knn-shapley", k_neighbors=100, weight_w=w, addition_steps=steps,
                                 classifier=ClassifierConfig(epochs=30, lr=0.01), seeds=[seed])
            report = run_addition(initial, pool, ood_set, cfg, val=val)
            sink.append(np.mean([report.values("ood_accuracy", step)[0] for step in steps]))
    elapsed = time.perf_counter() - start
    gap = float(np.mean(with_ev) - np.mean(base))
    ok = gap >= -0.005
    return ok, (f"knn-shapley={np.mean(base):.4f} knn-shapley+ev={np.mean(with_ev):.4f} "
                f"(diff {gap:+.4f}, trajectory mean over steps {steps}) in {elapsed:.0f}s")


def check_stability() -> Outcome:
    """Mean rank std of EV+KNN-Shapley vs random, 290/300 x 5, three meta-seeds."""
    spec = ShiftSpec(n_id=850, n_ood=2, d=32, shift_strength=0.3, seed=11)
    id_set, _, _ = synth_shift_pair(spec)
    source, val = id_set.subset(range(350)), id_set.subset(range(350, 850))
    cfg = ProtocolConfig(valuer="knn-shapley", weight_w=1.0, k_neighbors=100, compare=["random"],
                         stability=StabilityConfig(pool=300, fixed=290, repeats=5), seeds=[0, 1, 2])
    start = time.perf_counter()
    report = run_stability(source, cfg, val=val)
    elapsed = time.perf_counter() - start
    ev = float(np.mean(report.values("mean_rank_std/knn-shapley+ev")))
    rnd = float(np.mean(report.values("mean_rank_std/random")))
    ok = ev <= 0.8 * rnd and elapsed < 300.0
    return ok, f"knn-shapley+ev={ev:.2f} random={rnd:.2f} (ratio {ev / rnd:.3f}) in {elapsed:.0f}s"


def check_timing() -> Outcome:
    """ev_scores at n=2000, d=64 and its speedup over the exact leave-one-out path."""
    train = gaussian_dataset(2000, 64, seed=0, scales=np.linspace(2.0, 0.5, 64))
    cfg = ProtocolConfig(timing=TimingConfig(warmup=1, repeats=3))
    report = run_timing(train, cfg, baselines=())
    medians = report.extras["median_seconds"]
    ratio = report.mean("exact_over_approx_ratio")
    ok = medians["ev_scores"] < 5.0 and ratio >= 20.0
    return ok, (f"ev_scores={medians['ev_scores']:.3f}s ev_scores_exact={medians['ev_scores_exact']:.2f}s "
                f"ratio={ratio:.0f}")


CHECKS: Dict[str, Callable[[], Outcome]] = {
    "fidelity": check_fidelity,
    "removal": check_removal,
    "random-removal": check_random_removal,
    "addition": check_addition,
    "stability": check_stability,
    "timing": check_timing,
}


def run_all(names=None) -> bool:
    print("\n" + "=" * 80)
    print("EIGEN-VALUE - ACCEPTANCE RUNS")
    print("=" * 80)

    results = []
    for name in names or CHECKS:
        print(f"\n▶ {name} ...", flush=True)
        try:
            ok, detail = CHECKS[name]()
        except Exception as e:
            ok, detail = False, f"{type(e).__name__}: {e}"
        print(f"  {detail}")
        results.append((name, ok, detail))

    print(f"\n{'Run':<20} {'Result':<10}")
    print("-" * 80)
    for name, ok, _ in results:
        print(f"{name:<20} {'PASS' if ok else 'FAIL':<10}")

    passed = sum(1 for _, ok, _ in results if ok)
    print(f"\nTotal: {passed}/{len(results)} runs passed")
    return passed == len(results)


if __name__ == "__main__":
    unknown = [n for n in sys.argv[1:] if n not in CHECKS]
    if unknown:
        print(f"unknown run(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}", file=sys.stderr)
        sys.exit(2)
    sys.exit(0 if run_all(sys.argv[1:]) else 1)
