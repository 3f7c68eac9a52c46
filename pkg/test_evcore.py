"""
Tests for evcore: the discrepancy bound, perturbation deltas, approximate
and exact EV scores, and the standardized combination with baselines.
"""

import math

import numpy as np

import evcore
from datahub import gaussian_dataset
from ev_base import DegenerateBase, DimensionMismatch, SingularCovariance, ValueVector
from evcore import (
    combine,
    discrepancy_bound,
    eigen_shift_fidelity,
    ev_marginal,
    ev_scores,
    ev_scores_exact,
    perturbation_arrays,
    perturbation_deltas,
    spectral_summary,
)
from specmath import SpectralSummary, covariance, eig_extreme, eig_full, jacobi_eigh


def summary_of(m):
    values, vectors = jacobi_eigh(m)
    return SpectralSummary(dim=m.shape[0], lambda_max=float(values[0]), lambda_min=float(values[-1]),
                           u_max=vectors[:, 0], u_min=vectors[:, -1])


def scaled_rows(n, d, seed=0, top=4.0, bottom=0.5):
    return gaussian_dataset(n, d, seed=seed, scales=np.linspace(top, bottom, d)).features.copy()


def expect(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type as exc:
        return exc
    raise AssertionError(f"expected {exc_type.__name__}")


# ============================================================================
# Discrepancy bound
# ============================================================================

def test_bound_known_values():
    assert abs(discrepancy_bound(summary_of(np.eye(2))) - 2 * math.sqrt(2)) <= 1e-12
    assert abs(discrepancy_bound(summary_of(np.diag([4.0, 1.0]))) - 5 * math.sqrt(2)) <= 1e-12


def test_bound_matches_oracle_extremes():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((16, 16))
    m = a @ a.T / 16 + 0.2 * np.eye(16)
    values = [v for v, _ in eig_full(m)]
    direct = (values[0] * 4.0 + math.sqrt(16 * 15)) / values[-1]
    assert abs(discrepancy_bound(eig_extreme(m)) - direct) <= 1e-10 * direct


def test_bound_monotonicity():
    base = discrepancy_bound(summary_of(np.diag([3.0, 1.0])))
    assert discrepancy_bound(summary_of(np.diag([3.0, 1.5]))) < base
    assert discrepancy_bound(summary_of(np.diag([4.0, 1.0]))) > base


def test_bound_singular():
    exc = expect(SingularCovariance, discrepancy_bound, summary_of(np.diag([1.0, 0.0])))
    assert exc.lambda_min == 0.0 and exc.suggested_ridge > 0


def test_singular_remedy_is_the_ridge_that_would_be_applied():
    # trace 4 while lambda_max is 3: the suggestion must follow the trace
    exc = expect(SingularCovariance, discrepancy_bound, eig_extreme(np.diag([3.0, 1.0, 0.0])))
    assert abs(exc.suggested_ridge - 1e-8 * 4.0 / 3) <= 1e-20

    rows = scaled_rows(60, 3, seed=6)
    rows[:, 2] = 0.0
    for fn in (ev_scores, ev_scores_exact):
        exc = expect(SingularCovariance, fn, rows)
        applied = fn(rows, ridge=True).ridge
        assert abs(exc.suggested_ridge - applied) <= 1e-12 * applied


# ============================================================================
# Perturbation deltas
# ============================================================================

def test_delta_sign_and_magnitude():
    rows = scaled_rows(200, 6)
    s = eig_extreme(covariance(rows))
    deltas = perturbation_deltas(rows, s)
    norms = np.sum(rows ** 2, axis=1) / rows.shape[0]
    assert len(deltas) == 200
    for delta in deltas:
        assert delta.delta_max <= 0 and delta.delta_min <= 0
        assert -delta.delta_max <= norms[delta.index] * (1 + 1e-12)
        assert -delta.delta_min <= norms[delta.index] * (1 + 1e-12)


def test_first_order_consistency_on_axis_perturbation():
    sigma = np.diag([5.0, 3.0, 1.0])
    s = summary_of(sigma)
    rows = np.array([[0.8, 0.0, 0.0], [0.0, 0.6, 0.0]])
    delta_max, delta_min = perturbation_arrays(rows, s)

    shifted = sigma - np.outer(rows[0], rows[0]) / 2
    assert abs(delta_max[0] - (eig_full(shifted)[0][0] - 5.0)) <= 1e-12
    shifted = sigma - np.outer(rows[1], rows[1]) / 2
    assert abs(delta_min[1] - (eig_full(shifted)[-1][0] - 1.0)) <= 1e-12


def test_perturbation_dimension_check():
    s = summary_of(np.eye(3))
    expect(DimensionMismatch, perturbation_arrays, np.zeros((4, 2)), s)


# ============================================================================
# Approximate scores
# ============================================================================

def test_ev_scores_formula():
    rows = scaled_rows(300, 5, seed=1)
    out = ev_scores(rows)
    s = spectral_summary(rows)
    d = 5
    a = s.lambda_max * math.sqrt(d) + math.sqrt(d * d - d)
    proj_max = rows @ s.u_max
    proj_min = rows @ s.u_min
    expected = (math.sqrt(d) * (-proj_max ** 2 / 300) / s.lambda_min
                - a * (-proj_min ** 2 / 300) / s.lambda_min ** 2)
    assert out.method == "ev-approx"
    assert np.allclose(out.scores, expected, rtol=1e-12, atol=1e-15)
    for k in (0, 17, 299):
        delta = perturbation_deltas(rows, s)[k]
        assert abs(ev_marginal(s, delta) - out.scores[k]) <= 1e-12 * max(1.0, abs(out.scores[k]))


def test_duplicated_points_get_equal_scores():
    rows = scaled_rows(50, 4, seed=7)
    doubled = np.vstack([rows, rows])
    scores = ev_scores(doubled).scores
    assert np.allclose(scores[:50], scores[50:], rtol=1e-12, atol=1e-15)


def test_antipodal_pair_with_ridge_scores_equal():
    rows = np.array([[1.0, 0.0], [-1.0, 0.0]])
    expect(SingularCovariance, ev_scores, rows)
    out = ev_scores(rows, ridge=True)
    assert out.ridge == 1e-8 * 1.0 / 2
    assert np.all(np.isfinite(out.scores))
    assert abs(out.scores[0] - out.scores[1]) <= 1e-12 * max(1.0, abs(out.scores[0]))


def test_ev_scores_single_eigen_extraction():
    calls = []
    original = evcore.eig_extreme

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    evcore.eig_extreme = counting
    try:
        ev_scores(scaled_rows(500, 8))
    finally:
        evcore.eig_extreme = original
    assert len(calls) == 1


def test_ridge_is_applied_and_recorded():
    rows = scaled_rows(100, 3)
    rows[:, 2] = 0.0
    expect(SingularCovariance, ev_scores, rows)
    out = ev_scores(rows, ridge=True)
    trace = float(np.sum(rows ** 2) / rows.shape[0])
    assert abs(out.ridge - 1e-8 * trace / 3) <= 1e-20
    assert np.all(np.isfinite(out.scores))


# ============================================================================
# Exact scores and fidelity
# ============================================================================

def test_exact_equiangular_points_are_symmetric():
    angles = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    rows = np.column_stack([np.cos(angles), np.sin(angles)])
    out = ev_scores_exact(rows, ridge=True)
    assert out.method == "ev-exact" and out.ridge > 0
    assert np.ptp(out.scores) <= 1e-9 * max(1.0, np.max(np.abs(out.scores)))


def test_exact_rejects_tiny_sets():
    expect(ValueError, ev_scores_exact, np.array([[1.0, 0.0], [-1.0, 0.0]]))


def test_exact_singular_full_covariance():
    rows = scaled_rows(50, 3, seed=5)
    rows[:, 1] = 0.0
    exc = expect(SingularCovariance, ev_scores_exact, rows)
    assert exc.index is None and exc.suggested_ridge > 0
    assert np.all(np.isfinite(ev_scores_exact(rows, ridge=True).scores))


def test_exact_and_approx_agree_better_with_more_points():
    errors = []
    for n in (100, 1000):
        rows = scaled_rows(n, 8, seed=2)
        gap = np.mean(np.abs(ev_scores_exact(rows).scores - ev_scores(rows).scores))
        errors.append(gap)
    assert errors[1] < errors[0]


def test_fidelity_of_eigenvalue_shifts():
    rows = scaled_rows(1000, 8, seed=3)
    report = eigen_shift_fidelity(rows)
    assert report.pearson_max >= 0.99
    assert report.pearson_min >= 0.95
    assert report.spearman_scores > 0.9
    assert set(report.summary()) == {"pearson_delta_max", "pearson_delta_min", "spearman_scores",
                                     "mean_abs_score_error"}


# ============================================================================
# Combination
# ============================================================================

def test_combine_zero_weight_is_identity():
    base = ValueVector("knn-shapley", np.array([0.3, -1.2, 4.0, 0.0]))
    ev = ValueVector("ev-approx", np.array([9.0, 8.0, 7.0, 6.0]))
    out = combine(base, ev, 0.0)
    assert np.array_equal(out.scores, base.scores)
    assert out.method == "knn-shapley+ev" and out.weight_w == 0.0


def test_combine_hand_example():
    out = combine(ValueVector("b", [1.0, 2.0, 3.0]), ValueVector("ev", [0.5, 0.0, -0.5]), 1.0)
    sigma = math.sqrt(2.0 / 3.0)
    expected = [1 + (0.5 - 2) / sigma, 2 + (0.0 - 2) / sigma, 3 + (-0.5 - 2) / sigma]
    assert np.allclose(out.scores, expected, atol=1e-9, rtol=0)
    assert np.allclose(out.scores, [-0.837, -0.449, -0.062], atol=1e-3)
    assert out.notes["std_divisor"] == "n"


def test_combine_literal_identity():
    rng = np.random.default_rng(4)
    base = ValueVector("b", rng.standard_normal(50) * 3 + 1)
    ev = ValueVector("ev", rng.standard_normal(50))
    for w in (0.25, 0.5, 1.0):
        out = combine(base, ev, w)
        mu, sigma = base.scores.mean(), base.scores.std()
        assert np.allclose(out.scores, base.scores + w * (ev.scores - mu) / sigma, rtol=1e-14, atol=1e-14)


def test_combine_with_mean_valued_ev_leaves_base():
    base = ValueVector("b", [1.0, 5.0, 2.0])
    ev = ValueVector("ev", np.full(3, base.scores.mean()))
    assert np.array_equal(combine(base, ev, 0.7).scores, base.scores)


def test_combine_errors():
    ev = ValueVector("ev", [1.0, 2.0])
    expect(DegenerateBase, combine, ValueVector("b", [3.0, 3.0]), ev, 0.5)
    expect(ValueError, combine, ValueVector("b", [1.0, 2.0]), ev, 1.5)
    expect(DimensionMismatch, combine, ValueVector("b", [1.0, 2.0, 3.0]), ev, 0.5)


# ============================================================================
# Runner
# ============================================================================

def run_all_tests() -> bool:
    print("\n" + "=" * 80)
    print("EVCORE - TEST SUITE")
    print("=" * 80)

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    results = []
    for name, fn in tests:
        try:
            fn()
            results.append((name, True, None))
        except Exception as e:
            results.append((name, False, f"{type(e).__name__}: {e}"))

    print(f"\n{'Test':<50} {'Result':<10}")
    print("-" * 80)
    for name, passed, error in results:
        print(f"{name:<50} {'PASS' if passed else 'FAIL':<10}")
        if error:
            print(f"  Error: {error}")

    passed = sum(1 for _, ok, _ in results if ok)
    print(f"\nTotal: {passed}/{len(results)} tests passed")
    return passed == len(results)


if __name__ == "__main__":
    exit(0 if run_all_tests() else 1)
