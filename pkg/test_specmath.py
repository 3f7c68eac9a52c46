"""
Tests for specmath: covariance, the Jacobi oracle, extreme eigenpairs by
power iteration, and the Rayleigh/Frobenius bounds.
"""

import numpy as np

from ev_base import DimensionMismatch, NoConvergence, NonFinite, NotCentered, ZeroVector
from specmath import (
    SymMatrix,
    _round_robin,
    canonical_sign,
    covariance,
    eig_extreme,
    eig_full,
    jacobi_eigh,
    rayleigh,
    residual,
    spectral_rank,
)


def random_spd(rng, d, floor=0.1):
    a = rng.standard_normal((d, d))
    return a @ a.T / d + floor * np.eye(d)


def random_psd(rng, d, rank):
    a = rng.standard_normal((d, rank))
    return a @ a.T


def expect(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type as exc:
        return exc
    raise AssertionError(f"expected {exc_type.__name__}")


# ============================================================================
# Covariance and matrix type
# ============================================================================

def test_covariance_of_centered_rows():
    rows = np.array([[1.0, 2.0], [-1.0, -2.0], [0.0, 0.0]])
    cov = covariance(rows)
    assert np.allclose(cov.entries, rows.T @ rows / 3)
    assert cov.dim == 2
    assert not cov.entries.flags.writeable


def test_covariance_rejects_bad_rows():
    expect(NotCentered, covariance, np.array([[1.0, 0.0], [2.0, 0.0]]))
    expect(NonFinite, covariance, np.array([[np.nan, 0.0], [0.0, 0.0]]))
    expect(ValueError, covariance, np.array([[0.0, 0.0]]))
    expect(DimensionMismatch, covariance, np.zeros(4))


def test_symmatrix_validation():
    expect(ValueError, SymMatrix, np.array([[1.0, 2.0], [0.0, 1.0]]))
    expect(DimensionMismatch, SymMatrix, np.zeros((2, 3)))
    expect(NonFinite, SymMatrix, np.array([[np.inf, 0.0], [0.0, 1.0]]))


def test_canonical_sign():
    v = canonical_sign(np.array([0.1, -0.9, 0.2]))
    assert v[1] > 0 and v[0] < 0


# ============================================================================
# Jacobi oracle
# ============================================================================

def test_round_robin_covers_every_pair_once():
    for d in (2, 7, 8):
        seen = []
        for p, q in _round_robin(d):
            assert len(set(p.tolist()) | set(q.tolist())) == 2 * len(p)
            seen.extend(tuple(sorted(pair)) for pair in zip(p.tolist(), q.tolist()))
        assert sorted(seen) == [(i, j) for i in range(d) for j in range(i + 1, d)]


def test_jacobi_analytic_spectra():
    values, vectors = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(values, [3.0, 2.0, 1.0], atol=1e-10)
    assert np.allclose(np.abs(vectors[:, 0]), [1.0, 0.0, 0.0])

    pairs = eig_full(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert abs(pairs[0][0] - 3.0) <= 1e-10 and abs(pairs[1][0] - 1.0) <= 1e-10
    assert np.allclose(pairs[0][1], np.array([1.0, 1.0]) / np.sqrt(2), atol=1e-10)


def test_jacobi_matches_numpy():
    rng = np.random.default_rng(3)
    for d in (5, 10, 17):
        a = rng.standard_normal((d, d))
        m = (a + a.T) / 2
        values, vectors = jacobi_eigh(m)
        assert np.allclose(values, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-10)
        assert np.allclose(m @ vectors, vectors * values, atol=1e-9)
        assert np.allclose(vectors.T @ vectors, np.eye(d), atol=1e-10)


def test_trace_and_frobenius_identities():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = random_spd(rng, 8)
        values = np.array([v for v, _ in eig_full(m)])
        assert abs(values.sum() - np.trace(m)) <= 1e-9 * abs(np.trace(m))
        fro = np.linalg.norm(m)
        assert abs(np.sqrt(np.sum(values ** 2)) - fro) <= 1e-9 * fro


# ============================================================================
# Power iteration
# ============================================================================

def test_eig_extreme_matches_oracle():
    rng = np.random.default_rng(1)
    for seed in range(5):
        m = random_spd(rng, 16)
        values, vectors = jacobi_eigh(m)
        s = eig_extreme(m, seed=seed)
        assert abs(s.lambda_max - values[0]) <= 1e-8 * values[0]
        assert abs(s.lambda_min - values[-1]) <= 1e-8 * values[0]
        assert abs(abs(s.u_max @ vectors[:, 0]) - 1.0) <= 1e-6
        assert abs(abs(s.u_min @ vectors[:, -1]) - 1.0) <= 1e-6
        assert residual(m, s.lambda_max, s.u_max) <= 1e-9 * max(1.0, abs(s.lambda_max))
        assert not s.degenerate


def test_eig_extreme_negative_definite():
    s = eig_extreme(np.diag([-1.0, -3.0, -2.0]))
    assert abs(s.lambda_max + 1.0) <= 1e-9
    assert abs(s.lambda_min + 3.0) <= 1e-9


def test_eig_extreme_degenerate_cases():
    s = eig_extreme(np.eye(4))
    assert abs(s.lambda_max - 1.0) <= 1e-12 and abs(s.lambda_min - 1.0) <= 1e-12
    assert s.degenerate

    z = eig_extreme(np.zeros((3, 3)))
    assert z.lambda_max == 0.0 and z.lambda_min == 0.0 and z.degenerate


def test_eig_extreme_is_deterministic():
    m = random_spd(np.random.default_rng(4), 12)
    a, b = eig_extreme(m, seed=7), eig_extreme(m, seed=7)
    assert a.lambda_max == b.lambda_max and np.array_equal(a.u_min, b.u_min)


def test_eig_extreme_gives_up():
    m = random_spd(np.random.default_rng(5), 6)
    expect(NoConvergence, eig_extreme, m, max_iter=1)
    expect(ValueError, eig_extreme, m, tol=0.0)


# ============================================================================
# Rayleigh and Frobenius bounds
# ============================================================================

def test_rayleigh_bounds():
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(1000):
        d = int(rng.integers(2, 9))
        m = random_psd(rng, d, int(rng.integers(1, d + 1)))
        values, _ = jacobi_eigh(m)
        r = rayleigh(m, rng.standard_normal(d))
        slack = 1e-10 * max(1.0, values[0])
        if not values[-1] - slack <= r <= values[0] + slack:
            violations += 1
    assert violations == 0


def test_rayleigh_errors():
    expect(ZeroVector, rayleigh, np.eye(2), np.zeros(2))
    expect(DimensionMismatch, rayleigh, np.eye(2), np.ones(3))


def test_frobenius_rank_bound():
    rng = np.random.default_rng(6)
    for _ in range(100):
        d = 8
        m = random_psd(rng, d, int(rng.integers(1, d + 1)))
        values, _ = jacobi_eigh(m)
        rank = spectral_rank(values)
        fro = np.linalg.norm(m)
        assert values[0] <= fro * (1 + 1e-12)
        assert fro <= np.sqrt(rank) * values[0] * (1 + 1e-12)


# ============================================================================
# Runner
# ============================================================================

def run_all_tests() -> bool:
    print("\n" + "=" * 80)
    print("SPECMATH - TEST SUITE")
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
