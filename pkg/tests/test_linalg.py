import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from llab.linalg import balance, eigvals_real, hessenberg, jacobi_eigh, jacobi_svd, order_spectrum


def companion(roots):
    coeffs = np.poly(roots)  # monic, highest degree first
    n = len(roots)
    c = np.zeros((n, n))
    c[0, :] = -coeffs[1:]
    c[1:, :-1] = np.eye(n - 1)
    return c


def match_error(found, expected):
    """Largest distance after greedy nearest matching of two multisets."""
    remaining = list(np.asarray(expected, complex))
    worst = 0.0
    for z in np.asarray(found, complex):
        k = int(np.argmin([abs(z - r) for r in remaining]))
        worst = max(worst, abs(z - remaining.pop(k)))
    return worst


def rotation(theta):
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


@pytest.mark.parametrize("degree", range(2, 9))
def test_companion_roots(degree):
    rng = np.random.default_rng(degree)
    n_pairs = degree // 2 if degree > 2 else 0
    roots = [complex(rng.uniform(-2, 2), rng.uniform(0.2, 1.5)) for _ in range(n_pairs // 2)]
    roots += [r.conjugate() for r in roots]
    roots += list(rng.uniform(-3, 3, degree - len(roots)))
    res = eigvals_real(companion(roots))
    assert res.converged
    assert match_error(res.eigenvalues, roots) < 1e-8


def test_integer_roots_exact():
    roots = [1, 2, 3, 4, 5, 6]
    assert match_error(eigvals_real(companion(roots)).eigenvalues, roots) < 1e-8


@pytest.mark.parametrize("theta", [0.3, 1.0, 2.5, math.pi / 2])
def test_rotation_spectrum(theta):
    ev = eigvals_real(rotation(theta)).eigenvalues
    expected = [complex(math.cos(theta), math.sin(theta)), complex(math.cos(theta), -math.sin(theta))]
    np.testing.assert_allclose(ev, expected, atol=1e-10)


def test_block_rotation_and_involution_spectra():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    d = np.diag([1, 1, 1, -1, -1, 1.0])
    inv = q @ d @ q.T
    ev = eigvals_real(inv).eigenvalues
    assert match_error(ev, [1, 1, 1, 1, -1, -1]) < 1e-10
    blocks = np.zeros((6, 6))
    blocks[:2, :2] = rotation(0.4)
    blocks[2:4, 2:4] = rotation(1.7)
    blocks[4:, 4:] = np.diag([1.0, -1.0])
    ev = eigvals_real(q @ blocks @ q.T).eigenvalues
    expected = [np.exp(1j * 0.4), np.exp(-1j * 0.4), np.exp(1j * 1.7), np.exp(-1j * 1.7), 1, -1]
    assert match_error(ev, expected) < 1e-10


@pytest.mark.parametrize("n", [1, 3, 8, 17, 40])
def test_random_matrices_match_numpy(n):
    a = np.random.default_rng(n).standard_normal((n, n))
    res = eigvals_real(a)
    assert res.converged
    assert match_error(res.eigenvalues, np.linalg.eigvals(a)) < 1e-8


def test_ordering_keeps_conjugates_adjacent():
    ev = order_spectrum(np.array([1 - 2j, 3.0, 1 + 2j, -1.0]))
    np.testing.assert_array_equal(ev, [3.0, 1 + 2j, 1 - 2j, -1.0])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 9)).map(lambda t: (t[0], t[0])),
                  elements=st.floats(-5, 5)))
def test_conjugate_pair_symmetry(a):
    ev = eigvals_real(a).eigenvalues
    complex_ones = ev[np.abs(ev.imag) > 0]
    assert len(complex_ones) % 2 == 0
    for k in range(0, len(complex_ones), 2):
        assert complex_ones[k] == np.conj(complex_ones[k + 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_balance_and_hessenberg_are_similarities(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n)) * np.exp(rng.uniform(-4, 4, n))[:, None]
    h = hessenberg(balance(a))
    assert np.allclose(np.tril(h, -2), 0.0)
    assert abs(np.trace(h) - np.trace(a)) < 1e-8 * (1 + np.abs(a).sum())


def test_non_convergence_is_reported():
    a = np.random.default_rng(0).standard_normal((10, 10))
    res = eigvals_real(a, max_iter=1)
    assert not res.converged and len(res.eigenvalues) == 10


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        eigvals_real(np.array([[np.nan]]))


@pytest.mark.parametrize("shape", [(5, 5), (9, 4), (4, 9), (32, 32)])
def test_svd_reconstructs_and_matches_numpy(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    u, s, vt = jacobi_svd(a)
    k = min(shape)
    np.testing.assert_allclose((u[:, :k] * s[:k]) @ vt[:k], a, atol=1e-12)
    np.testing.assert_allclose(s[:k], np.linalg.svd(a, compute_uv=False), atol=1e-12)
    np.testing.assert_allclose(u[:, :k].T @ u[:, :k], np.eye(k), atol=1e-12)
    np.testing.assert_allclose(vt[:k] @ vt[:k].T, np.eye(k), atol=1e-12)


def test_svd_rank_deficient_basis_completed():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6))
    u, s, vt = jacobi_svd(a)
    np.testing.assert_allclose(u.T @ u, np.eye(6), atol=1e-10)
    np.testing.assert_allclose((u * s) @ vt, a, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_eigh_property(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a = a + a.T
    w, v = jacobi_eigh(a)
    assert np.all(np.diff(w) >= 0)
    np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-12)
    np.testing.assert_allclose((v * w) @ v.T, a, atol=1e-10)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(a), atol=1e-10)


def test_eigh_repeated_and_zero_eigenvalues():
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((5, 5)))
    a = q @ np.diag([0.0, 0.0, 2.0, 2.0, -1.0]) @ q.T
    w, _ = jacobi_eigh(a)
    np.testing.assert_allclose(w, [-1, 0, 0, 2, 2], atol=1e-12)
