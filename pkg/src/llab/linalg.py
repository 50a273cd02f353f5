"""
Dense eigen/singular-value kernels for small real matrices (n <= ~128).

* :func:`jacobi_svd` - one-sided (Hestenes) Jacobi SVD.
* :func:`jacobi_eigh` - cyclic Jacobi for symmetric matrices.
* :func:`eigvals_real` - balancing, Householder reduction to upper
  Hessenberg form, then Francis double-shift QR (after the EISPACK ``hqr``
  scheme) for the full complex spectrum of a real nonsymmetric matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

EPS = np.finfo(np.float64).eps


def _complete_basis(cols: np.ndarray, n: int) -> np.ndarray:
    """Extend orthonormal columns (n×k) to an orthonormal n×n basis."""
    basis = [c for c in cols.T]
    for e in np.eye(n):
        if len(basis) == n:
            break
        v = e.copy()
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
    return np.stack(basis, axis=1)


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin-free SVD ``a = U @ diag(s) @ Vt`` for a square or tall matrix.

    Singular values are returned in descending order; ``U`` is completed to
    a full orthonormal basis when ``a`` is rank deficient.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("jacobi_svd expects a 2-D matrix")
    m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd(a.T, tol, max_sweeps)
        return vt.T, s, u.T
    w = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = w[:, p], w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[:, [p, q]] = np.stack([c * wp - s * wq, s * wp + c * wq], axis=1)
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, [p, q]] = np.stack([c * vp - s * vq, s * vp + c * vq], axis=1)
        if not rotated:
            break
    else:
        raise NumericalError("Jacobi SVD did not converge")
    sv = np.linalg.norm(w, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, w, v = sv[order], w[:, order], v[:, order]
    good = sv > sv[0] * n * EPS if sv[0] > 0 else np.zeros(n, bool)
    u = w[:, good] / sv[good]
    u = _complete_basis(u, m)[:, :n] if good.sum() < n else u
    return u, sv, v.T


def jacobi_eigh(a: np.ndarray, max_sweeps: int = 60):
    """Eigenpairs of a symmetric matrix: ``a = V @ diag(w) @ V.T``, ascending ``w``."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("jacobi_eigh expects a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                app, aqq = abs(a[p, p]), abs(a[q, q])
                if app + 100.0 * abs(apq) == app and aqq + 100.0 * abs(apq) == aqq:
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotated = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError("Jacobi eigensolver did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def balance(a: np.ndarray) -> np.ndarray:
    """Diagonal similarity scaling (powers of two) to equalise row/column norms."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    radix = 2.0
    done = False
    while not done:
        done = True
        for i in range(n):
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            g, f, s = r / radix, 1.0, c + r
            while c < g:
                f *= radix
                c *= radix * radix
            g = r * radix
            while c > g:
                f /= radix
                c /= radix * radix
            if (c + r) / f < 0.95 * s:
                done = False
                a[i, :] /= f
                a[:, i] *= f
    return a


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Householder reduction to upper Hessenberg form (similarity transform)."""
    h = np.array(a, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0])
        v /= np.linalg.norm(v)
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


@dataclass
class QRResult:
    eigenvalues: np.ndarray  # complex, length n
    iterations: int
    converged: bool


def hqr(h: np.ndarray, max_iter: int | None = None) -> QRResult:
    """Eigenvalues of an upper Hessenberg matrix by Francis double-shift QR."""
    a = np.array(h, dtype=np.float64)
    n = a.shape[0]
    wr = np.zeros(n)
    wi = np.zeros(n)
    if max_iter is None:
        max_iter = 100 * max(n, 1)
    anorm = np.sum(np.abs(np.triu(a, -1)))
    nn = n - 1
    t = 0.0
    total = 0
    converged = True
    while nn >= 0:
        its = 0
        while True:
            l = 0
            for ll in range(nn, 0, -1):
                s = abs(a[ll - 1, ll - 1]) + abs(a[ll, ll])
                if s == 0.0:
                    s = anorm
                if abs(a[ll, ll - 1]) + s == s:
                    a[ll, ll - 1] = 0.0
                    l = ll
                    break
            x = a[nn, nn]
            if l == nn:
                wr[nn], wi[nn] = x + t, 0.0
                nn -= 1
                break
            y = a[nn - 1, nn - 1]
            w = a[nn, nn - 1] * a[nn - 1, nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z != 0.0:
                        wr[nn] = x - w / z
                    wi[nn - 1] = wi[nn] = 0.0
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1], wi[nn] = z, -z
                nn -= 2
                break
            if total >= max_iter:
                converged = False
                # best effort: report the unreduced block's diagonal
                for i in range(nn + 1):
                    wr[i], wi[i] = a[i, i] + t, 0.0
                nn = -1
                break
            if its and its % 10 == 0:
                t += x
                a[np.arange(nn + 1), np.arange(nn + 1)] -= x
                s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                x = y = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            total += 1
            m = nn - 2
            while m >= l:
                z = a[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                q = a[m + 1, m + 1] - z - r - s
                r = a[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p, q, r = p / s, q / s, r / s
                if m == l:
                    break
                u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                if u + v == v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i, i - 2] = 0.0
                if i != m + 2:
                    a[i, i - 3] = 0.0
            for k in range(m, nn):
                if k != m:
                    p = a[k, k - 1]
                    q = a[k + 1, k - 1]
                    r = a[k + 2, k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p, q, r = p / x, q / x, r / x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k, k - 1] = -a[k, k - 1]
                else:
                    a[k, k - 1] = -s * x
                p += s
                x, y, z = p / s, q / s, r / s
                q, r = q / p, r / p
                # rows k..k+2, columns k..nn
                row = a[k, k:nn + 1] + q * a[k + 1, k:nn + 1]
                if k != nn - 1:
                    row = row + r * a[k + 2, k:nn + 1]
                    a[k + 2, k:nn + 1] -= row * z
                a[k + 1, k:nn + 1] -= row * y
                a[k, k:nn + 1] -= row * x
                # columns k..k+2, rows l..min(nn, k+3)
                mmin = min(nn, k + 3)
                col = x * a[l:mmin + 1, k] + y * a[l:mmin + 1, k + 1]
                if k != nn - 1:
                    col = col + z * a[l:mmin + 1, k + 2]
                    a[l:mmin + 1, k + 2] -= col * r
                a[l:mmin + 1, k + 1] -= col * q
                a[l:mmin + 1, k] -= col
    return QRResult(wr + 1j * wi, total, converged)


def order_spectrum(ev: np.ndarray) -> np.ndarray:
    """Sort by descending real part, conjugate pairs adjacent (positive imaginary first)."""
    ev = np.asarray(ev, dtype=complex)
    keys = sorted(range(len(ev)), key=lambda i: (-ev[i].real, abs(ev[i].imag), -ev[i].imag))
    return ev[keys]


def eigvals_real(a: np.ndarray, max_iter: int | None = None) -> QRResult:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigenvalues need a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if a.shape[0] == 0:
        return QRResult(np.zeros(0, complex), 0, True)
    res = hqr(hessenberg(balance(a)), max_iter)
    res.eigenvalues = order_spectrum(res.eigenvalues)
    return res
