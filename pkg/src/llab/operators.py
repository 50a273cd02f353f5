"""
Feature-space operators that mirror pixel-space edits.

Convention: token pairs are stacked as rows, ``X`` (source) and ``Y``
(target), both ``n × c``, and an operator ``M`` acts on a token as
``y ≈ M @ x``, i.e. ``Y ≈ X @ M.T`` for the stacked data.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError
from .images import ImageSet, PixelOperator, apply_pixel_op
from .linalg import eigvals_real, jacobi_eigh, jacobi_svd
from .models import Encoder, encode, normalize_tokens

KINDS = ("orthogonal-self-conjugate", "orthogonal", "linear")
DEFAULT_RIDGE = 1e-6


@dataclass
class TokenPairSet:
    X: np.ndarray
    Y: np.ndarray
    normalized: bool
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape != self.Y.shape or self.X.ndim != 2:
            raise ShapeError(f"token pairs need matching n×c arrays, got {self.X.shape}, {self.Y.shape}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def c(self) -> int:
        return self.X.shape[1]


@dataclass
class LatentOperator:
    matrix: np.ndarray
    kind: str
    residual: float | None = None
    source: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"operator matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NumericalError("operator has non-finite entries")

    @property
    def c(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()

    def invariant_errors(self) -> dict:
        m = self.matrix
        eye = np.eye(self.c)
        return {
            "orthogonality": float(np.linalg.norm(m.T @ m - eye)),
            "symmetry": float(np.linalg.norm(m - m.T)),
            "involution": float(np.linalg.norm(m @ m - eye)),
        }


def build_token_pairs(enc: Encoder, op: PixelOperator, images: ImageSet, normalize: bool = True,
                      reverse: bool = False) -> TokenPairSet:
    """Pool per-position token pairs ``(E(i)[u,v], E(A(i))[u,v])`` over all images.

    ``reverse`` swaps the roles (source = edited image), which is how the
    colourisation operator (grayscale -> colour) is fitted.
    """
    images.require("operator-fit")
    src = encode(enc, images.pixels)
    dst = encode(enc, apply_pixel_op(op, images.pixels))
    if reverse:
        src, dst = dst, src
    if normalize:
        src, dst = normalize_tokens(src), normalize_tokens(dst)
    c = src.shape[-1]
    prov = {"split": images.split, "pixel_op": op.tag(), "reverse": reverse,
            "n_images": len(images)}
    return TokenPairSet(src.reshape(-1, c), dst.reshape(-1, c), normalize, prov)


def _residual(pairs: TokenPairSet, m: np.ndarray) -> float:
    return float(np.linalg.norm(pairs.X @ m.T - pairs.Y))


def fit_orthogonal(pairs: TokenPairSet) -> LatentOperator:
    """Orthogonal Procrustes: ``M = U V^T`` from the SVD of ``Y^T X``."""
    if pairs.n < pairs.c:
        warnings.warn(f"only {pairs.n} token pairs for dimension {pairs.c}; fit is underdetermined")
    u, _, vt = jacobi_svd(pairs.Y.T @ pairs.X)
    m = u @ vt
    return LatentOperator(m, "orthogonal", _residual(pairs, m), pairs.provenance.get("pixel_op", ""),
                          dict(pairs.provenance))


def project_self_conjugate(op: LatentOperator, pairs: TokenPairSet | None = None) -> LatentOperator:
    """Nearest symmetric orthogonal matrix (Frobenius): the matrix sign of ``(M + M^T)/2``.

    Zero eigenvalues of the symmetric part are sent to +1.
    """
    s = 0.5 * (op.matrix + op.matrix.T)
    w, v = jacobi_eigh(s)
    sign = np.where(w >= 0.0, 1.0, -1.0)
    o = (v * sign) @ v.T
    o = 0.5 * (o + o.T)
    residual = _residual(pairs, o) if pairs is not None else None
    return LatentOperator(o, "orthogonal-self-conjugate", residual, op.source, dict(op.provenance))


def fit_linear(pairs: TokenPairSet, ridge: float = DEFAULT_RIDGE) -> LatentOperator:
    """Ridge least squares: ``M = Y^T X (X^T X + ridge I)^{-1}``."""
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    g = pairs.X.T @ pairs.X + ridge * np.eye(pairs.c)
    if ridge == 0 and np.linalg.matrix_rank(g) < pairs.c:
        raise NumericalError("singular normal equations; use a positive ridge")
    try:
        mt = np.linalg.solve(g, pairs.X.T @ pairs.Y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"linear fit failed: {exc}") from exc
    m = mt.T
    return LatentOperator(m, "linear", _residual(pairs, m), pairs.provenance.get("pixel_op", ""),
                          dict(pairs.provenance))


def apply_operator(op: LatentOperator, f: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Multiply every token (last axis) by the operator, optionally re-normalising."""
    if f.shape[-1] != op.c:
        raise ShapeError(f"operator dim {op.c} does not match feature dim {f.shape[-1]}")
    out = f @ op.matrix.T
    if renormalize:
        out = normalize_tokens(out)
    return out


def operator_power(op: LatentOperator, n: int) -> LatentOperator:
    """``M^n`` by repeated squaring; exact ``I``/``M`` for self-conjugate involutions."""
    if n < 1:
        raise ValueError("power must be >= 1")
    if op.kind == "orthogonal-self-conjugate":
        m = np.eye(op.c) if n % 2 == 0 else op.matrix.copy()
        return LatentOperator(m, op.kind, None, op.source, dict(op.provenance, power=n))
    result = None
    base = op.matrix.copy()
    k = n
    with np.errstate(over="ignore", invalid="ignore"):
        while k:
            if k & 1:
                result = base.copy() if result is None else result @ base
            k >>= 1
            if k:
                base = base @ base
            if not np.all(np.isfinite(base)) or (result is not None and not np.all(np.isfinite(result))):
                raise NumericalError(f"operator power {n} overflowed")
    return LatentOperator(result, "linear", None, op.source, dict(op.provenance, power=n))


@dataclass
class EigenSpectrum:
    eigenvalues: np.ndarray
    operator_hash: str
    iterations: int
    converged: bool


def eig_spectrum(op: LatentOperator) -> EigenSpectrum:
    res = eigvals_real(op.matrix)
    return EigenSpectrum(res.eigenvalues, op.digest(), res.iterations, res.converged)


def spectrum_check(spectrum: EigenSpectrum, kind: str, tol: float) -> dict:
    """Summarise how well a spectrum matches the pattern expected for ``kind``.

    ``swap``: eigenvalues should sit on the real axis at +1 or -1.
    ``suppression``: every |λ| <= 1 + tol, with at least one λ near 1.
    """
    ev = np.asarray(spectrum.eigenvalues, dtype=complex)
    report = {"kind": kind, "tol": tol, "n": len(ev), "converged": spectrum.converged,
              "max_abs_imag": float(np.max(np.abs(ev.imag))) if len(ev) else 0.0}
    if kind == "swap":
        plus = np.abs(ev - 1.0) <= tol
        minus = np.abs(ev + 1.0) <= tol
        frac = float(np.mean(plus | minus)) if len(ev) else 1.0
        report.update(n_near_plus_one=int(plus.sum()), n_near_minus_one=int(minus.sum()),
                      fraction_clustered=frac, passed=bool(frac == 1.0))
    elif kind == "suppression":
        mag = np.abs(ev)
        near = np.abs(ev - 1.0) <= tol
        inside = (mag < 1.0) & ~near
        report.update(max_abs=float(mag.max()) if len(ev) else 0.0, n_near_one=int(near.sum()),
                      n_inside=int(inside.sum()),
                      n_outside=int((mag > 1.0 + tol).sum()),
                      passed=bool(np.all(mag <= 1.0 + tol) and near.any()))
    else:
        raise ValueError(f"unknown spectrum check {kind!r}")
    return report
