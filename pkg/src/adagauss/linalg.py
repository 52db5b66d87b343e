"""Dense linear algebra on covariance matrices.

Everything here is a pure function of numpy arrays. Covariances use the
unbiased (n - 1) divisor. Explicit inverses are never formed except by
:func:`inverse_spd`, which exists for the inverse-norm diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    AllZero,
    EmptyInput,
    NoConvergence,
    NotPositiveDefinite,
    NotSymmetric,
    ShapeMismatch,
    TooFewSamples,
)

SYMMETRY_TOL = 1e-9
PIVOT_FLOOR = 1e-12
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
LOG_2PI = float(np.log(2.0 * np.pi))


def seeded_rng(seed, *stream):
    """Return a PCG64 generator for ``seed``, optionally on a derived sub-stream.

    ``seeded_rng(s, k)`` and ``seeded_rng(s, j)`` are statistically independent
    for ``k != j``; the same arguments always reproduce the same stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve_lower(self, b):
        """Solve ``L y = b`` for y."""
        return solve_triangular(self.lower, b, lower=True, check_finite=False)

    def solve(self, b):
        """Solve ``L L^T x = b`` for x."""
        y = self.solve_lower(b)
        return solve_triangular(self.lower.T, y, lower=False, check_finite=False)

    def reconstruct(self):
        return self.lower @ self.lower.T


def _as_square(a, what="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{what} must be square, got shape {a.shape}")
    return a


def check_symmetric(a, tol=SYMMETRY_TOL):
    a = _as_square(a)
    if not np.all(np.isfinite(a)):
        raise NotSymmetric("matrix has non-finite entries")
    err = np.max(np.abs(a - a.T)) if a.size else 0.0
    if err > tol:
        raise NotSymmetric(f"matrix is not symmetric (max |a - a^T| = {err:.3g})")
    return a


def cholesky(a) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix as ``L L^T``.

    Only the lower triangle is read. A pivot ``L_jj^2`` at or below
    ``PIVOT_FLOOR`` raises :class:`NotPositiveDefinite`; no regularization
    is ever applied here.
    """
    a = check_symmetric(a)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not positive-definite ({exc})") from None
    pivots = np.diag(lower) ** 2
    if pivots.size and (not np.all(np.isfinite(pivots)) or pivots.min() <= PIVOT_FLOOR):
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"pivot {k} = {pivots[k]:.3g} is at or below {PIVOT_FLOOR:g}")
    return CholeskyFactor(lower)


def cholesky_backward(factor: CholeskyFactor, grad_lower) -> np.ndarray:
    """Pull a gradient on the Cholesky factor back to the factored matrix.

    Returns the symmetric gradient with respect to ``A = L L^T``, i.e. the
    gradient of ``loss(chol((A + A^T) / 2))``. Uses
    ``S = L^{-T} Phi(L^T dL) L^{-1}`` with ``Phi`` taking the lower triangle
    and halving the diagonal, then ``dA = (S + S^T) / 2``.
    """
    lower = factor.lower
    grad_lower = np.asarray(grad_lower, dtype=float)
    if grad_lower.shape != lower.shape:
        raise ShapeMismatch(f"gradient shape {grad_lower.shape} != factor shape {lower.shape}")
    phi = np.tril(lower.T @ grad_lower)
    phi[np.diag_indices_from(phi)] *= 0.5
    # S = L^{-T} phi L^{-1}
    right = solve_triangular(lower.T, phi.T, lower=False, check_finite=False).T
    s = solve_triangular(lower.T, right, lower=False, check_finite=False)
    return 0.5 * (s + s.T)


def covariance(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D sample matrix, got shape {rows.shape}")
    n = rows.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples for a covariance, got {n}")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    return 0.5 * (cov + cov.T)


def estimate_gaussian(rows):
    """Sample mean and unbiased covariance of an ``n x S`` sample matrix."""
    rows = np.asarray(rows, dtype=float)
    cov = covariance(rows)
    return rows.mean(axis=0), cov


def sample_gaussian(mean, cov, n, rng) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    factor = cholesky(cov)
    if mean.shape != (factor.dim,):
        raise ShapeMismatch(f"mean shape {mean.shape} does not match covariance dim {factor.dim}")
    z = rng.standard_normal((int(n), factor.dim))
    return mean + z @ factor.lower.T


def mahalanobis_sq(x, mean, factor: CholeskyFactor):
    """Squared Mahalanobis distance; ``x`` may be one vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape[-1] != factor.dim or mean.shape != (factor.dim,):
        raise ShapeMismatch(
            f"x {x.shape} / mean {mean.shape} incompatible with dim {factor.dim}"
        )
    diff = x - mean
    y = factor.solve_lower(diff.T)
    d2 = np.sum(y * y, axis=0)
    return float(d2) if x.ndim == 1 else d2


def log_gaussian_pdf(x, mean, factor: CholeskyFactor):
    d2 = mahalanobis_sq(x, mean, factor)
    return -0.5 * d2 - 0.5 * factor.logdet() - 0.5 * factor.dim * LOG_2PI


def sym_kl(g1, g2) -> float:
    """``KL(g1 || g2) + KL(g2 || g1)`` for Gaussians given as (mean, cov) pairs."""
    mu1, cov1 = (np.asarray(v, dtype=float) for v in g1)
    mu2, cov2 = (np.asarray(v, dtype=float) for v in g2)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ShapeMismatch("Gaussians have different dimensions")
    f1, f2 = cholesky(cov1), cholesky(cov2)
    k = mu1.shape[0]
    delta = mu1 - mu2
    tr12 = np.trace(f2.solve(cov1))
    tr21 = np.trace(f1.solve(cov2))
    quad = delta @ f1.solve(delta) + delta @ f2.solve(delta)
    return max(0.0, float(0.5 * (tr12 + tr21 + quad) - k))


def inverse_spd(a) -> np.ndarray:
    factor = cholesky(a)
    return factor.solve(np.eye(factor.dim))


def eig_sym(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||a||_F)``.
    """
    a = check_symmetric(a).copy()
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a[off_mask]))
        if off < threshold:
            return np.sort(np.diag(a))[::-1].copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    raise NoConvergence(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def effective_dim(eigenvalues, fraction=0.95) -> int:
    """Smallest k such that the top-k eigenvalues hold ``fraction`` of the total."""
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.size == 0:
        raise EmptyInput("no eigenvalues given")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ev = np.clip(np.sort(ev)[::-1], 0.0, None)
    total = ev.sum()
    if total <= 0.0:
        raise AllZero("all eigenvalues are zero")
    cumulative = np.cumsum(ev)
    target = fraction * total * (1.0 - 1e-12)
    return int(np.searchsorted(cumulative, target) + 1)


def numeric_rank(a, rel_tol=1e-6) -> int:
    ev = eig_sym(a)
    if ev.size == 0 or ev[0] <= 0.0:
        return 0
    return int(np.sum(ev > rel_tol * ev[0]))
