"""Brute-force verifiers for the test suite.

Everything here is plain numpy and deliberately shares no code with the flow
implementations: Jacobians come from central differences, determinants from a
hand-written partial-pivoting LU, likelihoods from closed-form Gaussians.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable

import numpy as np

from .numcore import CheckReport, ContractError, NumericError

FD_STEP = 1e-5
MAX_DIM = 16


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], point, h: float = FD_STEP) -> np.ndarray:
    x = np.asarray(point, dtype=np.float64).reshape(-1)
    D = x.size
    cols = []
    for j in range(D):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(fn(xp), dtype=np.float64).reshape(-1)
        fm = np.asarray(fn(xm), dtype=np.float64).reshape(-1)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def lu_logabsdet(m: np.ndarray) -> float:
    """log|det m| by Gaussian elimination with partial pivoting."""
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    logdet = 0.0
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[piv, k]) == 0.0:
            raise NumericError("singular Jacobian")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
        logdet += math.log(abs(a[k, k]))
        a[k + 1 :, k:] -= np.outer(a[k + 1 :, k] / a[k, k], a[k, k:])
    if logdet < math.log(1e-300):
        raise NumericError("singular Jacobian (|det| < 1e-300)")
    return logdet


def brute_jacobian_logdet(fn: Callable[[np.ndarray], np.ndarray], point) -> float:
    D = np.asarray(point).size
    if D > MAX_DIM:
        raise ContractError(f"dimension {D} exceeds brute-force guard of {MAX_DIM}")
    return lu_logabsdet(fd_jacobian(fn, point))


def block_structure_check(fn, point, T: int, H: int, tol: float = 1e-7) -> CheckReport:
    """Check that dz_t/deps_s vanishes for every s > t.

    ``location`` is the 1-based (t, s) block holding the largest entry.
    """
    if T * H != np.asarray(point).size:
        raise ContractError("point size must equal T*H")
    if T * H > MAX_DIM:
        raise ContractError(f"dimension {T * H} exceeds brute-force guard of {MAX_DIM}")
    J = fd_jacobian(fn, point)
    worst, where = 0.0, None
    for t in range(T):
        for s in range(t + 1, T):
            block = np.abs(J[t * H : (t + 1) * H, s * H : (s + 1) * H]).max()
            if block > worst or where is None:
                worst, where = float(block), (t + 1, s + 1)
    return CheckReport(
        max_abs_err=worst, max_rel_err=worst, location=where, passed=worst < tol, tolerance=tol
    )


def enumerate_discrete_invertible(omega_size: int) -> tuple[int, list[tuple[int, ...]]]:
    """All invertible maps of {0..n-1} to itself, found by exhaustive search over n^n maps."""
    if not 1 <= omega_size <= 6:
        raise ContractError("omega_size must lie in 1..6")
    n = omega_size
    found = []
    for f in itertools.product(range(n), repeat=n):
        # invertible iff every element has exactly one preimage
        preimages = [[x for x in range(n) if f[x] == y] for y in range(n)]
        if all(len(p) == 1 for p in preimages):
            inverse = tuple(p[0] for p in preimages)
            assert all(inverse[f[x]] == x for x in range(n))
            assert sorted(f) == list(range(n)), "invertible map is not a permutation"
            found.append(f)
    assert len(found) == math.factorial(n)
    return len(found), found


def linear_gaussian_logml(W, b, noise_cov, x) -> float:
    """log N(x; b, W W^T + noise_cov) for z ~ N(0, I), x = W z + b + noise."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    cov = W @ W.T + np.atleast_2d(np.asarray(noise_cov, dtype=np.float64))
    if cov.shape[0] > 4:
        raise ContractError("toy model dimension must be <= 4")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("marginal covariance is not positive definite") from exc
    r = np.linalg.solve(L, x - b)
    n = x.size
    return float(-0.5 * r @ r - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))


def gaussian_mixture_logpdf(points, means, sigma: float, weights=None) -> np.ndarray:
    """Log density of an isotropic Gaussian mixture (independent of the flow code)."""
    pts = np.asarray(points, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    k, dim = means.shape
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    sq = ((pts[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    comp = -0.5 * sq / sigma**2 - dim * math.log(sigma) - 0.5 * dim * math.log(2 * math.pi)
    comp = comp + np.log(w)[None, :]
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]
