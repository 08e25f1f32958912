"""Dense linear algebra that works for float arrays and ``mpf`` object arrays.

Float arrays go through LAPACK (numpy/scipy). Object arrays, produced by the
extended-precision path, use short pure-Python loops; matrices here are at
most a few dozen rows so the cubic cost is irrelevant.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefiniteError


def is_mp(a: np.ndarray) -> bool:
    return isinstance(a, np.ndarray) and a.dtype == object


def to_mp(a, ctx) -> np.ndarray:
    """Exact conversion of a float array to an object array of ``ctx.mpf``."""
    a = np.asarray(a)
    out = np.empty(a.shape, dtype=object)
    flat = a.ravel()
    o = out.ravel()
    for i, v in enumerate(flat):
        o[i] = ctx.mpf(v)
    return out


def to_float(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == object:
        return np.vectorize(float, otypes=[float])(a) if a.size else np.zeros(a.shape)
    return a.astype(float, copy=False)


def eye(n: int, ctx=None) -> np.ndarray:
    if ctx is None:
        return np.eye(n)
    out = np.empty((n, n), dtype=object)
    out[...] = ctx.zero
    for i in range(n):
        out[i, i] = ctx.one
    return out


def _cholesky_loop(A, ctx=None):
    n = A.shape[0]
    if ctx is None:
        L = np.zeros((n, n))
        sqrt = math.sqrt
    else:
        L = eye(n, ctx) * ctx.zero
        sqrt = ctx.sqrt
    for j in range(n):
        s = A[j, j] - (L[j, :j] @ L[j, :j] if j else 0)
        if not s > 0:
            return L, j, s
        L[j, j] = sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j] - (L[i, :j] @ L[j, :j] if j else 0)
            L[i, j] = t / L[j, j]
    return L, None, None


def cholesky(A: np.ndarray, ctx=None, theta=None) -> np.ndarray:
    """Lower Cholesky factor; raises `NotPositiveDefiniteError` (no jitter)."""
    if A.shape[0] == 0:
        return A.copy()
    if ctx is None and not is_mp(A):
        try:
            return np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            _, idx, piv = _cholesky_loop(np.asarray(A, dtype=float))
            raise NotPositiveDefiniteError(
                f"Cholesky failed at index {idx} (pivot {piv!r}, theta={theta!r})",
                theta=theta, pivot=None if piv is None else float(piv), index=idx,
            ) from None
    L, idx, piv = _cholesky_loop(A, ctx)
    if idx is not None:
        raise NotPositiveDefiniteError(
            f"Cholesky failed at index {idx} (pivot {float(piv):.3e}, theta={theta!r})",
            theta=theta, pivot=float(piv), index=idx,
        )
    return L


def solve_lower(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L X = B`` for lower triangular ``L``."""
    if not is_mp(L):
        return scipy.linalg.solve_triangular(L, B, lower=True)
    B = np.array(B, dtype=object, copy=True)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    n = L.shape[0]
    X = np.empty_like(B)
    for i in range(n):
        acc = B[i, :]
        if i:
            acc = acc - L[i, :i] @ X[:i, :]
        X[i, :] = acc / L[i, i]
    return X[:, 0] if vec else X


def solve_upper_t(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L^T X = B`` for lower triangular ``L``."""
    if not is_mp(L):
        return scipy.linalg.solve_triangular(L, B, lower=True, trans="T")
    B = np.array(B, dtype=object, copy=True)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    n = L.shape[0]
    X = np.empty_like(B)
    for i in range(n - 1, -1, -1):
        acc = B[i, :]
        if i < n - 1:
            acc = acc - L[i + 1:, i] @ X[i + 1:, :]
        X[i, :] = acc / L[i, i]
    return X[:, 0] if vec else X


def cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return solve_upper_t(L, solve_lower(L, B))


def logdet_chol(L: np.ndarray, ctx=None):
    """``log det(L L^T)``."""
    d = np.diagonal(L)
    if ctx is None and not is_mp(L):
        return 2.0 * float(np.sum(np.log(d)))
    return 2 * ctx.fsum(ctx.log(v) for v in d)


def inverse_from_chol(L: np.ndarray, ctx=None) -> np.ndarray:
    return cho_solve(L, eye(L.shape[0], ctx if is_mp(L) else None))


def eigvalsh(A: np.ndarray, ctx=None) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix, as floats."""
    if not is_mp(A):
        return np.linalg.eigvalsh(A)
    ev = ctx.eigsy(ctx.matrix(A.tolist()), eigvals_only=True)
    return np.sort(np.array([float(v) for v in ev]))


def eigh(A: np.ndarray, ctx=None):
    """Ascending eigenpairs. Object input returns object eigenvectors."""
    if not is_mp(A):
        return np.linalg.eigh(A)
    E, Q = ctx.eigsy(ctx.matrix(A.tolist()))
    vals = [E[i] for i in range(len(E))]
    order = sorted(range(len(vals)), key=lambda i: vals[i])
    V = np.empty(A.shape, dtype=object)
    for jj, j in enumerate(order):
        for i in range(A.shape[0]):
            V[i, jj] = Q[i, j]
    return np.array([vals[j] for j in order], dtype=object), V


def frob2(A: np.ndarray):
    """Squared Frobenius norm (exact type preserved)."""
    if A.size == 0:
        return 0.0
    return (A * A).sum()


def trace(A: np.ndarray):
    return np.trace(A)


def orthonormal_complement_mp(H: np.ndarray, W0: np.ndarray, ctx) -> np.ndarray:
    """Re-orthonormalise float ``W0`` against ``H`` in extended precision.

    Two passes of modified Gram-Schmidt on ``[H | W0]``; the first ``p``
    vectors only serve to project out ``span(H)``.
    """
    n, p = H.shape
    cols = [to_mp(H[:, j], ctx) for j in range(p)] + [to_mp(W0[:, j], ctx) for j in range(W0.shape[1])]
    basis = []
    for v in cols:
        for _ in range(2):
            for b in basis:
                v = v - (b @ v) * b
        nrm = ctx.sqrt(v @ v)
        basis.append(v / nrm)
    out = np.empty((n, W0.shape[1]), dtype=object)
    for j in range(W0.shape[1]):
        out[:, j] = basis[p + j]
    return out
