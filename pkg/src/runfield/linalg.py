"""Sparse SPD factorization helpers shared by the field and inference code."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class FactorizationError(RuntimeError):
    """Raised when a sparse symmetric positive-definite factorization fails."""


class SparseFactor:
    """LU factorization of a sparse SPD matrix with log-determinant support.

    Wraps SuperLU with a fill-reducing ordering. For an SPD input the
    determinant is positive, so the log-determinant is the sum of
    log|diag(U)|; a non-positive or non-finite pivot signals an indefinite
    or numerically broken matrix and raises FactorizationError.
    """

    def __init__(self, Q: sp.spmatrix, ordering: str = "MMD_AT_PLUS_A"):
        Q = sp.csc_matrix(Q)
        if Q.shape[0] != Q.shape[1]:
            raise FactorizationError(f"matrix is not square: {Q.shape}")
        if not np.all(np.isfinite(Q.data)):
            raise FactorizationError("matrix contains non-finite entries")
        try:
            self._lu = splu(Q, permc_spec=ordering, diag_pivot_thresh=0.1)
        except RuntimeError as exc:  # singular matrix
            raise FactorizationError(str(exc)) from exc
        diag = self._lu.U.diagonal()
        if np.any(diag <= 0.0) and self._det_sign() < 0:
            raise FactorizationError("matrix is not positive definite")
        absdiag = np.abs(diag)
        if np.any(absdiag == 0.0) or not np.all(np.isfinite(absdiag)):
            raise FactorizationError("factorization produced zero/non-finite pivots")
        self.logdet = float(np.sum(np.log(absdiag)))
        self.shape = Q.shape

    def _det_sign(self) -> int:
        sign = np.prod(np.sign(self._lu.U.diagonal()))
        sign *= _perm_parity(self._lu.perm_r) * _perm_parity(self._lu.perm_c)
        return int(sign)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise ValueError(f"rhs length {b.shape[0]} != matrix dim {self.shape[0]}")
        return self._lu.solve(b)


def _perm_parity(perm: np.ndarray) -> int:
    """Parity (+1/-1) of a permutation, by counting cycle lengths."""
    seen = np.zeros(len(perm), dtype=bool)
    parity = 1
    for start in range(len(perm)):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            parity = -parity
    return parity


def spd_logdet(Q: sp.spmatrix) -> float:
    return SparseFactor(Q).logdet


def sample_gmrf(Q: sp.spmatrix, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Draw zero-mean samples with precision Q via dense Cholesky.

    Dense factorization keeps the sampler independent of the sparse LU
    path used for inference; intended for the moderate field sizes used
    in simulation (a few thousand nodes at most).

    Returns an array of shape (size, n), or (n,) when size == 1.
    """
    A = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"precision not SPD: {exc}") from exc
    z = rng.standard_normal((size, A.shape[0]))
    # x = L^-T z  =>  Q = L L^T gives Cov(x) = Q^-1
    from scipy.linalg import solve_triangular

    x = solve_triangular(L, z.T, trans="T", lower=True).T
    return x[0] if size == 1 else x
