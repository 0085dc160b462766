"""Matérn field on a regular lattice.

The field solves the SPDE ``(kappa^2 - Laplacian)(tau x) = W`` (smoothness
nu = 1). On a lattice with spacing ``h`` the precision is

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)

with lumped mass ``C = h^2 I`` and ``G`` the 5-point negative Laplacian with
natural (Neumann) boundaries. ``kappa = sqrt(8) / rho`` so that the
correlation is about 0.1 at distance ``rho``, and
``tau^2 = 1 / (4 pi kappa^2 sigma^2)`` gives marginal variance ``sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InternalError, NumericError
from .prepare import LatticeSpec

#: Matrices up to this order are factorized densely (LAPACK is faster there).
DENSE_LIMIT = 2000


@dataclass(frozen=True)
class FieldHyper:
    log_sigma: float
    log_rho: float

    def __post_init__(self):
        if not (math.isfinite(self.log_sigma) and math.isfinite(self.log_rho)):
            raise NumericError("field hyperparameters must be finite")

    @property
    def kappa(self) -> float:
        return math.sqrt(8.0) / math.exp(self.log_rho)

    @property
    def tau2(self) -> float:
        return 1.0 / (4.0 * math.pi * self.kappa ** 2 * math.exp(2.0 * self.log_sigma))


def _path_laplacian(n: int) -> sp.csr_matrix:
    if n == 1:
        return sp.csr_matrix((1, 1))
    diag = np.full(n, 2.0)
    diag[[0, -1]] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def stiffness(lattice: LatticeSpec) -> sp.csr_matrix:
    """5-point negative Laplacian with natural boundary conditions."""
    gx = _path_laplacian(lattice.ncols)
    gy = _path_laplacian(lattice.nrows)
    G = sp.kron(sp.identity(lattice.nrows), gx) + sp.kron(gy, sp.identity(lattice.ncols))
    G = G.tocsr()
    G.eliminate_zeros()
    return G


@dataclass(frozen=True)
class SpdeStructure:
    """Hyperparameter-free pieces of Q; Q is a weighted sum of these."""

    mass: sp.csr_matrix
    stiff: sp.csr_matrix
    biharm: sp.csr_matrix

    @classmethod
    def build(cls, lattice: LatticeSpec) -> "SpdeStructure":
        h2 = lattice.spacing ** 2
        n = lattice.n_nodes
        G = stiffness(lattice)
        C = sp.identity(n, format="csr") * h2
        GCG = (G @ G).tocsr() / h2
        return cls(C, G, GCG)

    def precision(self, hyper: FieldHyper) -> sp.csr_matrix:
        k2 = hyper.kappa ** 2
        Q = hyper.tau2 * (k2 * k2 * self.mass + 2.0 * k2 * self.stiff + self.biharm)
        Q = Q.tocsr()
        Q.eliminate_zeros()
        if not np.all(np.isfinite(Q.data)):
            raise NumericError("precision matrix has non-finite entries")
        return Q


def precision_matrix(lattice: LatticeSpec, hyper: FieldHyper) -> sp.csr_matrix:
    """Sparse SPDE precision of the field at the lattice nodes."""
    return SpdeStructure.build(lattice).precision(hyper)


def projection_matrix(lattice: LatticeSpec, x, y, outside: str = "error") -> sp.csr_matrix:
    """Bilinear interpolation weights from lattice nodes to points.

    Each row has at most four non-zeros and sums to one. Points outside the
    lattice hull raise :class:`InternalError`, or get an all-zero row when
    ``outside="zero"``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = lattice.spacing
    fx = (x - lattice.x0) / h
    fy = (y - lattice.y0) / h
    tol = 1e-9
    ok = (fx >= -tol) & (fx <= lattice.ncols - 1 + tol) & (fy >= -tol) & (fy <= lattice.nrows - 1 + tol)
    if not ok.all() and outside != "zero":
        raise InternalError(f"{int((~ok).sum())} point(s) fall outside the lattice hull")
    fx = np.clip(fx, 0.0, lattice.ncols - 1)
    fy = np.clip(fy, 0.0, lattice.nrows - 1)
    c0 = np.minimum(np.floor(fx).astype(np.int64), max(lattice.ncols - 2, 0))
    r0 = np.minimum(np.floor(fy).astype(np.int64), max(lattice.nrows - 2, 0))
    tx = fx - c0
    ty = fy - r0
    c1 = np.minimum(c0 + 1, lattice.ncols - 1)
    r1 = np.minimum(r0 + 1, lattice.nrows - 1)

    rows = np.repeat(np.arange(x.size), 4)
    cols = np.column_stack([r0 * lattice.ncols + c0, r0 * lattice.ncols + c1,
                            r1 * lattice.ncols + c0, r1 * lattice.ncols + c1]).ravel()
    vals = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty])
    vals[~ok] = 0.0
    A = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(x.size, lattice.n_nodes))
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


class SparseCholesky:
    """Cholesky-type factorization of a symmetric positive definite matrix.

    Small matrices go through dense LAPACK; larger ones through SuperLU with
    a symmetric fill-reducing ordering and no pivoting, which yields
    ``P A P^T = L D L^T``. Either way the object offers ``logdet``, ``solve``
    and ``sample`` (draws from N(0, A^-1)).

    Raises:
        NumericError: the matrix is not positive definite.
    """

    def __init__(self, A, dense_limit: int = DENSE_LIMIT):
        n = A.shape[0]
        self.n = n
        self._dense = n <= dense_limit
        if n == 0:
            self._logdet = 0.0
            return
        if self._dense:
            M = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
            try:
                self._L = sla.cholesky(M, lower=True, check_finite=True)
            except (sla.LinAlgError, ValueError) as exc:
                raise NumericError(f"matrix is not positive definite: {exc}") from None
            self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._L))))
        else:
            A = sp.csc_matrix(A)
            try:
                lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                               options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise NumericError(f"sparse factorization failed: {exc}") from None
            if not np.array_equal(lu.perm_r, lu.perm_c):
                raise NumericError("sparse factorization pivoted; matrix is not positive definite")
            d = lu.U.diagonal()
            if not np.all(d > 0) or not np.all(np.isfinite(d)):
                raise NumericError("matrix is not positive definite")
            self._lu = lu
            self._d = d
            self._logdet = float(np.sum(np.log(d)))

    def logdet(self) -> float:
        return self._logdet

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.asarray(b, dtype=float)
        if self._dense:
            return sla.cho_solve((self._L, True), b, check_finite=False)
        return self._lu.solve(np.asarray(b, dtype=float))

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals ``z`` to a draw with covariance ``A^-1``."""
        z = np.asarray(z, dtype=float)
        if self.n == 0:
            return z
        if self._dense:
            return sla.solve_triangular(self._L, z, lower=True, trans="T", check_finite=False)
        # A = P^T L D L^T P  =>  x = P^T L^-T D^-1/2 z
        L = self._lu.L.tocsr()
        t = spla.spsolve_triangular(L.T.tocsr(), z / np.sqrt(self._d), lower=False)
        return t[self._lu.perm_c]

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`sample`: the ``z`` with ``sample(z) == x``."""
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return x
        if self._dense:
            return self._L.T @ x
        t = np.empty_like(x)
        t[self._lu.perm_c] = x
        return np.sqrt(self._d) * (self._lu.L.T @ t)

    def inverse_diag(self) -> np.ndarray:
        """Diagonal of ``A^-1`` (dense path only; used for diagnostics)."""
        if self.n == 0:
            return np.empty(0)
        if not self._dense:
            raise NumericError("inverse_diag is only available for dense factors")
        Linv = sla.solve_triangular(self._L, np.eye(self.n), lower=True, check_finite=False)
        return np.sum(Linv * Linv, axis=0)
