"""Linear algebra in the M-inner product.

An SPD matrix ``M`` defines the inner product ``<u, v>_M = u^T M v`` in which
the preconditioned saddle dynamics live.  This module holds the metric handle
(:class:`SpdMetric` and its dense/diagonal/identity realizations), M-orthonormal
frames, dense generalized symmetric eigensolves ``H u = lambda M u`` and the
Morse index (inertia) computation.
"""
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import (
    ContractViolation,
    DefinitenessError,
    DegenerateSpectrumWarning,
    RankDeficiencyError,
)

#: largest dimension handled by dense generalized eigensolves
DENSE_EIG_LIMIT = 4000
#: generalized eigenvalues closer than this to zero flag a degenerate point
DEGENERACY_TOL = 1e-10


class SpdMetric:
    """Handle for a symmetric positive definite operator ``M``.

    Subclasses implement :meth:`apply` (``v -> M v``) and :meth:`solve`
    (``g -> M^{-1} g``).  Both accept a vector of shape ``(n,)`` or a block of
    columns of shape ``(n, k)``.  Instances are treated as immutable.
    """

    kind = "generic"

    def __init__(self, n):
        if n < 1:
            raise ContractViolation(f"metric dimension must be positive, got {n}")
        self.n = int(n)
        self.info = {}

    def apply(self, v):
        raise NotImplementedError

    def solve(self, g):
        raise NotImplementedError

    def to_dense(self):
        """Materialize ``M`` as a dense array (meant for small ``n``)."""
        return self.apply(np.eye(self.n))

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ContractViolation(
                f"dimension mismatch: metric has n={self.n}, got array of shape {v.shape}"
            )
        return v

    def probe(self, rng=None, n_probes=3):
        """Check symmetry, positivity and the apply/solve round trip on random vectors.

        Raises :class:`DefinitenessError` on failure and returns ``self``
        otherwise, so it can be chained after construction.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(n_probes):
            u = rng.standard_normal(self.n)
            v = rng.standard_normal(self.n)
            Mu, Mv = self.apply(u), self.apply(v)
            a, b = u @ Mv, v @ Mu
            scale = np.linalg.norm(u) * np.linalg.norm(Mv) + np.linalg.norm(v) * np.linalg.norm(Mu)
            if abs(a - b) > 1e-12 * scale:
                raise DefinitenessError(f"{self.kind} metric is not symmetric: {a} vs {b}")
            if not v @ Mv > 0:
                raise DefinitenessError(f"{self.kind} metric is not positive definite")
            back = self.apply(self.solve(v))
            if np.linalg.norm(back - v) > 1e-10 * np.linalg.norm(v):
                raise DefinitenessError(f"{self.kind} metric: apply(solve(g)) != g")
        return self

    def __repr__(self):
        return f"<{type(self).__name__} kind={self.kind!r} n={self.n}>"


class IdentityMetric(SpdMetric):
    """The Euclidean metric ``M = I``; p-HiSD reduces to standard HiSD."""

    kind = "identity"

    def apply(self, v):
        return self._check(v).copy()

    def solve(self, g):
        return self._check(g).copy()

    def to_dense(self):
        return np.eye(self.n)


class DiagonalMetric(SpdMetric):
    """``M = diag(d)`` with ``d > 0``."""

    kind = "diagonal"

    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        super().__init__(diag.size)
        if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
            raise DefinitenessError("diagonal metric needs strictly positive finite entries")
        self.diag = diag

    def apply(self, v):
        v = self._check(v)
        return v * (self.diag if v.ndim == 1 else self.diag[:, None])

    def solve(self, g):
        g = self._check(g)
        return g / (self.diag if g.ndim == 1 else self.diag[:, None])

    def to_dense(self):
        return np.diag(self.diag)


class DenseMetric(SpdMetric):
    """A dense SPD matrix with a cached Cholesky factor."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ContractViolation("dense metric must be a square matrix")
        super().__init__(matrix.shape[0])
        if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
            raise ContractViolation("dense metric must be symmetric")
        self.matrix = 0.5 * (matrix + matrix.T)
        try:
            self._factor = sla.cho_factor(self.matrix, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DefinitenessError(f"Cholesky factorization failed: {exc}") from None

    def apply(self, v):
        return self.matrix @ self._check(v)

    def solve(self, g):
        return sla.cho_solve(self._factor, self._check(g))

    def to_dense(self):
        return self.matrix.copy()


def as_metric(M, n=None):
    """Coerce ``None``, an array or an :class:`SpdMetric` into a metric handle."""
    if isinstance(M, SpdMetric):
        if n is not None and M.n != n:
            raise ContractViolation(f"dimension mismatch: metric n={M.n}, expected {n}")
        return M
    if M is None:
        if n is None:
            raise ContractViolation("identity metric needs a dimension")
        return IdentityMetric(n)
    if sp.issparse(M):
        M = M.toarray()
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return DiagonalMetric(M)
    return DenseMetric(M)


def m_inner(u, v, M):
    """Return ``u^T M v``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ContractViolation(f"shape mismatch {u.shape} vs {v.shape}")
    M = as_metric(M, u.shape[0])
    return float(u @ M.apply(v))


def m_norm(u, M):
    """Return ``sqrt(u^T M u)``."""
    return float(np.sqrt(m_inner(u, u, M)))


@dataclass(frozen=True)
class Frame:
    """An ``n x k`` block of columns, M-orthonormal under ``metric``."""

    vectors: np.ndarray
    metric: SpdMetric

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def k(self):
        return self.vectors.shape[1]

    def gram(self):
        """Return ``V^T M V``."""
        return self.vectors.T @ self.metric.apply(self.vectors)

    def orthonormality_error(self):
        """Largest entry of ``|V^T M V - I|``."""
        return float(np.abs(self.gram() - np.eye(self.k)).max()) if self.k else 0.0


def m_orthonormalize(V, M, tol=1e-12, error=RankDeficiencyError):
    """M-orthonormalize the columns of ``V`` by modified Gram-Schmidt.

    Columns are processed in order with one reorthogonalization pass, so the
    first column keeps its direction.  A column whose M-norm after projection
    drops below ``tol`` times its original M-norm raises ``error``.

    Returns:
        A :class:`Frame` with ``V^T M V = I``.
    """
    if isinstance(V, Frame):
        V = V.vectors
    V = np.array(V, dtype=float, copy=True)
    if V.ndim == 1:
        V = V[:, None]
    n, k = V.shape
    M = as_metric(M, n)
    if k > n:
        raise ContractViolation(f"cannot have k={k} orthonormal columns in dimension {n}")
    if not np.all(np.isfinite(V)):
        raise ContractViolation("frame has non-finite entries")

    Q = np.empty_like(V)
    MQ = np.empty_like(V)
    for i in range(k):
        w = V[:, i]
        norm0 = np.sqrt(max(w @ M.apply(w), 0.0))
        for _ in range(2):
            for j in range(i):
                w -= Q[:, j] * (MQ[:, j] @ w)
        Mw = M.apply(w)
        norm = np.sqrt(max(w @ Mw, 0.0))
        if norm <= tol * norm0 or norm == 0.0:
            raise error(i, norm)
        Q[:, i] = w / norm
        MQ[:, i] = Mw / norm
    return Frame(Q, M)


def _fix_signs(U):
    """Flip columns so that the first non-negligible entry is positive."""
    for i in range(U.shape[1]):
        col = U[:, i]
        big = np.abs(col) > 1e-12 * np.abs(col).max()
        if col[np.argmax(big)] < 0:
            U[:, i] = -col
    return U


def _dense_symmetric(H, name="H"):
    if sp.issparse(H):
        H = H.toarray()
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ContractViolation(f"{name} must be a square matrix")
    scale = max(1.0, np.abs(H).max())
    if np.abs(H - H.T).max() > 1e-10 * scale:
        raise ContractViolation(f"{name} is not symmetric")
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class GenEigenDecomposition:
    """Ascending generalized eigenvalues with M-orthonormal eigenvectors."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def residuals(self, H, M):
        """Per-pair residual ``max|H u_i - lambda_i M u_i|``."""
        M = as_metric(M, self.eigenvectors.shape[0])
        U = self.eigenvectors
        R = H @ U - M.apply(U) * self.eigenvalues
        return np.abs(R).max(axis=0)


def generalized_eigendecomposition(H, M=None, subset=None):
    """Solve ``H u = lambda M u`` densely by Cholesky reduction.

    ``M = L L^T`` turns the pencil into the standard symmetric problem for
    ``L^{-1} H L^{-T}``; eigenvectors map back through ``u = L^{-T} w``.

    Args:
        H: symmetric matrix (dense or sparse), ``n <= DENSE_EIG_LIMIT``.
        M: metric handle, SPD array, or ``None`` for the identity.
        subset: optional ``(lo, hi)`` inclusive index range of eigenpairs.
    """
    H = _dense_symmetric(H)
    n = H.shape[0]
    if n > DENSE_EIG_LIMIT:
        raise ContractViolation(f"dense generalized eigensolve limited to n <= {DENSE_EIG_LIMIT}")
    metric = as_metric(M, n)
    if isinstance(metric, IdentityMetric):
        w, U = sla.eigh(H, subset_by_index=subset)
    else:
        Mdense = _dense_symmetric(metric.to_dense(), "M")
        try:
            L = sla.cholesky(Mdense, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DefinitenessError(f"metric is not positive definite: {exc}") from None
        A = sla.solve_triangular(L, H, lower=True)
        A = sla.solve_triangular(L, A.T, lower=True)
        A = 0.5 * (A + A.T)
        w, Z = sla.eigh(A, subset_by_index=subset)
        U = sla.solve_triangular(L.T, Z, lower=False)
    return GenEigenDecomposition(w, _fix_signs(U))


def smallest_generalized_eigenpairs(H, M, k, rng=None):
    """Return the ``k`` smallest generalized eigenpairs of ``(H, M)``.

    Dense reduction up to ``DENSE_EIG_LIMIT``; above it a block
    preconditioned eigensolver (LOBPCG) with ``M^{-1}`` as preconditioner.
    Only used to initialize frames, so modest accuracy is acceptable there.
    """
    n = H.shape[0]
    metric = as_metric(M, n)
    if n <= DENSE_EIG_LIMIT:
        return generalized_eigendecomposition(H, metric, subset=(0, k - 1))
    from scipy.sparse.linalg import LinearOperator, lobpcg

    rng = np.random.default_rng(0) if rng is None else rng
    B = LinearOperator((n, n), matvec=metric.apply, matmat=metric.apply, dtype=float)
    P = LinearOperator((n, n), matvec=metric.solve, matmat=metric.solve, dtype=float)
    X = rng.standard_normal((n, k + 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w, U = lobpcg(H, X, B=B, M=P, largest=False, tol=1e-9, maxiter=1000)
    order = np.argsort(w)[:k]
    U = m_orthonormalize(U[:, order], metric).vectors
    return GenEigenDecomposition(np.asarray(w)[order], _fix_signs(U))


def _lower_bandwidth(A):
    coo = A.tocoo()
    return int(np.max(coo.row - coo.col, initial=0))


def _sparse_eigvals(H, count):
    """Smallest ``count`` eigenvalues of a symmetric sparse matrix.

    Uses the banded LAPACK solver when the bandwidth is small, otherwise a
    dense solve.
    """
    n = H.shape[0]
    A = sp.tril(sp.csr_matrix(H)).tocoo()
    bw = _lower_bandwidth(A)
    if bw <= 200:
        ab = np.zeros((bw + 1, n))
        ab[A.row - A.col, A.col] = A.data
        return sla.eigvals_banded(ab, lower=True, select="i", select_range=(0, count - 1))
    return np.linalg.eigvalsh(H.toarray())[:count]


def morse_index(H, M=None, tol=DEGENERACY_TOL):
    """Number of negative generalized eigenvalues of ``(H, M)``.

    By Sylvester's law of inertia this equals the number of negative
    eigenvalues of ``H`` itself.  For ``n <= DENSE_EIG_LIMIT`` the generalized
    spectrum is computed densely; larger sparse matrices use the inertia of
    ``H`` directly.  A :class:`DegenerateSpectrumWarning` is emitted when an
    eigenvalue lies within ``tol`` of zero.
    """
    n = H.shape[0]
    if n <= DENSE_EIG_LIMIT:
        metric = as_metric(M, n)
        Hd = _dense_symmetric(H)
        if isinstance(metric, IdentityMetric):
            lam = sla.eigvalsh(Hd)
        else:
            lam = generalized_eigendecomposition(Hd, metric).eigenvalues
    elif sp.issparse(H):
        lam = _sparse_inertia_spectrum(H)
    else:
        lam = np.linalg.eigvalsh(_dense_symmetric(H))
    if np.any(np.abs(lam) <= tol):
        warnings.warn(
            f"eigenvalue {lam[np.argmin(np.abs(lam))]:.3e} within {tol:g} of zero; "
            "critical point is degenerate",
            DegenerateSpectrumWarning,
            stacklevel=2,
        )
    return int(np.count_nonzero(lam < 0))


def _sparse_inertia_spectrum(H, start=8):
    """Enough of the bottom of the spectrum of sparse ``H`` to see every negative eigenvalue."""
    n = H.shape[0]
    count = min(start, n)
    while True:
        lam = _sparse_eigvals(H, count)
        if lam[-1] > 0 or count == n:
            return lam
        count = min(2 * count, n)
