"""Constructors for SPD metrics used as preconditioners.

Spectral-type metrics rescale the Hessian eigenbasis, structure-exploiting
ones (Jacobi, block Jacobi, shifted incomplete Cholesky) work from the matrix
entries.  :func:`select_metric` encodes the size/sparsity heuristic for
choosing between them.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, DefinitenessError, ParameterError
from .metric import DenseMetric, DiagonalMetric, IdentityMetric, SpdMetric, _dense_symmetric, m_orthonormalize

# -- metric realizations -------------------------------------------------------


class EigenMetric(SpdMetric):
    """``M = Q diag(d) Q^T`` with orthogonal ``Q`` and ``d > 0``."""

    kind = "spectral"

    def __init__(self, Q, d):
        d = np.asarray(d, dtype=float)
        super().__init__(d.size)
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise DefinitenessError("spectral metric needs positive scaling factors")
        self.Q = np.asarray(Q, dtype=float)
        self.d = d

    def _scale(self, v, s):
        v = self._check(v)
        c = self.Q.T @ v
        c = c * (s if v.ndim == 1 else s[:, None])
        return self.Q @ c

    def apply(self, v):
        return self._scale(v, self.d)

    def solve(self, g):
        return self._scale(g, 1.0 / self.d)

    def to_dense(self):
        return (self.Q * self.d) @ self.Q.T


class LowRankMetric(SpdMetric):
    """``M = mu_rest I + V diag(mu - mu_rest) V^T`` for Euclidean-orthonormal ``V``.

    The inverse has the same structure,
    ``M^{-1} = I / mu_rest + V diag(1/mu - 1/mu_rest) V^T``, so apply and
    solve both cost ``O(n k)``.
    """

    kind = "subspace_inertial"

    def __init__(self, V, mu, mu_rest):
        V = np.asarray(V, dtype=float)
        mu = np.asarray(mu, dtype=float)
        super().__init__(V.shape[0])
        if np.any(mu <= 0) or mu_rest <= 0:
            raise DefinitenessError("low-rank metric needs positive weights")
        self.V, self.mu, self.mu_rest = V, mu, float(mu_rest)

    def _op(self, v, a, b):
        v = self._check(v)
        c = self.V.T @ v
        c = c * (b if v.ndim == 1 else b[:, None])
        return a * v + self.V @ c

    def apply(self, v):
        return self._op(v, self.mu_rest, self.mu - self.mu_rest)

    def solve(self, g):
        return self._op(g, 1.0 / self.mu_rest, 1.0 / self.mu - 1.0 / self.mu_rest)


class BlockDiagonalMetric(SpdMetric):
    """Block-diagonal SPD matrix; blocks of equal size are processed as stacks."""

    kind = "block_jacobi"

    def __init__(self, blocks):
        sizes = [b.shape[0] for b in blocks]
        super().__init__(sum(sizes))
        self.blocks = blocks
        self.block_sizes = sizes
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        # group equal-size blocks so apply/solve vectorize over them
        self._groups = []
        for size in sorted(set(sizes)):
            idx = [i for i, s in enumerate(sizes) if s == size]
            rows = np.concatenate([np.arange(offsets[i], offsets[i] + size) for i in idx])
            stack = np.stack([blocks[i] for i in idx])
            inv = np.empty_like(stack)
            for j, B in enumerate(stack):
                try:
                    factor = sla.cho_factor(B, lower=True)
                except np.linalg.LinAlgError:
                    raise DefinitenessError(f"block {idx[j]} is not positive definite") from None
                inv[j] = sla.cho_solve(factor, np.eye(size))
            inv = 0.5 * (inv + inv.transpose(0, 2, 1))
            self._groups.append((rows, size, stack, inv))

    def _blockwise(self, v, which):
        v = self._check(v)
        out = np.empty_like(v)
        for rows, size, stack, inv in self._groups:
            mats = stack if which == "apply" else inv
            part = v[rows].reshape((len(mats), size) + v.shape[1:])
            if v.ndim == 1:
                res = np.einsum("bij,bj->bi", mats, part)
            else:
                res = np.einsum("bij,bjk->bik", mats, part)
            out[rows] = res.reshape((-1,) + v.shape[1:])
        return out

    def apply(self, v):
        return self._blockwise(v, "apply")

    def solve(self, g):
        return self._blockwise(g, "solve")

    def to_dense(self):
        return sla.block_diag(*self.blocks)


class SparseFactorMetric(SpdMetric):
    """Sparse SPD matrix ``A`` with a cached exact factorization.

    The factorization is a symmetric-mode sparse LU (diagonal pivoting on a
    fill-reducing symmetric ordering), which for SPD input is a Cholesky
    factorization in disguise; positive pivots certify definiteness.
    """

    kind = "sparse_cholesky"

    def __init__(self, A):
        A = sp.csc_matrix(A, dtype=float)
        super().__init__(A.shape[0])
        if abs(A - A.T).max() > 1e-10 * max(1.0, abs(A).max()):
            raise ContractViolation("sparse metric must be symmetric")
        self.matrix = A
        try:
            self._lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise DefinitenessError(f"sparse factorization failed: {exc}") from None
        pivots = self._lu.U.diagonal()
        if np.any(pivots <= 0) or not np.all(self._lu.perm_r == self._lu.perm_c):
            raise DefinitenessError("sparse matrix is not positive definite")
        self.info["nnz_factor"] = int(self._lu.L.nnz + self._lu.U.nnz)

    def apply(self, v):
        return self.matrix @ self._check(v)

    def solve(self, g):
        return self._lu.solve(self._check(g))

    def to_dense(self):
        return self.matrix.toarray()


class TriangularFactorMetric(SpdMetric):
    """``M = L L^T`` for a sparse lower-triangular ``L`` with positive diagonal."""

    kind = "shifted_ic"

    def __init__(self, L):
        L = sp.csr_matrix(L, dtype=float)
        super().__init__(L.shape[0])
        self.L = L
        self.LT = L.T.tocsr()
        self.info["nnz_factor"] = int(L.nnz)

    def apply(self, v):
        v = self._check(v)
        return self.L @ (self.LT @ v)

    def solve(self, g):
        g = self._check(g)
        y = spla.spsolve_triangular(self.L, g, lower=True)
        return spla.spsolve_triangular(self.LT, y, lower=False)

    def to_dense(self):
        return (self.L @ self.LT).toarray()


# -- spectral-type ---------------------------------------------------------------


def spectral_epsilon(mu, L, kappa):
    """Regularization that makes the spectral metric reach condition number ``kappa``.

    Inverts ``kappa = (1 + eps/mu) / (1 + eps/L)`` for Hessian eigenvalue
    magnitudes in ``[mu, L]``.
    """
    if not 1 < kappa < L / mu:
        raise ParameterError(f"target kappa must lie in (1, L/mu) = (1, {L / mu:g}), got {kappa}")
    return L * mu * (kappa - 1) / (L - kappa * mu)


def spectral_kappa_bound(eps, mu, L):
    """Upper bound on the condition number of the spectral metric pencil."""
    bound = (1 + eps / mu) / (1 + eps / L)
    assert np.isclose(bound, L * (mu + eps) / (mu * (L + eps)))
    return bound


def spectral_metric(H, eps=None, target_kappa=None):
    """``M = Q diag(|lambda_i| + eps) Q^T`` from the eigendecomposition of ``H``.

    The pencil ``(H, M)`` then has eigenvalues ``lambda_i / (|lambda_i| + eps)``.
    Give either ``eps`` or ``target_kappa``; the latter back-solves ``eps``
    from the extreme eigenvalue magnitudes of ``H``.
    """
    Hd = _dense_symmetric(H)
    lam, Q = sla.eigh(Hd)
    if target_kappa is not None:
        mags = np.abs(lam)
        eps = spectral_epsilon(mags.min(), mags.max(), target_kappa)
    if eps is None or eps <= 0:
        raise ParameterError("spectral metric needs eps > 0")
    M = EigenMetric(Q, np.abs(lam) + eps)
    M.info.update(eps=float(eps))
    return M


def frozen_spectral_metric(H_at_x0, eps=None, target_kappa=None):
    """Spectral metric assembled once from a reference Hessian and then reused."""
    M = spectral_metric(H_at_x0, eps, target_kappa)
    M.kind = "frozen_spectral"
    return M


@dataclass
class InertialParams:
    """Parameters of the subspace-inertial metric.

    ``weights`` are the unstable weights ``a_1..a_k``; ``beta`` scales the
    tail level set by ``|lambda_{k+1}|``.
    """

    alpha: float
    weights: list
    eps: float
    beta: float = 1.0
    V_old: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ParameterError("inertia alpha must lie in [0, 1)")
        if any(a <= 0 for a in self.weights) or self.beta <= 0 or self.eps <= 0:
            raise ParameterError("inertial weights, beta and eps must be positive")


def subspace_inertial_metric(H, params):
    """Identity-plus-rank-k metric built from inertially mixed unstable eigenvectors.

    Returns ``(metric, V)`` where ``V`` is the stabilized Euclidean-orthonormal
    frame, to be passed as ``V_old`` on the next call.
    """
    k = len(params.weights)
    Hd = _dense_symmetric(H)
    n = Hd.shape[0]
    if k >= n:
        raise ContractViolation("subspace-inertial metric needs k < n")
    lam, Vt = sla.eigh(Hd, subset_by_index=(0, k))
    W = Vt[:, :k].copy()
    if params.V_old is not None:
        V_old = np.asarray(params.V_old, dtype=float)
        dots = np.einsum("ij,ij->j", W, V_old)
        sigma = np.where(dots < 0, -1.0, 1.0)  # exact ties count as +1
        W = (1 - params.alpha) * sigma * W + params.alpha * V_old
    V = m_orthonormalize(W, IdentityMetric(n)).vectors
    mu = np.asarray(params.weights, dtype=float) * np.abs(lam[:k]) + params.eps
    mu_rest = params.beta * abs(lam[k]) + params.eps
    return LowRankMetric(V, mu, mu_rest), V


class InertialMetricBuilder:
    """Stateful ``(x, H) -> metric`` factory carrying the previous inertial frame."""

    def __init__(self, alpha, weights, eps, beta=1.0):
        self.params = InertialParams(alpha, list(weights), eps, beta)
        self.__name__ = "subspace_inertial"

    def __call__(self, x, H):
        metric, V = subspace_inertial_metric(H, self.params)
        self.params.V_old = V
        return metric


# -- structure-exploiting ------------------------------------------------------


def jacobi_metric(H, eps):
    """``M = diag(|H_ii| + eps)``."""
    if eps <= 0:
        raise ParameterError("Jacobi metric needs eps > 0")
    diag = H.diagonal() if sp.issparse(H) else np.diag(np.asarray(H, dtype=float))
    M = DiagonalMetric(np.abs(diag) + eps)
    M.kind = "jacobi"
    return M


def matrix_abs(A):
    """``|A| = (A^T A)^{1/2}``, via ``Q |Lambda| Q^T`` for symmetric ``A``."""
    lam, Q = np.linalg.eigh(0.5 * (A + A.T))
    return (Q * np.abs(lam)) @ Q.T


def block_jacobi_metric(H, block_sizes, eps):
    """``M = blockdiag(|H_11| + eps I, ..., |H_pp| + eps I)``."""
    sizes = [int(s) for s in block_sizes]
    if any(s <= 0 for s in sizes) or sum(sizes) != H.shape[0]:
        raise ContractViolation(f"block sizes {sizes[:5]}... do not partition n={H.shape[0]}")
    if eps < 0:
        raise ParameterError("block Jacobi eps must be non-negative")
    Hc = sp.csr_matrix(H) if sp.issparse(H) else np.asarray(H, dtype=float)
    blocks = []
    start = 0
    for s in sizes:
        B = Hc[start : start + s, start : start + s]
        B = B.toarray() if sp.issparse(B) else np.array(B)
        blocks.append(matrix_abs(B) + eps * np.eye(s))
        start += s
    return BlockDiagonalMetric(blocks)


@dataclass
class IcParams:
    """Shifted incomplete Cholesky parameters.

    ``margin`` is added to ``max(0, -lambda_min)``, which is first multiplied
    by ``safety``.  Hessians with ``n <= dense_threshold`` (or dense input) get
    an exact Cholesky factorization; ``exact=True`` forces an exact sparse
    factorization regardless of size.
    """

    margin: float = 1.0
    drop_tol: float = 0.0
    dense_threshold: int = 200
    safety: float = 1.1
    exact: bool = False
    max_retries: int = 3

    def __post_init__(self):
        if self.margin <= 0:
            raise ParameterError("IC shift margin must be positive")
        if self.drop_tol < 0:
            raise ParameterError("IC drop tolerance must be non-negative")


def estimate_lambda_min(H, dense_limit=2000, tol=1e-10):
    """Smallest eigenvalue of symmetric ``H``.

    Exact dense solve up to ``dense_limit``.  Beyond that, Lanczos in
    shift-invert mode about a Gershgorin lower bound, so the wanted
    eigenvalue is the one of largest magnitude for ``(H - sigma I)^{-1}``.
    """
    n = H.shape[0]
    if n <= dense_limit or not sp.issparse(H):
        Hd = H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)
        return float(sla.eigvalsh(Hd, subset_by_index=(0, 0))[0])
    H = sp.csc_matrix(H, dtype=float)
    diag = H.diagonal()
    radius = np.asarray(abs(H).sum(axis=1)).ravel() - np.abs(diag)
    sigma = float(np.min(diag - radius)) - 1.0
    w = spla.eigsh(H, k=1, sigma=sigma, which="LM", tol=tol, return_eigenvectors=False)
    return float(w[0])


def incomplete_cholesky(A, drop_tol=0.0):
    """Zero fill-in incomplete Cholesky ``A ~ L L^T`` on the pattern of ``tril(A)``.

    Entries of ``L`` below ``drop_tol * sqrt(a_ii a_jj)`` are discarded.
    Raises :class:`DefinitenessError` on a nonpositive pivot.
    """
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    T = sp.tril(A, format="csr")
    T.sort_indices()
    diag_a = A.diagonal()
    rows = []  # row i of L as {col: value}
    for i in range(n):
        start, end = T.indptr[i], T.indptr[i + 1]
        pattern = T.indices[start:end]
        values = T.data[start:end]
        li = {}
        for j, a_ij in zip(pattern, values):
            if j == i:
                continue
            # l_ij = (a_ij - sum_{p<j} l_ip l_jp) / l_jj
            s = a_ij
            rj = rows[j]
            if len(li) < len(rj):
                s -= sum(v * rj[p] for p, v in li.items() if p in rj)
            else:
                s -= sum(v * li[p] for p, v in rj.items() if p in li and p != j)
            l_ij = s / rj[j]
            if drop_tol and abs(l_ij) < drop_tol * np.sqrt(abs(diag_a[i] * diag_a[j])):
                continue
            li[j] = l_ij
        d = diag_a[i] - sum(v * v for v in li.values())
        if not d > 0:
            raise DefinitenessError(f"nonpositive pivot {d:.3e} at row {i}")
        li[i] = np.sqrt(d)
        rows.append(li)
    r, c, v = [], [], []
    for i, row in enumerate(rows):
        for j, val in row.items():
            r.append(i)
            c.append(j)
            v.append(val)
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


def shifted_ic_metric(H, params=None):
    """``M = L L^T ~ H + delta I`` with ``delta = safety * max(0, -lambda_min) + margin``.

    Small or dense Hessians are factorized exactly; sparse ones by zero-fill
    incomplete Cholesky (or exactly with ``params.exact``).  On a factorization
    breakdown the shift is doubled, up to ``params.max_retries`` times.
    """
    params = IcParams() if params is None else params
    n = H.shape[0]
    lam_min = estimate_lambda_min(H)
    delta = params.safety * max(0.0, -lam_min) + params.margin
    dense = not sp.issparse(H) or n <= params.dense_threshold
    last_error = None
    for attempt in range(params.max_retries + 1):
        try:
            if dense:
                Hd = H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)
                M = _DenseShiftedMetric(Hd + delta * np.eye(n))
            elif params.exact:
                M = SparseFactorMetric(sp.csc_matrix(H) + delta * sp.identity(n, format="csc"))
            else:
                M = TriangularFactorMetric(
                    incomplete_cholesky(sp.csr_matrix(H) + delta * sp.identity(n, format="csr"), params.drop_tol)
                )
            break
        except DefinitenessError as exc:
            last_error = exc
            delta *= 2
    else:
        raise DefinitenessError(f"shifted factorization failed after {params.max_retries} retries: {last_error}")
    M.kind = "shifted_ic"
    M.info.update(delta=float(delta), lambda_min=lam_min, retries=attempt)
    return M


class _DenseShiftedMetric(SpdMetric):
    """Exact dense Cholesky ``L L^T`` of a shifted Hessian."""

    kind = "shifted_ic"

    def __init__(self, A):
        super().__init__(A.shape[0])
        self.matrix = 0.5 * (A + A.T)
        try:
            self._factor = sla.cho_factor(self.matrix, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DefinitenessError(str(exc)) from None
        self.info["nnz_factor"] = self.n * (self.n + 1) // 2

    def apply(self, v):
        return self.matrix @ self._check(v)

    def solve(self, g):
        return sla.cho_solve(self._factor, self._check(g))

    def to_dense(self):
        return self.matrix.copy()


def shifted_operator_metric(A, shift):
    """``M = A + shift I`` for a symmetric positive semidefinite operator ``A``."""
    if shift < 0:
        raise ParameterError("shift must be non-negative")
    n = A.shape[0]
    if sp.issparse(A):
        M = SparseFactorMetric(sp.csc_matrix(A) + shift * sp.identity(n, format="csc"))
    else:
        M = DenseMetric(np.asarray(A, dtype=float) + shift * np.eye(n))
    M.kind = "shifted_operator"
    M.info["shift"] = float(shift)
    return M


# -- selection heuristic ---------------------------------------------------------


def select_metric(n, density, block_structured=False):
    """Recommend a preconditioner from problem size and sparsity ``nnz(H)/n^2``.

    Rules are tried in order: small (``n <= 200``) gets frozen spectral,
    block-structured ``n <= 1000`` gets block Jacobi, sparse
    (``density < 0.01``) gets shifted incomplete Cholesky, anything else Jacobi.
    """
    if not 0 <= density <= 1:
        raise ContractViolation("density must lie in [0, 1]")
    if n <= 200:
        return "frozen_spectral"
    if n <= 1000 and block_structured:
        return "block_jacobi"
    if density < 0.01:
        return "shifted_ic"
    return "jacobi"


METRICS = {
    "identity": "Euclidean metric (standard HiSD)",
    "spectral": "Q diag(|lambda| + eps) Q^T, rebuilt from the current Hessian",
    "frozen_spectral": "spectral metric assembled once at the stage start",
    "subspace_inertial": "identity plus rank-k correction from inertially mixed eigenvectors",
    "jacobi": "diag(|H_ii| + eps)",
    "block_jacobi": "blockdiag(|H_bb| + eps I) over a block partition",
    "shifted_ic": "incomplete (or exact) Cholesky of H + delta I",
    "shifted_operator": "named problem operator plus a constant shift, sparse Cholesky",
}
