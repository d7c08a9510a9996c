"""Benchmark energies with analytic gradients and Hessians.

Four landscapes are provided: a diagonal quadratic, the 2-D butterfly
function, a stiff chain of coupled bistable units and a finite-difference
Allen-Cahn energy on the unit square.  Each is returned as a
:class:`ProblemDefinition`, a bundle of plain callables.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation


@dataclass(frozen=True)
class ReferencePoint:
    """A known critical point with its Morse index and where it came from."""

    label: str
    x: np.ndarray
    morse_index: int
    provenance: str = "analytic"


@dataclass
class ProblemDefinition:
    """Energy, gradient and Hessian of a smooth function on R^n.

    ``hessian(x)`` returns either a dense array or a scipy sparse matrix; both
    support ``H @ v``.  ``named_points`` maps names to callables producing
    starting states (``rng`` is passed for perturbed ones).
    """

    name: str
    n: int
    energy: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], object]
    block_sizes: Optional[list] = None
    reference_points: list = field(default_factory=list)
    named_points: dict = field(default_factory=dict)
    operators: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def reference(self, label):
        for ref in self.reference_points:
            if ref.label == label:
                return ref
        raise KeyError(f"{self.name} has no reference point {label!r}")

    def point(self, name, rng=None):
        """Resolve a named starting point or reference point to a vector."""
        if name in self.named_points:
            return np.array(self.named_points[name](rng), dtype=float)
        return self.reference(name).x.copy()


# -- quadratic model ---------------------------------------------------------


def quadratic_problem(spectrum):
    """``E(x) = x^T H x / 2`` with ``H = diag(spectrum)``.

    Named point ``"unit_gradient_start"`` is ``x0`` proportional to
    ``e_1 + e_n`` scaled so that ``|grad E(x0)| = 1``.
    """
    lam = np.asarray(spectrum, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise ContractViolation("spectrum must be a non-empty 1-D sequence")
    if np.any(lam == 0):
        raise ContractViolation("spectrum entries must be nonzero")
    n = lam.size
    H = np.diag(lam)
    index = int(np.count_nonzero(lam < 0))

    def energy(x):
        return 0.5 * float(x @ (lam * x))

    def gradient(x):
        return lam * x

    def hessian(x):
        return H

    def unit_gradient_start(rng=None):
        x = np.zeros(n)
        x[0] = x[-1] = 1.0
        return x / np.linalg.norm(lam * x)

    return ProblemDefinition(
        name="quadratic",
        n=n,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        reference_points=[ReferencePoint("origin", np.zeros(n), index)],
        named_points={"unit_gradient_start": unit_gradient_start},
        params={"spectrum": lam.tolist()},
    )


def paper_quadratic_spectrum(n=100):
    """``(-1, 2, 3, ..., n)``: one unstable direction, mu = 1, L = n."""
    return np.concatenate([[-1.0], np.arange(2.0, n + 1.0)])


# -- butterfly ---------------------------------------------------------------

#: the index-1 saddle of the butterfly function at c = 1; a grid scan of
#: |grad E| over [-2, 2]^2 with Newton refinement finds only this saddle and
#: the minimizers (+-1.5, -1) (tests/test_problems.py repeats the scan)
BUTTERFLY_SADDLE_C1 = np.zeros(2)


def butterfly_problem(c=1.0):
    """``E = x^4 - 2x^2 + y^4 + y^2 - 1.5 x^2 y^2 + x^2 y - c y^3``."""
    c = float(c)

    def energy(z):
        x, y = z
        return x**4 - 2 * x**2 + y**4 + y**2 - 1.5 * x**2 * y**2 + x**2 * y - c * y**3

    def gradient(z):
        x, y = z
        return np.array([
            4 * x**3 - 4 * x - 3 * x * y**2 + 2 * x * y,
            4 * y**3 + 2 * y - 3 * x**2 * y + x**2 - 3 * c * y**2,
        ])

    def hessian(z):
        x, y = z
        hxy = -6 * x * y + 2 * x
        return np.array([
            [12 * x**2 - 4 - 3 * y**2 + 2 * y, hxy],
            [hxy, 12 * y**2 + 2 - 3 * x**2 - 6 * c * y],
        ])

    refs = [ReferencePoint("origin", np.zeros(2), 1)]
    if c == 1.0:
        refs += [
            ReferencePoint("saddle", BUTTERFLY_SADDLE_C1.copy(), 1, "derived"),
            ReferencePoint("minimum_right", np.array([1.5, -1.0]), 0, "derived"),
            ReferencePoint("minimum_left", np.array([-1.5, -1.0]), 0, "derived"),
        ]
    return ProblemDefinition(
        name="butterfly",
        n=2,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        reference_points=refs,
        named_points={"near_minimizer": lambda rng=None: np.array([1.44, -0.95])},
        params={"c": c},
    )


# -- coupled bistable chain --------------------------------------------------


def bistable_chain_problem(N=50, K=1e4, delta=1.0, noise_std=0.1):
    """Chain of ``N`` bistable units ``(u_i, v_i)``, stiff inside each unit.

    Variables are interleaved, ``x = (u_1, v_1, ..., u_N, v_N)``, so each site
    is a contiguous 2x2 block.  The Hessian is tridiagonal.

    Named points: ``"alternating"`` (``u_i = v_i = (-1)^i``), and
    ``"perturbed_alternating"`` which adds Gaussian noise of standard
    deviation ``noise_std`` drawn from the supplied generator.
    """
    if N < 2:
        raise ContractViolation("chain needs at least two sites")
    if K <= 0 or delta <= 0:
        raise ContractViolation("K and delta must be positive")
    N, K, delta = int(N), float(K), float(delta)
    n = 2 * N
    # sub/super-diagonal: K-coupling on (u_i, v_i), delta-coupling on (v_i, u_{i+1})
    off = np.empty(n - 1)
    off[0::2] = -K
    off[1::2] = -delta

    def split(x):
        return x[0::2], x[1::2]

    def energy(x):
        u, v = split(x)
        return float(
            0.5 * K * np.sum((u - v) ** 2)
            + np.sum((u**2 - 1) ** 2 + (v**2 - 1) ** 2)
            + 0.5 * delta * np.sum((v[:-1] - u[1:]) ** 2)
        )

    def gradient(x):
        u, v = split(x)
        gu = K * (u - v) + 4 * u * (u**2 - 1)
        gv = -K * (u - v) + 4 * v * (v**2 - 1)
        link = delta * (v[:-1] - u[1:])
        gv[:-1] += link
        gu[1:] -= link
        g = np.empty(n)
        g[0::2], g[1::2] = gu, gv
        return g

    def hessian(x):
        diag = K + 12 * x**2 - 4
        diag[1:-1] += delta  # every variable except u_1 and v_N touches a link
        return sp.diags([off, diag, off], [-1, 0, 1], format="csr")

    alternating = np.repeat((-1.0) ** np.arange(1, N + 1), 2)

    def perturbed(rng=None):
        rng = np.random.default_rng() if rng is None else rng
        return alternating + noise_std * rng.standard_normal(n)

    return ProblemDefinition(
        name="bistable_chain",
        n=n,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        block_sizes=[2] * N,
        reference_points=[ReferencePoint("uniform_minimum", np.ones(n), 0)],
        named_points={
            "alternating": lambda rng=None: alternating.copy(),
            "perturbed_alternating": perturbed,
        },
        params={"N": N, "K": K, "delta": delta, "noise_std": noise_std},
    )


# -- Allen-Cahn --------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform ``N x N`` node grid on the unit square, interface width ``xi``."""

    N: int
    xi: float

    def __post_init__(self):
        if self.N < 3:
            raise ContractViolation("grid needs N >= 3")
        if self.xi <= 0:
            raise ContractViolation("interface width xi must be positive")

    @property
    def h(self):
        return 1.0 / (self.N - 1)

    @property
    def resolution(self):
        """``xi / h``, points per interface width."""
        return self.xi / self.h


def neumann_laplacian(N, h):
    """Symmetric five-point ``-Delta_h`` with homogeneous Neumann conditions.

    Ghost values mirror the boundary node across the half cell, which keeps
    the operator symmetric positive semidefinite with the constants as kernel.
    Nodes are ordered row-major, ``k = i * N + j``.
    """
    d = np.full(N, 2.0)
    d[0] = d[-1] = 1.0
    D = sp.diags([-np.ones(N - 1), d, -np.ones(N - 1)], [-1, 0, 1]) / h**2
    eye = sp.identity(N)
    return (sp.kron(eye, D) + sp.kron(D, eye)).tocsr()


def allen_cahn_problem(grid, scaling="integral"):
    """Finite-difference Allen-Cahn energy with Neumann boundary.

    ``E_h(u) = w * [u^T (-Delta_h) u / 2 + xi^-2 sum F(u)]`` with
    ``F(u) = (u^2 - 1)^2 / 4``.  With ``scaling="integral"`` the weight is the
    cell area ``w = h^2``, so ``E_h`` approximates the continuum integral;
    ``scaling="nodal"`` uses ``w = 1``, for which the gradient is the nodal
    residual ``-Delta_h u + xi^-2 (u^3 - u)`` of the PDE.

    ``operators["laplacian"]`` holds the unweighted ``-Delta_h`` and
    ``operators["weight"]`` the scalar ``w``.

    Named points: ``"planar_interface"`` (a tanh kink along x = 1/2),
    ``"cosine"`` (``cos(pi x)``) and ``"wavy_cosine"``
    (``cos(pi (x + 1e-4 cos(pi y)))``).  The last breaks the y-invariance of
    the cosine start with a small interface wave while staying odd under
    ``(x, y) -> (1 - x, 1 - y)``, so the near-neutral translation mode of the
    planar saddle is never excited.
    """
    if scaling not in ("integral", "nodal"):
        raise ContractViolation(f"unknown scaling {scaling!r}")
    N, xi, h = grid.N, grid.xi, grid.h
    n = N * N
    w = h**2 if scaling == "integral" else 1.0
    lap = neumann_laplacian(N, h)
    inv_xi2 = 1.0 / xi**2

    def energy(u):
        return float(w * (0.5 * u @ (lap @ u) + 0.25 * inv_xi2 * np.sum((u**2 - 1) ** 2)))

    def gradient(u):
        return w * (lap @ u + inv_xi2 * (u**3 - u))

    def hessian(u):
        return (w * (lap + sp.diags(inv_xi2 * (3 * u**2 - 1)))).tocsr()

    coords = np.arange(N) * h
    X = np.repeat(coords, N)  # row-major: k = i * N + j, x = i * h
    Y = np.tile(coords, N)

    refs = [
        ReferencePoint("phase_plus", np.ones(n), 0),
        ReferencePoint("phase_minus", -np.ones(n), 0),
    ]
    return ProblemDefinition(
        name="allen_cahn",
        n=n,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        reference_points=refs,
        named_points={
            "planar_interface": lambda rng=None: np.tanh((0.5 - X) / (np.sqrt(2) * xi)),
            "cosine": lambda rng=None: np.cos(np.pi * X),
            "wavy_cosine": lambda rng=None: np.cos(np.pi * (X + 1e-4 * np.cos(np.pi * Y))),
        },
        operators={"laplacian": lap, "weight": w},
        params={"N": N, "xi": xi, "h": h, "scaling": scaling},
    )


# -- verification ------------------------------------------------------------


@dataclass
class FiniteDifferenceReport:
    """Relative errors of analytic derivatives against central differences."""

    gradient_error: float
    hessian_errors: list
    gradient_tol: float = 1e-6
    hessian_tol: float = 1e-5
    failure: Optional[str] = None

    @property
    def passed(self):
        return (
            self.failure is None
            and self.gradient_error < self.gradient_tol
            and all(e < self.hessian_tol for e in self.hessian_errors)
        )


def _rel_err(a, b, floor):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def finite_difference_check(problem, x, h_fd=None, n_directions=5, rng=None, floor=1e-8):
    """Compare the analytic gradient and Hessian-vector products to central differences.

    The gradient is differenced coordinate by coordinate from the energy;
    Hessian-vector products are checked along ``n_directions`` random unit
    directions by differencing the gradient.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    if h_fd is None:
        h_fd = np.finfo(float).eps ** (1 / 3) * max(1.0, np.abs(x).max())

    g = problem.gradient(x)
    if not np.all(np.isfinite(g)) or not np.isfinite(problem.energy(x)):
        return FiniteDifferenceReport(np.inf, [], failure=f"non-finite evaluation at {x!r}")
    g_fd = np.empty_like(x)
    xp = x.copy()
    for i in range(x.size):
        xp[i] = x[i] + h_fd
        ep = problem.energy(xp)
        xp[i] = x[i] - h_fd
        em = problem.energy(xp)
        xp[i] = x[i]
        g_fd[i] = (ep - em) / (2 * h_fd)
    if not np.all(np.isfinite(g_fd)):
        bad = int(np.flatnonzero(~np.isfinite(g_fd))[0])
        return FiniteDifferenceReport(np.inf, [], failure=f"non-finite energy near coordinate {bad}")

    H = problem.hessian(x)
    hess_errors = []
    for _ in range(n_directions):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        hv_fd = (problem.gradient(x + h_fd * d) - problem.gradient(x - h_fd * d)) / (2 * h_fd)
        hess_errors.append(_rel_err(H @ d, hv_fd, floor))
    return FiniteDifferenceReport(_rel_err(g, g_fd, floor), hess_errors)


PROBLEMS = {
    "quadratic": "diagonal quadratic x^T diag(spectrum) x / 2",
    "butterfly": "2-D butterfly function with parameter c",
    "bistable_chain": "chain of N stiff bistable units (n = 2N)",
    "allen_cahn": "finite-difference Allen-Cahn energy on an N x N grid",
}
