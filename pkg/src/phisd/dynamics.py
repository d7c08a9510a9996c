"""Discrete preconditioned high-index saddle dynamics.

One outer iteration takes the Hessian at the current state, relaxes the
M-orthonormal frame ``V`` toward the ``k`` smallest generalized eigenvectors
of ``(H, M)`` with a few deflated gradient sweeps, and then moves the state
along the reflected preconditioned direction

    d = -M^{-1} g + 2 V (V^T g),

which ascends along ``span(V)`` and descends in its M-orthogonal complement.
With ``M = I`` this is standard HiSD.
"""
import enum
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation, FrameCollapseError, PhisdError
from .metric import (
    DEGENERACY_TOL,
    DegenerateSpectrumWarning,
    Frame,
    IdentityMetric,
    SpdMetric,
    generalized_eigendecomposition,
    m_orthonormalize,
    morse_index,
    smallest_generalized_eigenpairs,
)


class Status(enum.Enum):
    CONVERGED_INDEX_K = "ConvergedIndexK"
    CONVERGED_WRONG_INDEX = "ConvergedWrongIndex"
    DIVERGED = "Diverged"
    BUDGET_EXHAUSTED = "BudgetExhausted"

    @property
    def exit_code(self):
        return _EXIT_CODES[self]

    @property
    def converged(self):
        return self in (Status.CONVERGED_INDEX_K, Status.CONVERGED_WRONG_INDEX)


_EXIT_CODES = {
    Status.CONVERGED_INDEX_K: 0,
    Status.CONVERGED_WRONG_INDEX: 2,
    Status.DIVERGED: 3,
    Status.BUDGET_EXHAUSTED: 4,
}


@dataclass
class StageSwitch:
    """One-time metric/step-size switch on gradient stagnation.

    Fires at the first iteration ``m >= window`` with
    ``|g_m| >= (1 - rel_decrease_threshold) |g_{m - window}|``.
    """

    eta: float
    window: int = 10
    rel_decrease_threshold: float = 0.1

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractViolation("stage-2 step size must be positive")
        if self.window < 1:
            raise ContractViolation("stage-switch window must be >= 1")
        if not 0 < self.rel_decrease_threshold < 1:
            raise ContractViolation("rel_decrease_threshold must lie in (0, 1)")

    def triggered(self, grad_norms):
        m = len(grad_norms) - 1
        if m < self.window:
            return False
        return grad_norms[m] >= (1 - self.rel_decrease_threshold) * grad_norms[m - self.window]


@dataclass
class SolverConfig:
    k: int
    eta: float
    tau: float
    inner_iters: int = 1
    grad_tol: float = 1e-8
    max_iters: int = 10_000
    divergence_norm_cap: float = 1e6
    stage_switch: Optional[StageSwitch] = None
    frame_init: str = "eigen"
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ContractViolation("index k must be non-negative")
        for name in ("eta", "tau", "grad_tol", "divergence_norm_cap"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if self.inner_iters < 1:
            raise ContractViolation("inner_iters must be >= 1")
        if self.max_iters < 0:
            raise ContractViolation("max_iters must be non-negative")
        if self.frame_init not in ("eigen", "random"):
            raise ContractViolation(f"unknown frame_init {self.frame_init!r}")

    def eta_for(self, stage):
        return self.eta if stage == 0 else self.stage_switch.eta


class MetricStage:
    """Where the metric of a solver stage comes from.

    ``source`` is either a ready :class:`SpdMetric` or a callable
    ``source(x, H) -> SpdMetric``.  A callable is evaluated once when the
    stage starts (``update="frozen"``) or at every outer iteration
    (``update="every_step"``).
    """

    def __init__(self, source, update="frozen", name=None):
        if update not in ("frozen", "every_step"):
            raise ContractViolation(f"unknown metric update rule {update!r}")
        if update == "every_step" and isinstance(source, SpdMetric):
            raise ContractViolation("a fixed metric cannot be rebuilt every step")
        self.source = source
        self.update = update
        self.name = name or getattr(source, "kind", getattr(source, "__name__", "metric"))

    def build(self, x, H):
        if isinstance(self.source, SpdMetric):
            return self.source
        return self.source(x, H)

    def __repr__(self):
        return f"MetricStage({self.name!r}, update={self.update!r})"


@dataclass
class IterateState:
    x: np.ndarray
    frame: Frame
    g: np.ndarray
    m: int = 0
    stage: int = 0
    H: object = None


@dataclass
class TraceRecord:
    m: int
    grad_norm: float
    energy: float
    eta: float
    stage: int
    wall_time: float = 0.0


@dataclass
class RateEstimate:
    """Least-squares fit of ``log |g_m| = a + m log q`` over a tail window."""

    q: Optional[float]
    window: tuple = (0, 0)
    residual: float = np.nan
    reason: str = ""

    @property
    def ok(self):
        return self.q is not None


@dataclass
class RunTrace:
    records: list
    status: Optional[Status] = None
    x: Optional[np.ndarray] = None
    morse_index: Optional[int] = None
    rate: Optional[RateEstimate] = None
    frame: Optional[Frame] = None
    metric: Optional[SpdMetric] = None
    frame_errors: list = field(default_factory=list)
    switch_iteration: Optional[int] = None
    message: str = ""
    wall_time: float = 0.0

    @property
    def iterations(self):
        return self.records[-1].m

    @property
    def grad_norms(self):
        return np.array([r.grad_norm for r in self.records])

    @property
    def energies(self):
        return np.array([r.energy for r in self.records])


# -- elementary operations ---------------------------------------------------


def _vectors(V):
    return V.vectors if isinstance(V, Frame) else np.asarray(V, dtype=float)


def reflected_direction(g, V, M):
    """``d = -M^{-1} g + 2 V (V^T g)``, i.e. ``-(I - 2 V V^T M) M^{-1} g``."""
    V = _vectors(V)
    return -M.solve(g) + 2.0 * V @ (V.T @ g)


def deflated_residual(i, V, w, M, Mw=None):
    """Apply the deflated M-projection of column ``i`` (0-based) to ``w``.

    Returns ``w - v_i (v_i^T M w) - 2 sum_{j<i} v_j (v_j^T M w)``.  Pass
    ``Mw`` when ``M w`` is already known (in the frame sweep ``M w = H v_i``).
    """
    V = _vectors(V)
    if not 0 <= i < V.shape[1]:
        raise ContractViolation(f"column index {i} out of range for k={V.shape[1]}")
    if w.shape[0] != V.shape[0]:
        raise ContractViolation("dimension mismatch between w and frame")
    if Mw is None:
        Mw = M.apply(w)
    c = V[:, : i + 1].T @ Mw
    return w - V[:, i] * c[i] - 2.0 * (V[:, :i] @ c[:i])


def frame_update(V, H, M, tau, inner_iters=1):
    """Relax the frame by ``inner_iters`` sequential deflated sweeps.

    Each sweep sets ``v_i <- v_i - tau P_i^M M^{-1} H v_i`` for ``i = 1..k``
    in order (later columns see the already updated earlier ones) and then
    M-orthonormalizes the frame.
    """
    if isinstance(V, Frame) and V.metric is not M:
        V = m_orthonormalize(V.vectors, M)
    Vv = np.array(_vectors(V), dtype=float, copy=True)
    k = Vv.shape[1]
    if k == 0:
        return Frame(Vv, M)
    frame = None
    for _ in range(inner_iters):
        for i in range(k):
            Hv = H @ Vv[:, i]
            w = M.solve(Hv)
            Vv[:, i] -= tau * deflated_residual(i, Vv, w, M, Mw=Hv)
        frame = m_orthonormalize(Vv, M, error=FrameCollapseError)
        Vv = frame.vectors.copy()
    return frame


def initial_frame(H, M, k, method="eigen", rng=None):
    """Frame of the ``k`` smallest generalized eigenvectors, or a random one."""
    n = M.n
    if k == 0:
        return Frame(np.zeros((n, 0)), M)
    if method == "eigen":
        try:
            return m_orthonormalize(smallest_generalized_eigenpairs(H, M, k).eigenvectors, M)
        except (PhisdError, np.linalg.LinAlgError):
            pass
    rng = np.random.default_rng(0) if rng is None else rng
    return m_orthonormalize(rng.standard_normal((n, k)), M)


def optimal_step_size(H, M):
    """``2 / (L_M + mu_M)`` from the magnitudes of the generalized spectrum of ``(H, M)``."""
    lam = np.abs(generalized_eigendecomposition(H, M).eigenvalues)
    return 2.0 / (lam.max() + lam.min())


def hisd_step(state, problem, M, config):
    """Advance one outer iteration; returns the new :class:`IterateState`.

    ``state.H`` is reused when present, otherwise the Hessian is evaluated at
    ``state.x``.  The returned state carries the gradient at the new point.
    """
    H = state.H if state.H is not None else problem.hessian(state.x)
    frame = frame_update(state.frame, H, M, config.tau, config.inner_iters)
    d = reflected_direction(state.g, frame, M)
    x = state.x + config.eta_for(state.stage) * d
    g = problem.gradient(x)
    return IterateState(x, frame, g, state.m + 1, state.stage)


# -- driver ------------------------------------------------------------------


def _as_stages(metric, n):
    if metric is None:
        return [MetricStage(IdentityMetric(n))]
    if isinstance(metric, (SpdMetric, MetricStage)) or callable(metric):
        metric = [metric]
    stages = [m if isinstance(m, MetricStage) else MetricStage(m) for m in metric]
    if not 1 <= len(stages) <= 2:
        raise ContractViolation("metric schedule must have one or two stages")
    return stages


def _diverged(x, cap):
    return not np.all(np.isfinite(x)) or np.abs(x).max() > cap


def solve(problem, x0, metric=None, config=None, callback=None):
    """Search for an index-``config.k`` saddle starting at ``x0``.

    Args:
        problem: :class:`~phisd.problems.ProblemDefinition`.
        x0: starting state.
        metric: ``None`` (Euclidean), an :class:`SpdMetric`, a
            :class:`MetricStage`, or a list of one or two of them.  A second
            stage is entered once, when ``config.stage_switch`` fires.
        config: :class:`SolverConfig`.
        callback: optional ``callback(state, record)`` after every iteration.

    Returns:
        :class:`RunTrace`.  Failures are reported through ``trace.status``
        rather than raised.
    """
    if config is None:
        raise ContractViolation("solve needs a SolverConfig")
    stages = _as_stages(metric, problem.n)
    if len(stages) == 2 and config.stage_switch is None:
        raise ContractViolation("two metric stages need config.stage_switch")
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()

    x = np.array(x0, dtype=float, copy=True)
    if x.shape != (problem.n,):
        raise ContractViolation(f"x0 has shape {x.shape}, expected ({problem.n},)")
    stage = 0
    g = problem.gradient(x)
    trace = RunTrace(records=[TraceRecord(0, float(np.linalg.norm(g)), problem.energy(x), config.eta, 0)])
    M = None
    frame = None
    H = None

    while True:
        m = trace.records[-1].m
        gnorm = trace.records[-1].grad_norm
        if not np.isfinite(gnorm) or not np.isfinite(trace.records[-1].energy) or _diverged(x, config.divergence_norm_cap):
            trace.status = Status.DIVERGED
            break
        if gnorm < config.grad_tol:
            trace.status = _classify(trace, problem, x, M, config)
            break
        if m >= config.max_iters:
            trace.status = Status.BUDGET_EXHAUSTED
            break
        if (
            stage == 0
            and len(stages) == 2
            and config.stage_switch.triggered([r.grad_norm for r in trace.records])
        ):
            stage = 1
            M = None
            trace.switch_iteration = m

        H = problem.hessian(x)
        if M is None or stages[stage].update == "every_step":
            M = stages[stage].build(x, H)
        if frame is None:
            frame = initial_frame(H, M, config.k, config.frame_init, rng)
        elif frame.metric is not M:
            frame = m_orthonormalize(frame.vectors, M)

        state = IterateState(x, frame, g, m, stage, H)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                state = hisd_step(state, problem, M, config)
                energy = problem.energy(state.x)
        except FrameCollapseError as exc:
            trace.status = Status.DIVERGED
            trace.message = str(exc)
            break
        x, frame, g = state.x, state.frame, state.g
        trace.frame_errors.append(frame.orthonormality_error())
        record = TraceRecord(
            state.m,
            float(np.linalg.norm(g)),
            float(energy),
            config.eta_for(stage),
            stage,
            time.perf_counter() - t0,
        )
        trace.records.append(record)
        if callback is not None:
            callback(state, record)

    trace.x = x
    trace.frame = frame
    trace.metric = M
    if trace.status.converged:
        trace.rate = estimate_linear_rate(trace)
    trace.wall_time = time.perf_counter() - t0
    return trace


def _classify(trace, problem, x, M, config):
    H = problem.hessian(x)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSpectrumWarning)
        trace.morse_index = morse_index(H, M)
    if caught:
        trace.message = str(caught[-1].message)
    if trace.morse_index == config.k:
        return Status.CONVERGED_INDEX_K
    return Status.CONVERGED_WRONG_INDEX


# -- diagnostics -------------------------------------------------------------


def estimate_linear_rate(trace, tail_fraction=0.6, min_points=5, max_residual=0.5):
    """Fit the linear contraction factor of the gradient norms.

    The window is the last ``tail_fraction`` of the records, widened to at
    least ``min_points`` records.  ``q = exp(slope)`` of the least-squares
    line through ``log |g_m|``; no estimate is returned when too few finite
    positive points remain, the tail does not decrease, or the RMS residual
    of the fit exceeds ``max_residual``.
    """
    if isinstance(trace, RunTrace):
        norms = trace.grad_norms
        ms = np.array([r.m for r in trace.records], dtype=float)
    else:
        norms = np.asarray(trace, dtype=float)
        ms = np.arange(norms.size, dtype=float)
    total = norms.size
    width = max(int(np.ceil(tail_fraction * total)), min_points)
    start = max(total - width, 0)
    y, t = norms[start:], ms[start:]
    keep = np.isfinite(y) & (y > 0)
    y, t = y[keep], t[keep]
    if y.size < min_points:
        return RateEstimate(None, (start, total), reason=f"only {y.size} usable points (< {min_points})")
    logy = np.log(y)
    slope, intercept = np.polyfit(t, logy, 1)
    residual = float(np.sqrt(np.mean((logy - (slope * t + intercept)) ** 2)))
    if slope >= 0:
        return RateEstimate(None, (start, total), residual, "tail is not decreasing")
    if residual > max_residual:
        return RateEstimate(None, (start, total), residual, f"fit residual {residual:.3g} too large")
    return RateEstimate(float(np.exp(slope)), (start, total), residual)


@dataclass
class SaddleReport:
    grad_norm: float
    morse_index: int
    rayleigh_quotients: np.ndarray
    residuals: np.ndarray
    k: int
    residual_tol: float = 1e-6
    degenerate: bool = False

    @property
    def index_ok(self):
        return self.morse_index == self.k

    @property
    def ordering_ok(self):
        lam = self.rayleigh_quotients
        return bool(np.all(np.diff(lam) > 0) and (lam.size == 0 or lam[-1] < 0))

    @property
    def residuals_ok(self):
        return bool(np.all(self.residuals < self.residual_tol))

    @property
    def passed(self):
        return self.index_ok and self.ordering_ok and self.residuals_ok


def verify_saddle(problem, x, M, k, frame=None, residual_tol=1e-6):
    """Check that ``x`` is an index-``k`` saddle and that ``frame`` spans its unstable directions.

    Without a frame the ``k`` smallest generalized eigenvectors at ``x`` are
    used.  Rayleigh quotients are ``lambda_i = v_i^T H v_i`` and residuals are
    Euclidean norms ``|H v_i - lambda_i M v_i|``.
    """
    x = np.asarray(x, dtype=float)
    H = problem.hessian(x)
    if M is None:
        M = IdentityMetric(problem.n)
    if frame is None:
        V = smallest_generalized_eigenpairs(H, M, k).eigenvectors if k else np.zeros((problem.n, 0))
    else:
        V = _vectors(frame)
    HV = H @ V
    lam = np.einsum("ij,ij->j", V, HV)
    residuals = np.linalg.norm(HV - M.apply(V) * lam, axis=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSpectrumWarning)
        index = morse_index(H, M, DEGENERACY_TOL)
    return SaddleReport(
        grad_norm=float(np.linalg.norm(problem.gradient(x))),
        morse_index=index,
        rayleigh_quotients=lam,
        residuals=residuals,
        k=k,
        residual_tol=residual_tol,
        degenerate=bool(caught),
    )
