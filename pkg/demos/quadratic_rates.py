"""Ill-conditioned quadratic: plain HiSD against spectral metrics.

Prints iteration counts and fitted linear rates next to the bound
(kappa - 1) / (kappa + 1) for each effective condition number.
"""
import numpy as np

from phisd import IdentityMetric, SolverConfig, optimal_step_size, solve, spectral_metric
from phisd.problems import paper_quadratic_spectrum, quadratic_problem

lam = paper_quadratic_spectrum()
p = quadratic_problem(lam)
x0 = p.point("unit_gradient_start")
H = p.hessian(x0)

print(f"{'metric':>16} {'iters':>6} {'rate':>8} {'bound':>8}")
for kappa in (None, 2.0, 1.01):
    M = IdentityMetric(p.n) if kappa is None else spectral_metric(H, target_kappa=kappa)
    eff = np.abs(lam).max() / np.abs(lam).min() if kappa is None else kappa
    eta = optimal_step_size(H, M)
    tr = solve(p, x0, M, SolverConfig(k=1, eta=eta, tau=0.1, grad_tol=1e-8, max_iters=5000))
    q = tr.rate.q if tr.rate.ok else float("nan")
    label = "identity" if kappa is None else f"spectral k={kappa}"
    print(f"{label:>16} {tr.iterations:6d} {q:8.4f} {(eff - 1) / (eff + 1):8.4f}")
