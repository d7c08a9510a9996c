"""Allen-Cahn transition state with a two-stage metric.

Stage 1 uses the shifted Laplacian, stage 2 switches to an incomplete
Cholesky factor of the shifted Hessian once the gradient stagnates.
"""
from phisd import harness

for name in ("exp4_hisd", "exp4_two_stage"):
    res = harness.run_experiment(harness.load_config(name), write=False)
    g = res.trace.grad_norms
    s = res.summary
    print(f"{name}: {s['status']} after {s['iterations']} it, |g| {g[0]:.3e} -> {g[-1]:.3e}, "
          f"switch at {s['switch_iteration']}, index {s['morse_index']}")
