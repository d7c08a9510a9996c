"""Bistable chain: step-size stability of HiSD and three preconditioners."""
from phisd import harness

for name in ("exp3_hisd_stable", "exp3_hisd_unstable", "exp3_block_jacobi", "exp3_ic", "exp3_frozen_spectral"):
    cfg = harness.load_config(name)
    s = harness.run_experiment(cfg, write=False).summary
    print(f"{name:>22}: eta={cfg.solver.eta:<8g} {s['status']:<16} {s['iterations']:5d} it  |g|={s['final_grad_norm']:.2e}")
