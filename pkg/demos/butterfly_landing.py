"""Butterfly energy from a start near a minimum.

Plain HiSD wanders off while the Hessian-based metrics land on the
index-1 saddle at the origin.
"""
import numpy as np

from phisd import harness
from phisd.problems import butterfly_problem

saddle = butterfly_problem().reference("saddle").x
for name in ("exp2_hisd", "exp2_spectral", "exp2_inertial"):
    res = harness.run_experiment(harness.load_config(name), write=False)
    d = np.linalg.norm(res.trace.x - saddle)
    print(f"{name:>14}: {res.summary['status']:<16} {res.summary['iterations']:6d} it  |x - saddle| = {d:.2e}")
