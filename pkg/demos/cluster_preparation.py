"""Optimize a noiseless cluster-state pulse and check it on the exact state.

Run with ``python demos/cluster_preparation.py``.
"""

from iqc.objective import ControlProblem
from iqc.optimize import OptimizerConfig, minimize
from iqc.verify import transported_state_infidelity

for n in (3, 4, 5):
    problem = ControlProblem.for_task("cluster", n)
    run = minimize(problem, OptimizerConfig(max_iterations=2000, tolerance=1e-4, seed=0))
    J = problem.infidelity(run.best)
    state = transported_state_infidelity(run.best, "cluster")
    print(f"n={n}: {run.status} after {run.iterations} iterations, T = {run.best.duration:.3f}, "
          f"operator infidelity {J:.2e}, state infidelity {state:.2e}")
