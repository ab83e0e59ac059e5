"""First-order suppression of parasitic Z_j Z_j+1 couplings.

The parasitic terms sit outside the subalgebra, so they are treated
through the constraint C built from backward-evolved Z_j coefficients.
The exact 16-dimensional simulation then checks the gain.  Takes a few
minutes.
"""

from iqc.objective import ControlProblem
from iqc.optimize import OptimizerConfig, minimize
from iqc.perturb import build_eta, constraint, zz_spec
from iqc.verify import robustness_report

n = 4
problem = ControlProblem.for_task("cluster", n)
spec = zz_spec(problem.basis)
eta = build_eta(problem.basis, problem.init, spec, "zz-robust")
print(f"eta table: {len(eta.product_words)} product words, {len(eta.bq_words)} commutator words")

ref = minimize(problem, OptimizerConfig(max_iterations=2000, tolerance=1e-5, seed=0, bins=40))
C0 = constraint(ref.best, problem.gens, spec, eta).value
run = minimize(problem, OptimizerConfig(max_iterations=200, tolerance=1e-6, seed=1, bins=40),
               initial=ref.best, constraint=(spec, eta, 1 / C0, 1))
C1 = constraint(run.best, problem.gens, spec, eta).value
print(f"C0 = {C0:.3g}, C1/C0 = {C1 / C0:.2e}, J = {problem.infidelity(run.best):.2e}")

for lv in (0.01, 0.05):
    a = robustness_report(ref.best, "zz-robust", lv, 300, seed=5, kind="parasitic").mean
    b = robustness_report(run.best, "zz-robust", lv, 300, seed=5, kind="parasitic").mean
    print(f"lambda up to {lv:.2f}: without C {a:.2e}, with C {b:.2e}")
