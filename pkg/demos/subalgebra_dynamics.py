"""Propagate an invariant in the polynomial subalgebra and compare with the full Hilbert space.

Run with ``python demos/subalgebra_dynamics.py``.
"""

import numpy as np

from iqc.algebra import build_basis, control_terms, encode, structure_constants, task_operator
from iqc.dynamics import PulseSchedule, propagate
from iqc.verify import conjugated_coefficients

n = 5
basis = build_basis(n)
gens = structure_constants(basis, control_terms(n))
print(f"n = {n}: {basis.dim} basis elements instead of {4 ** n - 1} Pauli words")

init = encode(task_operator("cluster-init", n), basis)
pulse = PulseSchedule.random(n, 10 * n, n * np.pi / 2, rng=0)

# a(T) from the real antisymmetric generators
final = propagate(init, pulse, gens).final
# and Tr(U I(0) U^dag a_k) / 2^n from the dense 32 x 32 propagator
dense = conjugated_coefficients(init.to_pauli_sum(), pulse, basis)

print("largest coefficients of I(T):")
for k in np.argsort(-np.abs(final.coeffs))[:6]:
    print(f"  {basis.elements[k].word}  {final.coeffs[k]:+.6f}")
print(f"max deviation from the dense oracle: {np.abs(final.coeffs - dense).max():.2e}")
print(f"norm drift: {abs(final.norm - init.norm):.2e}")
