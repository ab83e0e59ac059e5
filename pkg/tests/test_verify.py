import numpy as np
import pytest
from scipy.stats import spearmanr

from iqc.algebra import build_basis, control_terms, encode, task_operator
from iqc.dynamics import PulseSchedule, propagate
from iqc.errors import AmbiguityError, CapacityError, DomainError, NumericalError
from iqc.objective import ControlProblem
from iqc.optimize import OptimizerConfig, minimize
from iqc.pauli import PauliString, PauliSum
from iqc.verify import (
    DenseState,
    conjugated_coefficients,
    dense_hamiltonian,
    free_evolution_fidelity,
    ghz_state,
    ground_state,
    propagate_state,
    robustness_report,
    sensing_demo,
    state_fidelity,
    task_states,
    transported_state_infidelity,
)

P = PauliString.from_label


def test_dense_state_normalization():
    with pytest.raises(DomainError):
        DenseState(np.array([1.0, 1.0]))
    s = DenseState.normalized([3.0, 4.0j])
    assert np.linalg.norm(s.amplitudes) == pytest.approx(1.0, abs=1e-15)


def test_ground_state_of_minus_z_sum():
    op = -PauliSum.from_labels(["ZII", "IZI", "IIZ"])
    gs = ground_state(op)
    assert state_fidelity(gs, DenseState.basis_state(3, "000")) == pytest.approx(1.0, abs=1e-14)


def test_ghz_ground_state_is_bell():
    gs = ground_state(task_operator("ghz-target", 2))
    # the rotated-frame GHZ operator -ZZ - XX has the Bell state |00> + |11> as ground state
    bell = DenseState.normalized([1, 0, 0, 1])
    assert state_fidelity(gs, bell) == pytest.approx(1.0, abs=1e-12)


def test_cluster_ground_state_stabilizers():
    n = 3
    gs = ground_state(task_operator("cluster-target", n))
    for w, _ in task_operator("cluster-target", n):
        assert gs.expectation(PauliSum.coerce(w)) == pytest.approx(-1.0, abs=1e-12)


def test_ground_state_degeneracy_rejected():
    with pytest.raises(AmbiguityError):
        ground_state(PauliSum.from_labels(["ZI"]))


def test_ground_state_krylov_path():
    n = 8
    gs = ground_state(task_operator("cluster-target", n))
    assert gs.expectation(task_operator("cluster-target", n)) == pytest.approx(-n, abs=1e-9)


def test_capacity_limit():
    with pytest.raises(CapacityError):
        ground_state(PauliSum.from_labels(["Z" * 13]))


def test_zero_hamiltonian_leaves_state():
    psi = DenseState.normalized(np.random.default_rng(0).normal(size=8) + 0j)
    out = propagate_state(psi, PulseSchedule(3, np.zeros((7, 3)), 2.0))
    assert state_fidelity(out, psi) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(out.amplitudes, psi.amplitudes, atol=1e-15)


def test_rabi_pi_pulse():
    # (pi/2) X_1 for unit time on the first site of a two-site register
    amp = np.zeros((5, 1))
    amp[3] = np.pi / 2
    out = propagate_state(DenseState.basis_state(2, "00"), PulseSchedule(2, amp, 1.0))
    np.testing.assert_allclose(out.amplitudes, [0, 0, -1j, 0], atol=1e-14)


def test_hamiltonian_hermitian():
    pulse = PulseSchedule.random(4, 5, 2.0, 1)
    H = dense_hamiltonian(pulse, control_terms(4), 2, noise=[0.01, -0.02, 0.03],
                          parasitic=PauliSum.from_labels(["ZZII"]))
    assert np.abs(H - H.conj().T).max() <= 1e-12


@pytest.mark.parametrize("n", [3, 4, 5])
def test_cross_module_oracle(n):
    b = build_basis(n)
    gens_terms = control_terms(n)
    from iqc.algebra import structure_constants

    gens = structure_constants(b, gens_terms)
    init = encode(task_operator("cluster-init", n), b)
    rng = np.random.default_rng(10 + n)
    pulse = PulseSchedule.random(n, 10, 2.0, rng)
    noise = rng.uniform(-0.05, 0.05, n - 1)
    want = conjugated_coefficients(init.to_pauli_sum(), pulse, b, noise=noise)
    got = propagate(init, pulse, gens, noise=noise).final.coeffs
    assert np.abs(got - want).max() <= 1e-8


def test_krylov_matches_dense():
    pulse = PulseSchedule.random(5, 6, 3.0, 2, scale=2.0)
    psi = DenseState.normalized(np.random.default_rng(1).normal(size=32) + 0j)
    a = propagate_state(psi, pulse, method="dense")
    k = propagate_state(psi, pulse, method="krylov")
    assert np.abs(a.amplitudes - k.amplitudes).max() <= 1e-10
    with pytest.raises(DomainError):
        propagate_state(psi, pulse, method="magic")


def test_state_fidelity_examples():
    a = DenseState.basis_state(1, "0")
    assert state_fidelity(a, a) == 1.0
    assert state_fidelity(a, DenseState.basis_state(1, "1")) == 0.0
    assert state_fidelity(a, DenseState.normalized([1, 1])) == pytest.approx(0.5)
    b = DenseState.normalized([1j, 1])
    assert state_fidelity(a, b) == state_fidelity(b, a)
    phased = DenseState(np.exp(0.7j) * b.amplitudes)
    assert state_fidelity(b, phased) == pytest.approx(1.0, abs=1e-15)


def test_sensing_closed_forms():
    assert sensing_demo(3, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert sensing_demo(3, np.pi / 6) == pytest.approx(0.0, abs=1e-15)
    assert sensing_demo(4, np.pi / 16) == pytest.approx(np.cos(np.pi / 4), abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_sensing_identity_random_phases(n):
    for theta in np.random.default_rng(n).uniform(-np.pi, np.pi, 5):
        assert abs(sensing_demo(n, theta) - np.cos(n * theta)) <= 1e-12


@pytest.mark.parametrize("n", [2, 4, 6])
def test_free_evolution_phase_immunity(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        f = free_evolution_fidelity(n, rng.uniform(0.5, 1.5, n - 1), rng.uniform(0, 20), rng.uniform(0, 1))
        assert abs(1.0 - f) < 1e-12


def test_ghz_state_parity():
    s = ghz_state(3, 0.0)
    assert s.expectation(task_operator("measure-init", 3)) == pytest.approx(1.0)


def test_task_states():
    a, b = task_states("cluster", 3)
    assert a.n == b.n == 3
    with pytest.raises(DomainError):
        task_states("measure", 3)


@pytest.fixture(scope="module")
def cluster3_pulse():
    prob = ControlProblem.for_task("cluster", 3)
    return minimize(prob, OptimizerConfig(max_iterations=500, tolerance=1e-6, seed=0)).best


def test_robustness_zero_noise(cluster3_pulse):
    rep = robustness_report(cluster3_pulse, "cluster", 0.0, samples=5, seed=0)
    assert np.all(rep.infidelities == rep.noiseless)
    assert rep.std == 0.0
    assert rep.noiseless < 1e-5


def test_robustness_report_files(tmp_path, cluster3_pulse):
    rep = robustness_report(cluster3_pulse, "cluster", 0.05, samples=20, seed=3, kind="parasitic")
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sample_index,offset_1,offset_2,infidelity"
    assert len(lines) == 21
    again = robustness_report(cluster3_pulse, "cluster", 0.05, samples=20, seed=3, kind="parasitic")
    assert again.infidelities.tobytes() == rep.infidelities.tobytes()
    with pytest.raises(DomainError):
        robustness_report(cluster3_pulse, "cluster", 0.05, samples=2, kind="other")


def test_sensing_with_mapping_pulse():
    prob = ControlProblem.for_task("measure", 3)
    run = minimize(prob, OptimizerConfig(max_iterations=400, tolerance=1e-6, seed=0))
    J = prob.infidelity(run.best)
    for theta in (0.0, 0.3, np.pi / 6):
        val = sensing_demo(3, theta, run.best, tolerance=10 * np.sqrt(J) + 1e-9)
        assert abs(val - np.cos(3 * theta)) <= 10 * np.sqrt(J) + 1e-9
    with pytest.raises(NumericalError):
        sensing_demo(3, 0.3, PulseSchedule.zero(3, 3, 1.0), tolerance=1e-3)


def test_eigenstate_transport_correlates():
    prob = ControlProblem.for_task("cluster", 3)
    J, S = [], []
    for iters in (0, 3, 6, 10, 15, 25, 40, 80):
        pulse = minimize(prob, OptimizerConfig(max_iterations=iters, tolerance=1e-8, seed=2)).final
        J.append(prob.infidelity(pulse))
        S.append(transported_state_infidelity(pulse, "cluster"))
    rho = spearmanr(J, S).statistic
    c = max(s / j for s, j in zip(S, J))
    print(f"eigenstate transport: spearman {rho:.3f}, fitted c = {c:.3g}")
    assert rho > 0.8
