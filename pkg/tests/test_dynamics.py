import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from iqc.algebra import OperatorVector, build_basis, control_terms, encode, structure_constants, task_operator
from iqc.dynamics import (
    PulseSchedule,
    ensemble_finals,
    ensemble_gradients,
    expm_apply,
    gradient,
    propagate,
    propagate_backward,
)
from iqc.errors import DomainError, NumericalError
from iqc.pauli import PauliString, to_dense
from iqc.verify import conjugated_coefficients, unitary


def setup(n, frame="standard"):
    b = build_basis(n, frame)
    return b, structure_constants(b, control_terms(n, frame))


def unit(b, word):
    return encode(PauliString.from_label(word), b)


def infid(a0, aT, pulse, gens):
    f = propagate(a0, pulse, gens).final.coeffs
    return 1 - f @ aT.coeffs / (aT.coeffs @ aT.coeffs)


def fd_gradient(a0, aT, pulse, gens, eps=1e-6):
    out = np.zeros((pulse.channels, pulse.bins))
    for c in range(pulse.channels):
        for q in range(pulse.bins):
            A = np.array(pulse.amplitudes)
            A[c, q] += eps
            fp = infid(a0, aT, pulse.with_amplitudes(A), gens)
            A[c, q] -= 2 * eps
            fm = infid(a0, aT, pulse.with_amplitudes(A), gens)
            out[c, q] = (fp - fm) / (2 * eps)
    return out


def field_pulse(n, f, duration, bins=1):
    amp = np.zeros((2 * n + 1, bins))
    amp[0] = f
    return PulseSchedule(n, amp, duration)


def test_analytic_field_rotation():
    b, gens = setup(2)
    f = 0.7
    # X(t) = cos(2 f t) X + sin(2 f t) Y
    out = propagate(unit(b, "XI"), field_pulse(2, f, np.pi / (8 * f)), gens).final
    assert out.component("XI") == pytest.approx(1 / np.sqrt(2), abs=1e-14)
    assert out.component("YI") == pytest.approx(1 / np.sqrt(2), abs=1e-14)
    out = propagate(unit(b, "XI"), field_pulse(2, f, np.pi / (4 * f)), gens).final
    assert out.component("XI") == pytest.approx(0.0, abs=1e-14)
    assert out.component("YI") == pytest.approx(1.0, abs=1e-14)


def test_zero_pulse_is_identity():
    b, gens = setup(3)
    v = encode(task_operator("cluster-target", 3), b)
    out = propagate(v, PulseSchedule.zero(3, 5, 2.0), gens, snapshots=True)
    assert all(np.array_equal(s.coeffs, v.coeffs) for s in out.snapshots)
    back = propagate_backward(v, PulseSchedule.zero(3, 5, 2.0), gens)
    assert all(np.array_equal(s.coeffs, v.coeffs) for s in back)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_oracle_equivalence_random_pulses(n):
    b, gens = setup(n)
    rng = np.random.default_rng(n)
    init = encode(task_operator("cluster-init", n), b)
    for _ in range(3):
        pulse = PulseSchedule.random(n, 10, 2.5, rng)
        noise = rng.uniform(-0.05, 0.05, n - 1)
        got = propagate(init, pulse, gens, noise=noise).final.coeffs
        want = conjugated_coefficients(init.to_pauli_sum(), pulse, b, noise=noise)
        assert np.abs(got - want).max() <= 1e-8


def test_oracle_equivalence_rotated_frame():
    n = 3
    b, gens = setup(n, "rotated")
    rng = np.random.default_rng(1)
    init = encode(task_operator("ghz-init", n), b)
    pulse = PulseSchedule.random(n, 10, 2.0, rng)
    got = propagate(init, pulse, gens).final.coeffs
    want = conjugated_coefficients(init.to_pauli_sum(), pulse, b)
    assert np.abs(got - want).max() <= 1e-8


def test_backward_single_bin_opposite_sense():
    b, gens = setup(2)
    f, t = 0.7, 0.4
    pulse = field_pulse(2, f, t)
    fwd = propagate(unit(b, "XI"), pulse, gens).final
    bwd = propagate_backward(unit(b, "XI"), pulse, gens)[-1]
    assert fwd.component("YI") == pytest.approx(np.sin(2 * f * t), abs=1e-14)
    assert bwd.component("YI") == pytest.approx(-np.sin(2 * f * t), abs=1e-14)
    assert bwd.component("XI") == pytest.approx(np.cos(2 * f * t), abs=1e-14)


def test_backward_matches_dense_conjugation():
    n = 3
    b, gens = setup(n)
    rng = np.random.default_rng(7)
    pulse = PulseSchedule.random(n, 6, 1.7, rng)
    z = unit(b, "IZI")
    traj = propagate_backward(z, pulse, gens)
    Zd = to_dense(z.to_pauli_sum())
    for m in range(pulse.bins + 1):
        U = unitary(PulseSchedule(n, pulse.amplitudes[:, :m], m * pulse.dt)) if m else np.eye(8)
        M = U.conj().T @ Zd @ U
        want = np.array([np.trace(to_dense(w) @ M).real / 8 for w in b.elements])
        assert np.abs(traj[m].coeffs - want).max() <= 1e-8


def test_backward_forward_duality():
    n = 4
    b, gens = setup(n)
    rng = np.random.default_rng(3)
    pulse = PulseSchedule.random(n, 12, 3.0, rng)
    v = encode(task_operator("cluster-init", n), b)
    back = propagate_backward(v, pulse, gens)[-1]
    again = propagate(back, pulse, gens).final
    assert np.abs(again.coeffs - v.coeffs).max() <= 1e-10


def test_composition_of_split_schedules():
    n = 3
    b, gens = setup(n)
    rng = np.random.default_rng(11)
    pulse = PulseSchedule.random(n, 16, 3.0, rng)
    v = encode(task_operator("cluster-init", n), b)
    first, second = pulse.split(7)
    two = propagate(propagate(v, first, gens).final, second, gens).final
    one = propagate(v, pulse, gens).final
    assert np.abs(one.coeffs - two.coeffs).max() <= 1e-12


def test_norm_conservation_long_schedule():
    n = 2
    b, gens = setup(n)
    rng = np.random.default_rng(5)
    pulse = PulseSchedule.random(n, 10_000, 200.0, rng)
    v = encode(task_operator("cluster-target", n), b)
    traj = propagate(v, pulse, gens, snapshots=True)
    norms = np.linalg.norm(np.stack([s.coeffs for s in traj.snapshots]), axis=1)
    assert np.abs(norms - v.norm).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.floats(0.1, 6.0))
def test_norm_conservation_property(seed, bins, duration):
    n = 3
    b, gens = _GENS3
    rng = np.random.default_rng(seed)
    pulse = PulseSchedule.random(n, bins, duration, rng, scale=3.0)
    v = OperatorVector(rng.normal(size=b.dim), b)
    out = propagate(v, pulse, gens, noise=rng.uniform(-0.1, 0.1, n - 1)).final
    assert abs(out.norm - v.norm) < 1e-10 * max(1.0, v.norm)


_GENS3 = setup(3)


def test_expm_apply_examples():
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal(expm_apply(np.zeros((2, 2)), 0.5, v), v)
    w, dt = 1.3, 0.7
    K = np.array([[0.0, -w], [w, 0.0]])
    c, s = np.cos(w * dt), np.sin(w * dt)
    np.testing.assert_allclose(expm_apply(K, dt, v), np.array([[c, -s], [s, c]]) @ v, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_expm_apply_random_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(28, 28))
    K = G - G.T
    v = rng.normal(size=28)
    evals, evecs = np.linalg.eig(K)
    ref = (evecs @ np.diag(np.exp(evals * 0.9)) @ np.linalg.inv(evecs)).real @ v
    got = expm_apply(K, 0.9, v)
    assert np.abs(got - ref).max() <= 1e-11 * np.abs(ref).max()
    assert abs(np.linalg.norm(got) - np.linalg.norm(v)) <= 1e-12 * np.linalg.norm(v)
    np.testing.assert_allclose(got, sla.expm(0.9 * K) @ v, rtol=0, atol=1e-12 * np.abs(v).max() * 10)


def test_expm_apply_sparse_paths(monkeypatch):
    import iqc.dynamics as dyn

    rng = np.random.default_rng(0)
    G = sp.random(60, 60, density=0.05, random_state=1)
    K = (G - G.T).tocsr()
    v = rng.normal(size=60)
    ref = sla.expm(0.5 * K.toarray()) @ v
    np.testing.assert_allclose(expm_apply(K, 0.5, v), ref, atol=1e-12)
    monkeypatch.setattr(dyn, "SPARSE_THRESHOLD", 10)
    np.testing.assert_allclose(expm_apply(K, 0.5, v), ref, atol=1e-10)


def test_expm_apply_nonfinite():
    with pytest.raises(NumericalError):
        expm_apply(np.array([[0.0, np.inf], [-np.inf, 0.0]]), 1.0, np.ones(2))


def test_pulse_schedule_validation():
    with pytest.raises(DomainError):
        PulseSchedule(3, np.zeros((6, 4)), 1.0)
    with pytest.raises(DomainError):
        PulseSchedule(3, np.zeros((7, 4)), 0.0)
    with pytest.raises(NumericalError):
        PulseSchedule(3, np.full((7, 4), np.nan), 1.0)
    p = PulseSchedule.random(3, 4, 1.0, 0)
    with pytest.raises(ValueError):
        p.amplitudes[0, 0] = 1.0


def test_random_pulse_layout():
    p = PulseSchedule.random(4, 20, 3.0, 0, coupling=1.0)
    assert np.all(p.amplitudes[4:7] == 1.0)
    assert np.all(np.abs(p.amplitudes[[0, 1, 2, 3, 7, 8]]) <= 1.0)


def test_channel_count_mismatch():
    b, gens = setup(3)
    with pytest.raises(DomainError):
        propagate(encode(task_operator("cluster-init", 3), b), PulseSchedule.zero(4, 3, 1.0), gens)


def test_gradient_zero_at_exact_target():
    n = 3
    b, gens = setup(n)
    rng = np.random.default_rng(2)
    pulse = PulseSchedule.random(n, 8, 2.0, rng)
    init = encode(task_operator("cluster-init", n), b)
    target = propagate(init, pulse, gens).final
    for order in (1, 2, 4):
        g = gradient(init, target, pulse, gens, order=order)
        assert np.abs(g).max() < 1e-13


def test_gradient_second_order_convergence():
    n = 3
    b, gens = setup(n)
    init = encode(task_operator("cluster-init", n), b)
    target = encode(task_operator("cluster-target", n), b)
    base = PulseSchedule.random(n, 6, 1.5, 4)
    errs = []
    for r in (1, 2):
        p = base.refined(r)
        fd = fd_gradient(init, target, p, gens)
        errs.append(np.linalg.norm(gradient(init, target, p, gens) - fd) / np.linalg.norm(fd))
    assert errs[0] / errs[1] >= 3.9


def test_gradient_higher_order_approaches_exact():
    n = 3
    b, gens = setup(n)
    init = encode(task_operator("cluster-init", n), b)
    target = encode(task_operator("cluster-target", n), b)
    p = PulseSchedule.random(n, 6, 1.5, 9)
    fd = fd_gradient(init, target, p, gens)
    rel = [np.linalg.norm(gradient(init, target, p, gens, order=o) - fd) / np.linalg.norm(fd)
           for o in (2, 4, 10)]
    assert rel[0] > rel[1] > rel[2]
    assert rel[2] < 1e-7


def test_ensemble_kernels_independent_of_batch_and_workers():
    n = 3
    b, gens = setup(n)
    init = encode(task_operator("cluster-init", n), b)
    target = encode(task_operator("cluster-target", n), b)
    rng = np.random.default_rng(0)
    pulse = PulseSchedule.random(n, 9, 2.0, rng)
    off = rng.uniform(-0.05, 0.05, (7, n - 1))
    full = ensemble_finals(init, pulse, gens, off)
    assert np.array_equal(full[3:5], ensemble_finals(init, pulse, gens, off[3:5]))
    J1, g1 = ensemble_gradients(init, target, pulse, gens, off, workers=1)
    J3, g3 = ensemble_gradients(init, target, pulse, gens, off, workers=3)
    assert np.array_equal(J1, J3) and np.array_equal(g1, g3)
    single = propagate(init, pulse, gens, noise=off[2]).final.coeffs
    assert np.array_equal(single, full[2])


def test_refined_and_split_helpers():
    p = PulseSchedule.random(2, 4, 2.0, 0)
    r = p.refined(3)
    assert r.bins == 12 and r.duration == p.duration
    a, c = p.split(1)
    assert a.bins == 1 and c.bins == 3 and a.duration + c.duration == pytest.approx(2.0)
    with pytest.raises(DomainError):
        p.split(4)
