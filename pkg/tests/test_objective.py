import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqc.algebra import OperatorVector, build_basis
from iqc.dynamics import PulseSchedule, gradient
from iqc.errors import DomainError
from iqc.objective import (
    ControlProblem,
    EnsembleSample,
    NoiseModel,
    ensemble_infidelity,
    infidelity,
    sample_ensemble,
)
from iqc.optimize import validate


@pytest.fixture(scope="module")
def cluster3():
    return ControlProblem.for_task("cluster", 3)


def test_infidelity_examples(cluster3):
    t = cluster3.target
    assert infidelity(t, t) == 0
    assert infidelity(cluster3.init, t) == pytest.approx(1.0)  # disjoint supports
    assert infidelity(OperatorVector(-t.coeffs, t.basis), t) == pytest.approx(2.0)


def test_infidelity_zero_target_and_basis_mismatch(cluster3):
    b = cluster3.basis
    with pytest.raises(DomainError):
        infidelity(cluster3.init, OperatorVector(np.zeros(b.dim), b))
    other = build_basis(3, "rotated")
    with pytest.raises(DomainError):
        infidelity(OperatorVector(np.ones(other.dim), other), cluster3.target)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_infidelity_joint_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, t = rng.normal(size=(2, 10))
    assert infidelity(c * a, c * t) == pytest.approx(infidelity(a, t), rel=1e-12, abs=1e-12)


def test_noise_model_validation():
    with pytest.raises(DomainError):
        NoiseModel(3, -0.1)
    with pytest.raises(DomainError):
        NoiseModel(3, 0.05, "gaussian")
    assert NoiseModel(5, 0.05).dims == 4


def test_sample_level_zero_is_all_zero():
    s = sample_ensemble(NoiseModel(4, 0.0), 20, 3)
    assert s.size == 20 and not s.members.any()


def test_sample_reproducible_and_in_hypercube():
    m = NoiseModel(5, 0.05)
    a, b = sample_ensemble(m, 60, 11), sample_ensemble(m, 60, 11)
    assert a.members.tobytes() == b.members.tobytes()
    assert np.abs(a.members).max() <= 0.05
    assert not np.array_equal(a.members, sample_ensemble(m, 60, 12).members)
    with pytest.raises(DomainError):
        sample_ensemble(m, 0, 1)


def test_sample_statistics():
    level = 0.05
    s = sample_ensemble(NoiseModel(6, level), 1000, 2024)
    sigma = level / np.sqrt(3) / np.sqrt(1000)
    assert np.all(np.abs(s.members.mean(axis=0)) <= 3 * sigma)


def test_single_zero_member_equals_plain(cluster3):
    pulse = PulseSchedule.random(3, 8, 2.0, 1)
    ens = EnsembleSample(np.zeros((1, 2)), None, 0.0)
    res = ensemble_infidelity(pulse, ens, cluster3)
    assert res.mean == cluster3.infidelity(pulse)
    np.testing.assert_array_equal(res.gradient, gradient(cluster3.init, cluster3.target, pulse, cluster3.gens))


def test_duplicated_member_same_mean(cluster3):
    pulse = PulseSchedule.random(3, 8, 2.0, 2)
    one = EnsembleSample(np.array([[0.02, -0.03]]), None, 0.05)
    two = EnsembleSample(np.array([[0.02, -0.03]] * 2), None, 0.05)
    a, b = ensemble_infidelity(pulse, one, cluster3), ensemble_infidelity(pulse, two, cluster3)
    assert a.mean == b.mean
    np.testing.assert_array_equal(a.gradient, b.gradient)


def test_mean_matches_loop_of_single_calls(cluster3):
    pulse = PulseSchedule.random(3, 9, 2.4, 3)
    ens = sample_ensemble(NoiseModel(3, 0.05), 5, 9)
    res = ensemble_infidelity(pulse, ens, cluster3)
    loop = [cluster3.infidelity(pulse, noise=m) for m in ens.members]
    assert abs(res.mean - np.mean(loop)) <= 1e-15
    grads = [gradient(cluster3.init, cluster3.target, pulse, cluster3.gens, noise=m) for m in ens.members]
    assert np.abs(res.gradient - np.mean(grads, axis=0)).max() <= 1e-15
    nograd = ensemble_infidelity(pulse, ens, cluster3, with_gradient=False)
    assert abs(nograd.mean - res.mean) <= 1e-15 and nograd.gradient is None


def test_worker_count_does_not_change_result(cluster3):
    pulse = PulseSchedule.random(3, 9, 2.4, 4)
    ens = sample_ensemble(NoiseModel(3, 0.05), 13, 1)
    a = ensemble_infidelity(pulse, ens, cluster3, workers=1)
    b = ensemble_infidelity(pulse, ens, cluster3, workers=4)
    assert a.mean == b.mean
    np.testing.assert_array_equal(a.gradient, b.gradient)


def test_offset_length_checked(cluster3):
    pulse = PulseSchedule.random(3, 4, 1.0, 0)
    with pytest.raises(DomainError):
        ensemble_infidelity(pulse, EnsembleSample(np.zeros((2, 3)), None, 0.0), cluster3)


def test_unknown_task():
    with pytest.raises(DomainError):
        ControlProblem.for_task("teleport", 3)


def _tuned_pulse(problem):
    from iqc.optimize import OptimizerConfig, minimize

    return minimize(problem, OptimizerConfig(max_iterations=300, tolerance=1e-5, seed=0)).best


@pytest.fixture(scope="module")
def tuned(cluster3):
    return _tuned_pulse(cluster3)


def test_monotone_sensitivity_to_noise_level(cluster3, tuned):
    levels = np.linspace(0, 0.05, 6)
    means = [validate(tuned, cluster3, NoiseModel(3, lv), 1000, 77).mean for lv in levels]
    inversions = sum(b < a for a, b in zip(means, means[1:]))
    assert inversions <= 1
    assert means[-1] > means[0]


def test_small_and_large_validation_agree(cluster3, tuned):
    small = validate(tuned, cluster3, NoiseModel(3, 0.05), 100, 5)
    large = validate(tuned, cluster3, NoiseModel(3, 0.05), 1000, 6)
    se = np.hypot(small.stderr, large.stderr)
    assert abs(small.mean - large.mean) <= 2 * se
