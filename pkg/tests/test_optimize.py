import csv

import numpy as np
import pytest
import scipy.fft

from iqc.dynamics import PulseSchedule
from iqc.errors import DomainError
from iqc.objective import ControlProblem, NoiseModel
from iqc.optimize import (
    BUDGET,
    CONVERGED,
    HISTORY_COLUMNS,
    OptimizerConfig,
    initial_pulse,
    minimal_duration,
    minimize,
    smooth_and_restart,
    validate,
)


@pytest.fixture(scope="module")
def cluster3():
    return ControlProblem.for_task("cluster", 3)


@pytest.fixture(scope="module")
def noiseless_run(cluster3):
    return minimize(cluster3, OptimizerConfig(max_iterations=2000, tolerance=1e-4, seed=0))


@pytest.fixture(scope="module")
def noisy_cfg():
    return OptimizerConfig(max_iterations=20, resample_every=5, validate_every=5, train_samples=8,
                           validate_samples=16, final_validate_samples=32, noise_level=0.05, seed=3)


@pytest.fixture(scope="module")
def noisy_run(cluster3, noisy_cfg):
    return minimize(cluster3, noisy_cfg)


def test_config_validation():
    with pytest.raises(DomainError):
        OptimizerConfig(tolerance=0)
    with pytest.raises(DomainError):
        OptimizerConfig(train_samples=0)
    with pytest.raises(DomainError):
        OptimizerConfig(initial_duration=-1.0)
    cfg = OptimizerConfig()
    assert cfg.bins_for(4) == 40 and cfg.duration_for(4) == pytest.approx(2 * np.pi)


def test_noiseless_cluster_converges(noiseless_run, cluster3):
    assert noiseless_run.status == CONVERGED
    assert noiseless_run.iterations <= 2000
    assert cluster3.infidelity(noiseless_run.best) <= 1e-4
    assert noiseless_run.best_validated.mean <= 1e-4


def test_descent_is_monotone_without_noise(noiseless_run):
    obj = [h["objective"] for h in noiseless_run.history]
    assert all(b <= a for a, b in zip(obj, obj[1:]))


def test_duration_stays_positive(noiseless_run, noisy_run):
    for run in (noiseless_run, noisy_run):
        assert all(h["duration"] > 0 for h in run.history)
        assert run.best.duration > 0


def test_zero_iteration_budget_returns_initial(cluster3):
    cfg = OptimizerConfig(max_iterations=0, seed=5)
    run = minimize(cluster3, cfg)
    start = initial_pulse(cluster3, cfg)
    assert run.iterations == 0 and run.status == BUDGET
    np.testing.assert_array_equal(run.best.amplitudes, start.amplitudes)
    assert run.history[0]["objective"] == cluster3.infidelity(start)


def test_same_seed_identical_history(cluster3, noisy_cfg, noisy_run):
    again = minimize(cluster3, noisy_cfg)
    assert again.history == noisy_run.history
    assert again.best.amplitudes.tobytes() == noisy_run.best.amplitudes.tobytes()


def test_resampling_schedule(noisy_run, noisy_cfg):
    seeds = [h["train_seed"] for h in noisy_run.history]
    for it in range(1, len(seeds)):
        changed = seeds[it] != seeds[it - 1]
        assert changed == (it % noisy_cfg.resample_every == 0)


def test_no_train_validation_leakage(noisy_run):
    led = noisy_run.seed_ledger
    assert not set(led["train"]) & set(led["validate"])
    assert len(set(led["validate"])) == len(led["validate"])


def test_best_selected_by_validation(cluster3):
    cfg = OptimizerConfig(max_iterations=30, resample_every=10, validate_every=10, train_samples=8,
                          validate_samples=16, final_validate_samples=16, noise_level=0.05, seed=4)
    run = minimize(cluster3, cfg)
    scored = [h["validated_mean"] for h in run.history if h["validated_mean"] == h["validated_mean"]]
    assert run.best_validated.mean == pytest.approx(min(scored))


def test_final_validation_uses_more_samples(noisy_run, noisy_cfg):
    assert noisy_run.best_validated.samples == noisy_cfg.final_validate_samples


def test_history_csv(tmp_path, noisy_run):
    path = tmp_path / "h.csv"
    noisy_run.write_history(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == len(noisy_run.history) + 1


def test_smooth_cutoff_one_unchanged():
    p = PulseSchedule.random(3, 20, 2.0, 0)
    assert smooth_and_restart(p, 1.0).amplitudes.tobytes() == p.amplitudes.tobytes()


def test_smooth_constant_rows_unchanged():
    amp = np.tile(np.array([0.3, -0.2, 0.5, 1, 1, 0.7, -0.1])[:, None], (1, 10))
    p = PulseSchedule(3, amp, 2.0)
    np.testing.assert_allclose(smooth_and_restart(p, 0.1).amplitudes, amp, atol=1e-14)


def test_smooth_removes_high_frequencies():
    p = PulseSchedule.random(3, 20, 2.0, 1)
    s = smooth_and_restart(p, 0.3)
    spec = scipy.fft.dct(s.amplitudes[[0, 1, 2, 5, 6]], type=2, norm="ortho", axis=1)
    assert np.abs(spec[:, 6:]).max() <= 1e-14
    np.testing.assert_array_equal(s.amplitudes[3:5], p.amplitudes[3:5])
    with pytest.raises(DomainError):
        smooth_and_restart(p, 0.0)


def test_validate_level_zero(cluster3, noiseless_run):
    v = validate(noiseless_run.best, cluster3, NoiseModel(3, 0.0), 50, 1)
    assert v.std == 0
    assert v.mean == pytest.approx(cluster3.infidelity(noiseless_run.best), abs=1e-15)
    assert v.to_dict()["histogram"]["counts"] == [50]


def test_validate_deterministic(cluster3, noiseless_run):
    a = validate(noiseless_run.best, cluster3, 0.05, 100, 9)
    b = validate(noiseless_run.best, cluster3, 0.05, 100, 9)
    assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(DomainError):
        validate(noiseless_run.best, cluster3, 0.05, 0, 9)


def test_robust_beats_nonrobust_small(cluster3, noiseless_run):
    cfg = OptimizerConfig(max_iterations=60, noise_level=0.05, train_samples=20, validate_samples=50,
                          final_validate_samples=200, seed=1, tolerance=1e-6)
    robust = minimize(cluster3, cfg, initial=noiseless_run.best)
    a = validate(robust.best, cluster3, 0.05, 500, 123).mean
    b = validate(noiseless_run.best, cluster3, 0.05, 500, 123).mean
    assert a <= b


def test_fixed_duration_run_keeps_duration(cluster3):
    cfg = OptimizerConfig(max_iterations=5, optimize_duration=False, initial_duration=3.0)
    run = minimize(cluster3, cfg)
    assert all(h["duration"] == 3.0 for h in run.history)


def test_minimal_duration_brackets():
    prob = ControlProblem.for_task("cluster", 2)
    cfg = OptimizerConfig(max_iterations=100, tolerance=1e-3)
    res = minimal_duration(prob, cfg, 0.2, 3.0, resolution=0.2, seeds=(0,))
    assert 0.2 <= res.duration <= 3.0
    assert res.run.status == CONVERGED
    assert any(ok for _, ok, _ in res.probes)
    with pytest.raises(DomainError):
        minimal_duration(prob, cfg, 2.0, 1.0)
