"""Outer optimization loop: L-BFGS on amplitudes and duration.

The training ensemble is redrawn every ``resample_every`` iterations and
curvature memory is dropped at the same time.  Candidate pulses are
scored on fresh validation draws and the best one is kept.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft

from .dynamics import PulseSchedule, driven_rows
from .errors import DomainError, NumericalError
from .objective import ControlProblem, EnsembleSample, NoiseModel, ensemble_infidelity, sample_ensemble

log = logging.getLogger(__name__)

CONVERGED = "converged"
BUDGET = "budget-exhausted"
STALLED = "stalled"

HISTORY_COLUMNS = ("iteration", "objective", "grad_norm", "duration", "train_seed",
                   "validated_mean", "validated_std")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 1000
    resample_every: int = 50
    train_samples: int = 60
    validate_every: int = 50
    validate_samples: int = 100
    final_validate_samples: int = 1000
    bins: int | None = None  # 10 n when unset
    initial_duration: float | None = None  # n pi / 2 when unset
    optimize_duration: bool = True
    duration_fd_step: float = 1e-5
    amplitude_scale: float = 1.0
    tolerance: float = 1e-4
    noise_level: float = 0.0
    seed: int = 0
    gradient_order: int = 2
    memory: int = 10
    stall_gradient: float = 1e-12
    workers: int = 1

    def __post_init__(self):
        counts = ("max_iterations", "resample_every", "train_samples", "validate_every",
                  "validate_samples", "final_validate_samples", "memory", "workers")
        for name in counts:
            v = getattr(self, name)
            if name == "max_iterations" and v == 0:
                continue
            if not (isinstance(v, (int, np.integer)) and v > 0):
                raise DomainError(f"{name} must be a positive integer, got {v!r}")
        if self.bins is not None and self.bins < 1:
            raise DomainError("bins must be positive")
        if self.initial_duration is not None and not self.initial_duration > 0:
            raise DomainError("initial_duration must be positive")
        if not 0 < self.tolerance < 1:
            raise DomainError("tolerance must lie in (0, 1)")
        if self.noise_level < 0:
            raise DomainError("noise_level must be non-negative")

    def bins_for(self, n: int) -> int:
        return self.bins if self.bins is not None else 10 * n

    def duration_for(self, n: int) -> float:
        return self.initial_duration if self.initial_duration is not None else n * math.pi / 2


@dataclass(frozen=True)
class ValidationSummary:
    mean: float
    std: float
    min: float
    max: float
    samples: int
    seed: int | None
    values: np.ndarray = field(repr=False)
    histogram: tuple[np.ndarray, np.ndarray] = field(repr=False)

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.samples)

    def to_dict(self) -> dict:
        counts, edges = self.histogram
        return {"mean": self.mean, "std": self.std, "stderr": self.stderr, "min": self.min,
                "max": self.max, "samples": self.samples, "seed": self.seed,
                "histogram": {"counts": [int(c) for c in counts], "edges": [float(e) for e in edges]}}


def _summary(values: np.ndarray, seed) -> ValidationSummary:
    values = np.asarray(values, dtype=float)
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    if np.ptp(values) > 0:
        hist = np.histogram(values, bins=20)
    else:
        hist = (np.array([len(values)]), np.array([values[0], values[0]]))
    return ValidationSummary(float(np.mean(values)), std, float(values.min()), float(values.max()),
                             len(values), seed, values, hist)


def validate(pulse: PulseSchedule, problem: ControlProblem, noise: NoiseModel | float, samples: int,
             seed, workers: int = 1) -> ValidationSummary:
    """Infidelity distribution over ``samples`` fresh coupling-noise draws."""
    if samples < 1:
        raise DomainError("need at least one validation sample")
    if not isinstance(noise, NoiseModel):
        noise = NoiseModel(problem.n, float(noise))
    ens = sample_ensemble(noise, samples, seed)
    res = ensemble_infidelity(pulse, ens, problem, with_gradient=False, workers=workers)
    return _summary(res.members, seed)


def smooth_and_restart(pulse: PulseSchedule, cutoff: float) -> PulseSchedule:
    """Low-pass every driven channel by truncating its orthonormal DCT-II.

    Keeps the lowest ``max(1, floor(cutoff * bins))`` coefficients.
    Coupling rows are left alone.
    """
    if not 0 < cutoff <= 1:
        raise DomainError(f"cutoff must lie in (0, 1], got {cutoff}")
    M = pulse.bins
    keep = max(1, int(math.floor(cutoff * M + 1e-9)))
    if keep >= M:
        return pulse
    amp = np.array(pulse.amplitudes)
    rows = driven_rows(pulse.n)
    spec = scipy.fft.dct(amp[rows], type=2, norm="ortho", axis=1)
    spec[:, keep:] = 0.0
    amp[rows] = scipy.fft.idct(spec, type=2, norm="ortho", axis=1)
    return pulse.with_amplitudes(amp)


def _child_seed(root: int, stream: int, index: int) -> int:
    ss = np.random.SeedSequence(root, spawn_key=(stream, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


_TRAIN, _VALID, _INIT = 0, 1, 2


class Objective:
    """Training objective on the flattened parameters ``[driven amps, duration]``.

    Optionally adds a weighted parasitic constraint.
    """

    def __init__(self, problem: ControlProblem, config: OptimizerConfig, template: PulseSchedule,
                 constraint=None):
        self.problem = problem
        self.config = config
        self.template = template
        self.rows = driven_rows(problem.n)
        self.constraint = constraint  # (spec, eta, weight, substeps) or None

    def pack(self, pulse: PulseSchedule) -> np.ndarray:
        x = pulse.amplitudes[self.rows].ravel()
        return np.r_[x, pulse.duration] if self.config.optimize_duration else x.copy()

    def unpack(self, x: np.ndarray) -> PulseSchedule:
        k = len(self.rows) * self.template.bins
        amp = np.array(self.template.amplitudes)
        amp[self.rows] = x[:k].reshape(len(self.rows), -1)
        T = float(x[k]) if self.config.optimize_duration else self.template.duration
        return PulseSchedule(self.template.n, amp, T)

    def _parts(self, pulse, ensemble, grad: bool):
        res = ensemble_infidelity(pulse, ensemble, self.problem, with_gradient=grad,
                                  workers=self.config.workers, order=self.config.gradient_order)
        f, g = res.mean, res.gradient
        if self.constraint is not None:
            from .perturb import constraint, constraint_gradient
            spec, eta, w, sub = self.constraint
            C = constraint(pulse, self.problem.gens, spec, eta, sub).value
            f = f + w * C
            if grad:
                g = g + w * constraint_gradient(pulse, self.problem.gens, spec, eta, substeps=sub)
        return f, g

    def value(self, x: np.ndarray, ensemble) -> float:
        if self.config.optimize_duration and not x[-1] > 0:
            return math.inf
        f, _ = self._parts(self.unpack(x), ensemble, grad=False)
        return f

    def value_and_grad(self, x: np.ndarray, ensemble) -> tuple[float, np.ndarray]:
        pulse = self.unpack(x)
        f, g = self._parts(pulse, ensemble, grad=True)
        gx = g[self.rows].ravel()
        if self.config.optimize_duration:
            h = self.config.duration_fd_step * pulse.duration
            fp = self.value(np.r_[x[:-1], x[-1] + h], ensemble)
            fm = self.value(np.r_[x[:-1], x[-1] - h], ensemble)
            gx = np.r_[gx, (fp - fm) / (2 * h)]
        if not (np.isfinite(f) and np.all(np.isfinite(gx))):
            raise NumericalError(f"non-finite objective {f} at duration {pulse.duration}")
        return f, gx


def _two_loop(g: np.ndarray, mem: deque) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


@dataclass
class OptimizationRun:
    history: list[dict]
    best: PulseSchedule
    best_validated: ValidationSummary | None
    status: str
    final: PulseSchedule
    seed_ledger: dict[str, list[int]]
    config: OptimizerConfig

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.history:
                w.writerow([_csv_value(row[c]) for c in HISTORY_COLUMNS])


def _csv_value(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def initial_pulse(problem: ControlProblem, config: OptimizerConfig) -> PulseSchedule:
    n = problem.n
    rng = np.random.default_rng(_child_seed(config.seed, _INIT, 0))
    return PulseSchedule.random(n, config.bins_for(n), config.duration_for(n), rng,
                                coupling=problem.coupling, scale=config.amplitude_scale)


def minimize(problem: ControlProblem, config: OptimizerConfig, initial: PulseSchedule | None = None,
             constraint=None, validator=None) -> OptimizationRun:
    """Minimize the ensemble-mean infidelity (plus an optional constraint term).

    ``constraint`` is ``(spec, eta, weight, substeps)``.  ``validator`` maps
    ``(pulse, seed) -> ValidationSummary`` and defaults to an ensemble
    validation at the configured noise level.
    """
    pulse0 = initial if initial is not None else initial_pulse(problem, config)
    obj = Objective(problem, config, pulse0, constraint)
    noise = NoiseModel(problem.n, config.noise_level)
    noisy = config.noise_level > 0
    ledger = {"train": [], "validate": []}

    def train_ensemble(k: int) -> tuple[EnsembleSample | None, int]:
        seed = _child_seed(config.seed, _TRAIN, k)
        ledger["train"].append(seed)
        if not noisy:
            return None, seed
        return sample_ensemble(noise, config.train_samples, seed), seed

    def default_validator(pulse, seed, samples):
        if not noisy and constraint is None:
            v = problem.infidelity(pulse)
            return _summary(np.array([v]), seed)
        if constraint is None:
            return validate(pulse, problem, noise, samples, seed, config.workers)
        f, _ = obj._parts(pulse, None, grad=False)
        return _summary(np.array([f]), seed)

    vfun = validator or default_validator
    vcount = [0]

    def run_validation(pulse, samples):
        seed = _child_seed(config.seed, _VALID, vcount[0])
        vcount[0] += 1
        ledger["validate"].append(seed)
        return vfun(pulse, seed, samples)

    x = obj.pack(pulse0)
    ensemble, tseed = train_ensemble(0)
    f, g = obj.value_and_grad(x, ensemble)
    mem: deque = deque(maxlen=config.memory)
    history = []
    best_x, best_v = x.copy(), None
    status = BUDGET

    def record(it, f, g, vs):
        history.append({"iteration": it, "objective": float(f), "grad_norm": float(np.linalg.norm(g)),
                        "duration": float(obj.unpack(x).duration), "train_seed": tseed,
                        "validated_mean": vs.mean if vs else math.nan,
                        "validated_std": vs.std if vs else math.nan})

    def consider(vs):
        nonlocal best_x, best_v
        if best_v is None or vs.mean < best_v.mean:
            best_x, best_v = x.copy(), vs

    vs = run_validation(obj.unpack(x), config.validate_samples)
    consider(vs)
    record(0, f, g, vs)
    if vs.mean <= config.tolerance:
        status = CONVERGED
    it = 0
    while status != CONVERGED and it < config.max_iterations:
        it += 1
        if it % config.resample_every == 0:
            ensemble, tseed = train_ensemble(it // config.resample_every)
            f, g = obj.value_and_grad(x, ensemble)
            mem.clear()
        gnorm = float(np.linalg.norm(g))
        if gnorm < config.stall_gradient:
            status = STALLED
            it -= 1
            break
        d = _two_loop(g, mem)
        if not g @ d < 0:
            mem.clear()
            d = -g
        alpha = 1.0 if mem else min(1.0, 0.5 / max(float(np.abs(d).max()), 1e-300))
        slope = float(g @ d)
        accepted = False
        for _ in range(40):
            xn = x + alpha * d
            fn = obj.value(xn, ensemble)
            if fn <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if mem:
                mem.clear()
                it -= 1
                continue
            status = STALLED
            it -= 1
            break
        fn, gn = obj.value_and_grad(xn, ensemble)
        s, y = xn - x, gn - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            mem.append((s, y, 1.0 / sy))
        x, f, g = xn, fn, gn
        vs = None
        if it % config.validate_every == 0 or f <= config.tolerance:
            vs = run_validation(obj.unpack(x), config.validate_samples)
            consider(vs)
            if vs.mean <= config.tolerance:
                status = CONVERGED
        record(it, f, g, vs)
        log.debug("iter %d objective %.3e |g| %.3e", it, f, float(np.linalg.norm(g)))

    final = obj.unpack(x)
    if vs is None or history[-1]["validated_mean"] != history[-1]["validated_mean"]:
        vs = run_validation(final, config.validate_samples)
        consider(vs)
        history[-1]["validated_mean"], history[-1]["validated_std"] = vs.mean, vs.std
    best = obj.unpack(best_x)
    if noisy and constraint is None and config.final_validate_samples != config.validate_samples:
        best_v = run_validation(best, config.final_validate_samples)
    return OptimizationRun(history, best, best_v, status, final, ledger, config)


def config_dict(config: OptimizerConfig) -> dict:
    return asdict(config)


@dataclass(frozen=True)
class DurationSearch:
    duration: float
    run: OptimizationRun
    probes: list[tuple[float, bool, float]]  # (duration, feasible, best validated value)


def minimal_duration(problem: ControlProblem, config: OptimizerConfig, lo: float, hi: float,
                     resolution: float = 0.05, seeds=(0, 1, 2)) -> DurationSearch:
    """Shortest fixed duration at which the optimizer reaches ``config.tolerance``.

    A duration is feasible if any of ``seeds`` converges within
    ``config.max_iterations``.  Bisects between ``lo`` and ``hi``; ``hi`` must
    be feasible.  Duration is held fixed during each probe.
    """
    if not 0 < lo < hi:
        raise DomainError("need 0 < lo < hi")
    probes = []

    def attempt(T):
        best = None
        for s in seeds:
            cfg = OptimizerConfig(**{**asdict(config), "seed": int(s), "initial_duration": float(T),
                                     "optimize_duration": False})
            r = minimize(problem, cfg)
            if best is None or r.best_validated.mean < best.best_validated.mean:
                best = r
            if r.status == CONVERGED:
                probes.append((float(T), True, r.best_validated.mean))
                return r
        probes.append((float(T), False, best.best_validated.mean))
        return None

    hi_run = attempt(hi)
    if hi_run is None:
        raise DomainError(f"upper duration {hi} is not feasible")
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        r = attempt(mid)
        if r is None:
            lo = mid
        else:
            hi, hi_run = mid, r
    return DurationSearch(float(hi), hi_run, probes)
