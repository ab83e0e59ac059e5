"""Operator infidelity, the coupling-noise model and ensemble averages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    GeneratorSet,
    OperatorVector,
    SubalgebraBasis,
    build_basis,
    control_terms,
    encode,
    structure_constants,
    task_operator,
)
from .dynamics import PulseSchedule, _coeffs, ensemble_finals, ensemble_gradients
from .errors import DomainError

COUPLING_UNIFORM = "coupling-uniform"

TASK_FRAMES = {"cluster": "standard", "ghz": "rotated", "measure": "rotated"}


def infidelity(final, target) -> float:
    """``1 - a_T . a(T) / |a_T|^2``; lies in ``[0, 2]`` for norm-matched vectors."""
    a, t = _coeffs(final), _coeffs(target)
    if isinstance(final, OperatorVector) and isinstance(target, OperatorVector):
        if final.basis.fingerprint() != target.basis.fingerprint():
            raise DomainError("final and target use different bases")
    nt = float(t @ t)
    if nt == 0.0:
        raise DomainError("target has zero norm")
    return float(1.0 - (a @ t) / nt)


@dataclass(frozen=True)
class NoiseModel:
    """Static relative offsets on the ``n - 1`` couplings, ``g_j = g (1 + eps_j)``."""

    n: int
    level: float
    kind: str = COUPLING_UNIFORM

    def __post_init__(self):
        if self.kind != COUPLING_UNIFORM:
            raise DomainError(f"unsupported noise kind {self.kind!r}")
        if not (self.level >= 0 and np.isfinite(self.level)):
            raise DomainError(f"noise level must be non-negative, got {self.level}")
        if self.n < 2:
            raise DomainError("noise model needs at least two sites")

    @property
    def dims(self) -> int:
        return self.n - 1


@dataclass(frozen=True)
class EnsembleSample:
    members: np.ndarray
    seed: int | None
    level: float

    @property
    def size(self) -> int:
        return self.members.shape[0]


def sample_ensemble(model: NoiseModel, size: int, seed) -> EnsembleSample:
    """``size`` i.i.d. uniform points in ``[-level, level]^(n-1)``."""
    if size < 1:
        raise DomainError("ensemble size must be at least 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-model.level, model.level, size=(size, model.dims))
    if model.level == 0:
        pts = np.zeros_like(pts)
    pts.setflags(write=False)
    return EnsembleSample(pts, seed if isinstance(seed, int) else None, model.level)


@dataclass(frozen=True)
class ControlProblem:
    """Everything needed to evaluate a pulse: generators, start and goal."""

    gens: GeneratorSet
    init: OperatorVector
    target: OperatorVector
    task: str = "custom"
    coupling: float = 1.0

    def __post_init__(self):
        if self.init.basis is not self.gens.basis or self.target.basis is not self.gens.basis:
            if not (self.init.basis.fingerprint() == self.gens.basis.fingerprint()
                    == self.target.basis.fingerprint()):
                raise DomainError("init, target and generators must share one basis")

    @property
    def n(self) -> int:
        return self.gens.basis.n

    @property
    def basis(self) -> SubalgebraBasis:
        return self.gens.basis

    @classmethod
    def for_task(cls, task: str, n: int, coupling: float = 1.0) -> "ControlProblem":
        if task not in TASK_FRAMES:
            raise DomainError(f"unknown task {task!r}; expected one of {sorted(TASK_FRAMES)}")
        frame = TASK_FRAMES[task]
        basis = build_basis(n, frame)
        gens = structure_constants(basis, control_terms(n, frame))
        init = encode(task_operator(f"{task}-init", n), basis)
        target = encode(task_operator(f"{task}-target", n), basis)
        return cls(gens, init, target, task, coupling)

    def offsets(self, ensemble: EnsembleSample | None) -> np.ndarray:
        """Absolute coupling shifts ``g * eps`` for each member."""
        if ensemble is None:
            return np.zeros((1, self.n - 1))
        m = np.asarray(ensemble.members, dtype=float)
        if m.shape[-1] != self.n - 1:
            raise DomainError(f"ensemble offsets have length {m.shape[-1]}, expected {self.n - 1}")
        return self.coupling * m

    def infidelity(self, pulse: PulseSchedule, noise=None) -> float:
        off = None if noise is None else self.coupling * np.asarray(noise, dtype=float)[None]
        final = ensemble_finals(self.init, pulse, self.gens,
                                np.zeros((1, self.n - 1)) if off is None else off)[0]
        return infidelity(final, self.target)


@dataclass(frozen=True)
class EnsembleResult:
    mean: float
    members: np.ndarray
    gradient: np.ndarray | None = field(default=None, repr=False)


def ensemble_infidelity(pulse: PulseSchedule, ensemble: EnsembleSample | None,
                        problem: ControlProblem, with_gradient: bool = True,
                        workers: int = 1, order: int = 2) -> EnsembleResult:
    """Mean infidelity over the ensemble and, optionally, the mean gradient.

    The reduction runs in member order, so the result does not depend on
    ``workers``.  ``order`` is passed to the gradient series.
    """
    off = problem.offsets(ensemble)
    if with_gradient:
        J, g = ensemble_gradients(problem.init, problem.target, pulse, problem.gens, off, workers, order)
        return EnsembleResult(float(np.mean(J)), J, np.mean(g, axis=0))
    finals = ensemble_finals(problem.init, pulse, problem.gens, off, workers)
    t = problem.target.coeffs
    J = 1.0 - finals @ t / float(t @ t)
    return EnsembleResult(float(np.mean(J)), J)
