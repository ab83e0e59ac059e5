"""Piecewise-constant propagation of subalgebra coefficient vectors.

With ``K(h) = sum_p h_p K_p`` the real adjoint generator of one time bin,
the coefficient vector evolves as ``a(t_l) = exp(K_l dt) a(t_{l-1})``.
All exponentials are applied exactly per bin; there is no Trotter or
ODE-stepper error for piecewise-constant pulses.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .algebra import GeneratorSet, OperatorVector
from .errors import DomainError, NumericalError

# dimension above which expm_apply switches to the sparse matrix-free kernel
SPARSE_THRESHOLD = 2000
_TAYLOR_THETA = 4.0
_TAYLOR_MAX_TERMS = 60
_TAYLOR_RTOL = 1e-17


def coupling_rows(n: int) -> np.ndarray:
    return np.arange(n, 2 * n - 1)


def driven_rows(n: int) -> np.ndarray:
    return np.r_[np.arange(n), 2 * n - 1, 2 * n]


@dataclass(frozen=True)
class PulseSchedule:
    """Piecewise-constant amplitudes on ``bins`` equal time bins.

    ``amplitudes`` has one row per control channel in control-term order
    (fields ``f_j``, couplings ``g_j``, edge drives ``w_1, w_n``) and one
    column per bin.  Times are in units of ``1/g``.
    """

    n: int
    amplitudes: np.ndarray
    duration: float

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=float)
        if a.ndim != 2 or a.shape[0] != 2 * self.n + 1:
            raise DomainError(f"amplitudes must have shape ({2 * self.n + 1}, bins), got {a.shape}")
        if a.shape[1] < 1:
            raise DomainError("need at least one time bin")
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite pulse amplitudes")
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise DomainError(f"duration must be positive, got {self.duration}")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "duration", float(self.duration))

    @property
    def bins(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def dt(self) -> float:
        return self.duration / self.bins

    @property
    def channels(self) -> int:
        return self.amplitudes.shape[0]

    @classmethod
    def random(cls, n: int, bins: int, duration: float, rng, coupling: float = 1.0,
               scale: float = 1.0) -> "PulseSchedule":
        """Driven channels uniform in ``[-scale, scale]``, couplings fixed at ``coupling``."""
        rng = np.random.default_rng(rng)
        amp = np.empty((2 * n + 1, bins))
        amp[driven_rows(n)] = rng.uniform(-scale, scale, size=(n + 2, bins))
        amp[coupling_rows(n)] = coupling
        return cls(n, amp, duration)

    @classmethod
    def constant(cls, n: int, bins: int, duration: float, values: Sequence[float]) -> "PulseSchedule":
        values = np.asarray(values, dtype=float)
        return cls(n, np.repeat(values[:, None], bins, axis=1), duration)

    @classmethod
    def zero(cls, n: int, bins: int, duration: float) -> "PulseSchedule":
        return cls(n, np.zeros((2 * n + 1, bins)), duration)

    def with_amplitudes(self, amplitudes) -> "PulseSchedule":
        return replace(self, amplitudes=amplitudes)

    def with_duration(self, duration: float) -> "PulseSchedule":
        return replace(self, duration=duration)

    def split(self, at: int) -> tuple["PulseSchedule", "PulseSchedule"]:
        """Two schedules covering bins ``[0, at)`` and ``[at, bins)``."""
        if not 0 < at < self.bins:
            raise DomainError(f"split point {at} outside (0, {self.bins})")
        dt = self.dt
        return (PulseSchedule(self.n, self.amplitudes[:, :at], at * dt),
                PulseSchedule(self.n, self.amplitudes[:, at:], (self.bins - at) * dt))

    def refined(self, factor: int) -> "PulseSchedule":
        """Same pulse with every bin split into ``factor`` equal bins."""
        return PulseSchedule(self.n, np.repeat(self.amplitudes, factor, axis=1), self.duration)

    def bin_values(self, offsets=None) -> np.ndarray:
        """Channel values per bin, shape ``(members, bins, channels)``.

        ``offsets`` (``(n-1,)`` or ``(members, n-1)``) are added to the
        coupling channels only.
        """
        base = self.amplitudes.T
        if offsets is None:
            return base[None].copy()
        off = np.atleast_2d(np.asarray(offsets, dtype=float))
        if off.shape[-1] != self.n - 1:
            raise DomainError(f"expected {self.n - 1} coupling offsets, got {off.shape[-1]}")
        h = np.repeat(base[None], off.shape[0], axis=0)
        h[:, :, coupling_rows(self.n)] += off[:, None, :]
        return h


@dataclass(frozen=True)
class Trajectory:
    final: OperatorVector
    snapshots: list[OperatorVector] | None = None


def _taylor_apply(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``exp(A) v`` for a stack of matrices by scaled truncated Taylor series.

    ``A`` has shape ``(..., d, d)`` and ``v`` shape ``(..., d)`` or ``(..., d, r)``.
    Step counts and series truncation are decided per stack member, so a
    member's result does not depend on what else is in the batch.
    """
    vec = v.ndim == A.ndim - 1
    if vec:
        v = v[..., None]
    norm = np.abs(A).sum(axis=-2).max(axis=-1)
    if not np.all(np.isfinite(norm)):
        raise NumericalError("non-finite generator")
    steps = np.maximum(1, np.ceil(norm / _TAYLOR_THETA)).astype(int)
    As = A / steps[..., None, None]
    out = np.array(v, dtype=float, copy=True)
    for s in range(int(steps.max(initial=1))):
        live = s < steps
        acc = out.copy()
        term = out
        done = ~live
        for k in range(1, _TAYLOR_MAX_TERMS):
            term = (As @ term) / k
            acc = acc + np.where(done[..., None, None], 0.0, term)
            small = np.abs(term).max(axis=(-2, -1)) <= _TAYLOR_RTOL * np.abs(acc).max(axis=(-2, -1))
            done = done | small
            if done.all():
                break
        else:
            raise NumericalError(
                f"Taylor series did not converge (scaled norm {float(np.max(norm / steps)):.3g})")
        out = np.where(live[..., None, None], acc, out)
    return out[..., 0] if vec else out


def expm_apply(K, dt: float, v: np.ndarray) -> np.ndarray:
    """``exp(K dt) v`` for an antisymmetric generator ``K``.

    ``K`` may be a dense array (optionally stacked) or a scipy sparse matrix.
    Sparse generators above ``SPARSE_THRESHOLD`` rows use scipy's
    matrix-free ``expm_multiply``; everything else goes through a scaled
    Taylor series.
    """
    v = np.asarray(v, dtype=float)
    if sp.issparse(K):
        if K.shape[0] > SPARSE_THRESHOLD:
            out = spla.expm_multiply(K * dt, v)
            if not np.all(np.isfinite(out)):
                raise NumericalError(f"expm_multiply failed (|K|_1={spla.norm(K, 1):.3g}, dt={dt})")
            return out
        K = K.toarray()
    K = np.asarray(K, dtype=float)
    try:
        return _taylor_apply(K * dt, v)
    except NumericalError as exc:
        raise NumericalError(f"{exc} for |K|_1={np.abs(K).sum(axis=-2).max():.3g}, dt={dt}") from None


def _check(pulse: PulseSchedule, gens: GeneratorSet):
    if pulse.channels != len(gens):
        raise DomainError(f"pulse has {pulse.channels} channels, generator set {len(gens)}")
    if pulse.n != gens.basis.n:
        raise DomainError("pulse and generators describe different chains")


def _coeffs(v) -> np.ndarray:
    return v.coeffs if isinstance(v, OperatorVector) else np.asarray(v, dtype=float)


def forward_states(a0: np.ndarray, pulse: PulseSchedule, gens: GeneratorSet,
                   offsets=None, keep: bool = False) -> np.ndarray:
    """Batched forward pass.

    Returns ``(members, d)`` final vectors, or ``(bins + 1, members, d)``
    boundary states when ``keep`` is set.
    """
    _check(pulse, gens)
    h = pulse.bin_values(offsets)
    m = h.shape[0]
    dt = pulse.dt
    cur = np.repeat(np.asarray(a0, dtype=float)[None], m, axis=0)
    states = [cur] if keep else None
    for q in range(pulse.bins):
        cur = _taylor_apply(gens.assemble(h[:, q]) * dt, cur)
        if keep:
            states.append(cur)
    return np.stack(states) if keep else cur


def propagate(init, pulse: PulseSchedule, gens: GeneratorSet, noise=None,
              snapshots: bool = False) -> Trajectory:
    """Evolve ``init`` through every bin of ``pulse``.

    ``noise`` holds the ``n - 1`` coupling offsets of one realization.
    """
    basis = gens.basis
    a0 = _coeffs(init)
    if noise is not None and np.ndim(noise) != 1:
        raise DomainError("propagate takes a single noise realization; use forward_states for batches")
    if snapshots:
        st = forward_states(a0, pulse, gens, noise, keep=True)[:, 0]
        snaps = [OperatorVector(s, basis) for s in st]
        return Trajectory(snaps[-1], snaps)
    final = forward_states(a0, pulse, gens, noise)[0]
    return Trajectory(OperatorVector(final, basis))


def bin_propagators(pulse: PulseSchedule, gens: GeneratorSet, sign: float = 1.0,
                    fraction: float = 1.0, offsets=None) -> np.ndarray:
    """Dense ``exp(sign * K_l * fraction * dt)`` for every bin, shape ``(bins, d, d)``."""
    _check(pulse, gens)
    if offsets is not None and np.ndim(offsets) != 1:
        raise DomainError("bin_propagators takes a single noise realization")
    h = pulse.bin_values(offsets)[0]
    tau = sign * fraction * pulse.dt
    return np.stack([sla.expm(gens.assemble(h[q]) * tau) for q in range(pulse.bins)])


def propagate_backward(init, pulse: PulseSchedule, gens: GeneratorSet) -> list[OperatorVector]:
    """Coefficients of ``U0(t)^dagger a U0(t)`` at every bin boundary.

    With ``B_l = exp(-K_l dt)`` the result at ``t_m`` is
    ``B_1 B_2 ... B_m z(0)``: the last bin acts first.
    """
    z0 = _coeffs(init)
    basis = gens.basis
    out = [OperatorVector(z0.copy(), basis)]
    acc = np.eye(basis.dim)
    for B in bin_propagators(pulse, gens, sign=-1.0):
        acc = acc @ B
        out.append(OperatorVector(acc @ z0, basis))
    return out


def _grad_core(a0, aT, pulse: PulseSchedule, gens: GeneratorSet, offsets, order: int = 2):
    if order < 1:
        raise DomainError("gradient order must be at least 1")
    h = pulse.bin_values(offsets)
    dt = pulse.dt
    states = forward_states(a0, pulse, gens, offsets, keep=True)
    norm2 = float(aT @ aT)
    infid = 1.0 - states[-1] @ aT / norm2
    m = h.shape[0]
    lam = np.repeat(aT[None], m, axis=0)
    grad = np.empty((m, len(gens), pulse.bins))
    # weight of lam.ad_A^k(K_p).a in the series of d exp(A dt)/dh_p
    weights = [dt ** (k + 1) / math.factorial(k + 1) for k in range(order)]
    for q in range(pulse.bins - 1, -1, -1):
        A = gens.assemble(h[:, q])
        apow = [states[q + 1]]
        lpow = [lam]
        for _ in range(order - 1):
            apow.append((A @ apow[-1][..., None])[..., 0])
            lpow.append((A @ lpow[-1][..., None])[..., 0])
        # lam.ad_A^k(K).a = (-1)^k sum_j C(k,j) (A^(k-j) lam).K(A^j a)
        acc = np.zeros((m, len(gens)))
        for k in range(order):
            term = sum(math.comb(k, j) * gens.bilinear(lpow[k - j], apow[j]) for j in range(k + 1))
            acc += weights[k] * (-1) ** k * term
        grad[:, :, q] = -acc / norm2
        lam = _taylor_apply(-A * dt, lam)
    return infid, grad


def _split_members(offsets, workers: int):
    m = offsets.shape[0]
    workers = max(1, min(workers, m))
    edges = np.linspace(0, m, workers + 1).astype(int)
    return [offsets[edges[i]:edges[i + 1]] for i in range(workers)]


def ensemble_gradients(a0, aT, pulse: PulseSchedule, gens: GeneratorSet, offsets,
                       workers: int = 1, order: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Per-member infidelities ``(m,)`` and gradients ``(m, channels, bins)``.

    Members may be spread over ``workers`` threads; outputs are identical
    for any worker count.
    """
    _check(pulse, gens)
    a0, aT = _coeffs(a0), _coeffs(aT)
    offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
    if workers <= 1 or offsets.shape[0] == 1:
        return _grad_core(a0, aT, pulse, gens, offsets, order)
    chunks = _split_members(offsets, workers)
    with ThreadPoolExecutor(len(chunks)) as ex:
        parts = list(ex.map(lambda o: _grad_core(a0, aT, pulse, gens, o, order), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def ensemble_finals(a0, pulse: PulseSchedule, gens: GeneratorSet, offsets,
                    workers: int = 1) -> np.ndarray:
    """Final coefficient vectors ``(m, d)`` for a batch of coupling offsets."""
    a0 = _coeffs(a0)
    offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
    if workers <= 1 or offsets.shape[0] == 1:
        return forward_states(a0, pulse, gens, offsets)
    chunks = _split_members(offsets, workers)
    with ThreadPoolExecutor(len(chunks)) as ex:
        parts = list(ex.map(lambda o: forward_states(a0, pulse, gens, o), chunks))
    return np.concatenate(parts)


def gradient(init, target, pulse: PulseSchedule, gens: GeneratorSet, noise=None,
             order: int = 2) -> np.ndarray:
    """Approximate ``dJ/dh_p^q`` of the infidelity against ``target``.

    Uses ``d exp(K_q dt)/dh_p ~ (dt K_p + dt**2/2 [K_q, K_p]) exp(K_q dt)``
    with cached forward states and one backward co-state sweep, so the cost
    is two exponential applications per bin.  Returns ``(channels, bins)``.

    ``order`` truncates the nested-commutator series of the bin derivative
    after ``dt**order``; the default 2 is the formula above, larger values
    converge to the exact gradient of the piecewise-constant model.
    """
    a0, aT = _coeffs(init), _coeffs(target)
    offsets = None if noise is None else np.asarray(noise, dtype=float)[None]
    if offsets is None:
        offsets = np.zeros((1, pulse.n - 1))
    _, g = _grad_core(a0, aT, pulse, gens, offsets, order)
    return g[0]
