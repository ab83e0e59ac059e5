"""Dense Hilbert-space oracle for small chains.

Everything here works with explicit ``2**n`` state vectors and is used to
check the subalgebra path: propagation, eigenstate transport, exact
robustness statistics including parasitic terms, and the parity-sensing
identity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .algebra import ControlTermSet, OperatorVector, SubalgebraBasis, control_terms, task_operator
from .dynamics import PulseSchedule, coupling_rows
from .errors import AmbiguityError, CapacityError, DomainError, NumericalError
from .pauli import DENSE_LIMIT, PauliString, PauliSum, to_dense, trace_inner

KRYLOV_DIM = 30
KRYLOV_TOL = 1e-12
DEGENERACY_GAP = 1e-10
# below this many sites ground states and propagators use full dense linear algebra
DENSE_EIG_LIMIT = 8


@dataclass(frozen=True)
class DenseState:
    amplitudes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        if a.ndim != 1 or a.size & (a.size - 1):
            raise DomainError("state length must be a power of two")
        nrm = np.linalg.norm(a)
        if abs(nrm - 1.0) > 1e-12:
            raise DomainError(f"state is not normalized (norm {nrm!r})")
        object.__setattr__(self, "amplitudes", a)

    @classmethod
    def normalized(cls, v) -> "DenseState":
        v = np.asarray(v, dtype=complex)
        return cls(v / np.linalg.norm(v))

    @classmethod
    def basis_state(cls, n: int, bits: str) -> "DenseState":
        v = np.zeros(2 ** n, dtype=complex)
        v[int(bits, 2)] = 1.0
        return cls(v)

    @property
    def n(self) -> int:
        return self.amplitudes.size.bit_length() - 1

    def expectation(self, op) -> float:
        m = _as_matrix(op, self.n)
        return float(np.vdot(self.amplitudes, m @ self.amplitudes).real)


def _as_matrix(op, n: int):
    if isinstance(op, (PauliSum, PauliString)):
        return sparse_operator(op)
    return op


def sparse_operator(op, limit: int = DENSE_LIMIT) -> sp.csr_matrix:
    """Sparse ``2**n`` matrix of a Pauli sum; one signed permutation per word."""
    op = PauliSum.coerce(op)
    n = op.n
    if n > limit:
        raise CapacityError(f"{n} sites exceeds the dense limit of {limit}")
    dim = 2 ** n
    cols = np.arange(dim, dtype=np.int64)
    acc = sp.csr_matrix((dim, dim), dtype=complex)
    for word, c in op:
        yphase = (1j) ** (bin(word.x & word.z).count("1") % 4)
        signs = 1 - 2 * (np.bitwise_count(cols & word.z) & 1).astype(np.int64)
        rows = cols ^ word.x
        acc = acc + sp.csr_matrix((c * yphase * signs, (rows, cols)), shape=(dim, dim))
    return acc


def _check_capacity(n: int, limit: int = DENSE_LIMIT):
    if n > limit:
        raise CapacityError(f"{n} sites exceeds the dense limit of {limit}")


def bin_hamiltonians(pulse: PulseSchedule, terms: ControlTermSet, noise=None, parasitic=None,
                     coupling: float = 1.0) -> list[sp.csr_matrix]:
    """Per-bin sparse Hamiltonians with coupling offsets and parasitic terms.

    ``noise`` holds relative coupling offsets ``eps_j`` (so ``g_j`` shifts by
    ``coupling * eps_j``); ``parasitic`` is a Pauli sum added to every bin.
    """
    n = pulse.n
    _check_capacity(n)
    mats = [sparse_operator(t) for t in terms.terms]
    extra = sparse_operator(parasitic) if parasitic is not None else None
    amps = np.array(pulse.amplitudes)
    if noise is not None:
        amps[coupling_rows(n)] += coupling * np.asarray(noise, dtype=float)[:, None]
    out = []
    for q in range(pulse.bins):
        H = sum((a * m for a, m in zip(amps[:, q], mats) if a != 0), sp.csr_matrix(mats[0].shape))
        if extra is not None:
            H = H + extra
        out.append(sp.csr_matrix(H))
    return out


def dense_hamiltonian(pulse: PulseSchedule, terms: ControlTermSet, bin_index: int, noise=None,
                      parasitic=None) -> np.ndarray:
    H = bin_hamiltonians(pulse, terms, noise, parasitic)[bin_index].toarray()
    if np.abs(H - H.conj().T).max() > 1e-12:
        raise NumericalError("assembled Hamiltonian is not Hermitian")
    return H


def _lanczos_step(H: sp.csr_matrix, v: np.ndarray, tau: float, dim: int = KRYLOV_DIM,
                  tol: float = KRYLOV_TOL) -> np.ndarray:
    """``exp(-i H tau) v`` on a Krylov space; substeps until the residual estimate is below tol."""
    out = v.copy()
    remaining = tau
    h = tau
    while remaining > 0:
        h = min(h, remaining)
        beta = np.linalg.norm(out)
        V = np.zeros((dim + 1, out.size), dtype=complex)
        alpha = np.zeros(dim)
        betas = np.zeros(dim)
        V[0] = out / beta
        m = dim
        for j in range(dim):
            w = H @ V[j]
            alpha[j] = np.vdot(V[j], w).real
            w = w - alpha[j] * V[j] - (betas[j - 1] * V[j - 1] if j > 0 else 0)
            # full reorthogonalization keeps the small basis orthonormal
            w -= V[: j + 1].T @ (V[: j + 1].conj() @ w)
            betas[j] = np.linalg.norm(w)
            if betas[j] < 1e-14:
                m = j + 1
                break
            V[j + 1] = w / betas[j]
        Tm = np.diag(alpha[:m]) + np.diag(betas[: m - 1], 1) + np.diag(betas[: m - 1], -1)
        while True:
            e = sla.expm(-1j * h * Tm)[:, 0]
            err = beta * (betas[m - 1] if m == dim else 0.0) * abs(e[-1])
            if err <= tol or m < dim:
                break
            h *= 0.5
        out = beta * (V[:m].T @ e)
        remaining -= h
        h *= 2 if err < tol / 10 else 1
    return out


def propagate_state(state: DenseState, pulse: PulseSchedule, terms: ControlTermSet | None = None,
                    noise=None, parasitic=None, method: str = "auto") -> DenseState:
    """``prod_l exp(-i H_l dt) |psi>`` with exact bin-wise exponentials.

    ``method`` is ``"dense"`` (matrix exponential), ``"krylov"`` (Lanczos) or
    ``"auto"`` (dense below ``DENSE_EIG_LIMIT`` sites).
    """
    n = pulse.n
    terms = terms if terms is not None else control_terms(n)
    if state.n != n:
        raise DomainError("state and pulse act on different numbers of sites")
    Hs = bin_hamiltonians(pulse, terms, noise, parasitic)
    if method == "auto":
        method = "dense" if n < DENSE_EIG_LIMIT else "krylov"
    psi = state.amplitudes
    for H in Hs:
        if method == "dense":
            psi = sla.expm(-1j * pulse.dt * H.toarray()) @ psi
        elif method == "krylov":
            psi = _lanczos_step(H, psi, pulse.dt)
        else:
            raise DomainError(f"unknown propagation method {method!r}")
    if not np.all(np.isfinite(psi)):
        raise NumericalError("state propagation produced non-finite amplitudes")
    return DenseState.normalized(psi)


def unitary(pulse: PulseSchedule, terms: ControlTermSet | None = None, noise=None,
            parasitic=None) -> np.ndarray:
    """Full propagator ``U(T)`` as a dense matrix."""
    terms = terms if terms is not None else control_terms(pulse.n)
    U = np.eye(2 ** pulse.n, dtype=complex)
    for H in bin_hamiltonians(pulse, terms, noise, parasitic):
        U = sla.expm(-1j * pulse.dt * H.toarray()) @ U
    return U


def conjugated_coefficients(op, pulse: PulseSchedule, basis: SubalgebraBasis,
                            terms: ControlTermSet | None = None, noise=None) -> np.ndarray:
    """``Tr(U op U^dag a_k) / 2**n`` for every basis element, from the dense propagator.

    Also checks that nothing of ``U op U^dag`` leaks outside the basis.
    """
    terms = terms if terms is not None else control_terms(pulse.n, basis.frame)
    U = unitary(pulse, terms, noise)
    M = U @ to_dense(op) @ U.conj().T
    return _expand(M, basis)


def _expand(M: np.ndarray, basis: SubalgebraBasis) -> np.ndarray:
    dim = M.shape[0]
    coeffs = np.empty(basis.dim)
    for i, w in enumerate(basis.elements):
        coeffs[i] = (np.trace(sparse_operator(w).conj().T @ M) / dim).real
    recon = sum(c * sparse_operator(w) for c, w in zip(coeffs, basis.elements) if c != 0)
    resid = M - (recon.toarray() if sp.issparse(recon) else recon)
    if np.abs(resid).max() > 1e-8:
        raise NumericalError("evolved operator has weight outside the subalgebra")
    return coeffs


def ground_state(op, limit: int = DENSE_LIMIT) -> DenseState:
    """Lowest eigenvector of a Hermitian Pauli sum; fails on a degenerate ground space."""
    op = PauliSum.coerce(op)
    _check_capacity(op.n, limit)
    if op.n < DENSE_EIG_LIMIT:
        w, v = np.linalg.eigh(to_dense(op, limit))
        vals, vec = w[:2], v[:, 0]
    else:
        w, v = spla.eigsh(sparse_operator(op, limit), k=2, which="SA", tol=1e-13)
        order = np.argsort(w)
        vals, vec = w[order], v[:, order[0]]
    if len(vals) > 1 and vals[1] - vals[0] < DEGENERACY_GAP:
        raise AmbiguityError(f"ground space is degenerate (gap {vals[1] - vals[0]:.2e})")
    # fix the global phase so the largest component is real positive
    k = int(np.argmax(np.abs(vec)))
    vec = vec * (abs(vec[k]) / vec[k])
    return DenseState.normalized(vec)


def state_fidelity(a: DenseState, b: DenseState) -> float:
    """``|<a|b>|**2``, insensitive to global phase."""
    if a.amplitudes.size != b.amplitudes.size:
        raise DomainError("states have different dimensions")
    return float(min(1.0, abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2))


@dataclass(frozen=True)
class RobustnessReport:
    task: str
    kind: str  # coupling or parasitic
    level: float
    seed: int | None
    offsets: np.ndarray = field(repr=False)
    infidelities: np.ndarray = field(repr=False)
    noiseless: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.infidelities))

    @property
    def std(self) -> float:
        return float(np.std(self.infidelities, ddof=1)) if len(self.infidelities) > 1 else 0.0

    def summary(self) -> dict:
        x = self.infidelities
        return {"task": self.task, "kind": self.kind, "level": self.level, "seed": self.seed,
                "samples": int(len(x)), "mean": self.mean, "std": self.std,
                "median": float(np.median(x)), "min": float(x.min()), "max": float(x.max()),
                "noiseless": self.noiseless}

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index"] + [f"offset_{j + 1}" for j in range(self.offsets.shape[1])]
                       + ["infidelity"])
            for i, (o, v) in enumerate(zip(self.offsets, self.infidelities)):
                w.writerow([i] + [repr(float(a)) for a in o] + [repr(float(v))])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


TASK_FRAMES = {"cluster": "standard", "ghz": "rotated", "measure": "rotated", "zz-robust": "standard"}


def task_states(task: str, n: int) -> tuple[DenseState, DenseState]:
    """Initial and target eigenstates for a state-transfer task.

    The initial state is the ground state of the initial invariant; the
    target is the ground state of the target invariant, which has the same
    spectrum, so the transported eigenstate must land on it.
    """
    base = "cluster" if task == "zz-robust" else task
    if base == "measure":
        raise DomainError("the measurement task maps an observable, not a state")
    init = ground_state(task_operator(f"{base}-init", n))
    target = ground_state(task_operator(f"{base}-target", n))
    return init, target


def robustness_report(pulse: PulseSchedule, task: str, level: float, samples: int = 1000,
                      seed=0, kind: str = "coupling", spec_operator=None,
                      terms: ControlTermSet | None = None) -> RobustnessReport:
    """Exact state infidelities over a uniform hypercube of errors.

    ``kind="coupling"`` draws relative coupling offsets; ``kind="parasitic"``
    draws ``lambda_j`` in ``[-level, level]`` for the ``n - 1`` terms of
    ``spec_operator`` (a list of Pauli sums, nearest-neighbour ``ZZ`` by
    default), in units of the coupling.
    """
    n = pulse.n
    _check_capacity(n)
    if samples < 1:
        raise DomainError("need at least one sample")
    frame = TASK_FRAMES.get(task)
    if frame is None:
        raise DomainError(f"unknown task {task!r}")
    terms = terms if terms is not None else control_terms(n, frame)
    psi0, target = task_states(task, n)
    rng = np.random.default_rng(seed)
    offs = rng.uniform(-level, level, size=(samples, n - 1)) if level > 0 else np.zeros((samples, n - 1))
    if kind == "parasitic":
        parts = spec_operator if spec_operator is not None else zz_terms(n)
    elif kind != "coupling":
        raise DomainError(f"unknown robustness kind {kind!r}")
    noiseless = 1.0 - state_fidelity(propagate_state(psi0, pulse, terms), target)
    vals = np.empty(samples)
    for i, o in enumerate(offs):
        if kind == "coupling":
            out = propagate_state(psi0, pulse, terms, noise=o)
        else:
            Hp = sum((float(l) * p for l, p in zip(o, parts)), PauliSum(n))
            out = propagate_state(psi0, pulse, terms, parasitic=Hp if not Hp.is_zero() else None)
        vals[i] = 1.0 - state_fidelity(out, target)
    return RobustnessReport(task, kind, float(level), seed if isinstance(seed, int) else None,
                            offs, vals, noiseless)


def zz_terms(n: int) -> list[PauliSum]:
    return [PauliSum.coerce(PauliString.from_sites(n, {j: "Z", j + 1: "Z"})) for j in range(1, n)]


def ghz_state(n: int, theta: float = 0.0) -> DenseState:
    """``(|+...+> + e^(i n theta)|-...->)/sqrt 2``-style parity state in the X basis.

    Built so that ``<prod X> = cos(n theta)``: the two branches are the
    all-zero and all-one computational states, which ``prod X`` swaps.
    """
    _check_capacity(n)
    v = np.zeros(2 ** n, dtype=complex)
    v[0] = 1.0
    v[-1] = np.exp(1j * n * theta)
    return DenseState.normalized(v)


def sensing_demo(n: int, theta: float, pulse: PulseSchedule | None = None,
                 terms: ControlTermSet | None = None, tolerance: float | None = None) -> float:
    """Parity expectation of the phase-imprinted GHZ state.

    Without a pulse returns ``<prod X>`` on ``|Psi_G(theta)>``.  With a
    measurement-mapping pulse ``U`` it returns ``<U psi| X_1 |U psi>`` and,
    when ``tolerance`` is given, checks it against ``cos(n theta)``.
    """
    psi = ghz_state(n, theta)
    if pulse is None:
        return psi.expectation(task_operator("measure-init", n))
    terms = terms if terms is not None else control_terms(n, "rotated")
    out = propagate_state(psi, pulse, terms)
    val = out.expectation(task_operator("measure-target", n))
    if tolerance is not None and abs(val - math.cos(n * theta)) > tolerance:
        raise NumericalError(f"mapped parity {val:.6f} differs from cos(n theta) = {math.cos(n * theta):.6f}")
    return val


def free_evolution_fidelity(n: int, couplings, time: float, theta: float = 0.0) -> float:
    """Fidelity of ``|Psi_G>`` with itself after evolving under ``sum g_j Z_j Z_j+1``."""
    psi = ghz_state(n, theta)
    H = sum((float(g) * t for g, t in zip(couplings, zz_terms(n))), PauliSum(n))
    diag = sparse_operator(H).diagonal()
    out = DenseState.normalized(np.exp(-1j * time * diag) * psi.amplitudes)
    return state_fidelity(out, psi)


def operator_overlap(a, b) -> float:
    return float(trace_inner(PauliSum.coerce(a), PauliSum.coerce(b)).real)


def transported_state_infidelity(pulse: PulseSchedule, task: str, noise=None) -> float:
    psi0, target = task_states(task, pulse.n)
    terms = control_terms(pulse.n, TASK_FRAMES[task])
    return 1.0 - state_fidelity(propagate_state(psi0, pulse, terms, noise=noise), target)


def subalgebra_vector(coeffs: np.ndarray, basis: SubalgebraBasis) -> OperatorVector:
    return OperatorVector(coeffs, basis)
