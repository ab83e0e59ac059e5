"""First-order suppression of parasitic terms outside the subalgebra.

A parasitic term ``lambda_j A_j B_j`` built from two basis elements
evolves in the interaction picture as
``U^dag A U U^dag B U = sum_kl z_jk(t) z_j+1,l(t) a_k a_l``, so its
first-order effect on the invariant is

    -i sum_j lambda_j sum_kl Y^j_kl [a_k a_l, I(0)],
    Y^j = int_0^T z_j(t) z_j+1(t)^T dt.

Each ``a_k a_l`` is one Pauli word ``W_p`` up to a phase, and
``[W_p, I(0)] = sum_q eta_pq b_q`` with distinct words ``b_q``.  The
constraint is ``C = sum_j sum_q |sum_p S^j_p eta_pq|^2`` where ``S^j``
collects ``Y^j`` by product word.  It does not depend on ``lambda``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .algebra import GeneratorSet, OperatorVector, SubalgebraBasis
from .dynamics import PulseSchedule, _check, driven_rows
from .errors import DomainError, EncodingError
from .pauli import PauliString, PauliSum, anticommute_array, word_phase_array

_I_POW = np.array([1.0, 1j, -1.0, -1j])
CACHE_MAGIC = "# iqc eta-cache v1"
DEFAULT_PERTURB_BINS = 40


@dataclass(frozen=True)
class ParasiticSpec:
    """Parasitic terms as products of two basis elements.

    ``factors[j] = (k, l)`` means term ``j`` is ``a_k a_l``.  ``strengths``
    are only used by the dense verifier.
    """

    factors: tuple[tuple[int, int], ...]
    strengths: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        if not self.factors:
            raise DomainError("parasitic spec needs at least one term")
        if self.strengths is not None:
            s = np.asarray(self.strengths, dtype=float)
            if s.shape != (len(self.factors),):
                raise DomainError("one strength per parasitic term expected")
            object.__setattr__(self, "strengths", s)

    def __len__(self) -> int:
        return len(self.factors)

    def check(self, basis: SubalgebraBasis):
        for pair in self.factors:
            for k in pair:
                if not 0 <= k < basis.dim:
                    raise EncodingError(f"factor index {k} outside basis of size {basis.dim}")

    def operator(self, basis: SubalgebraBasis, strengths=None) -> PauliSum:
        """``sum_j lambda_j a_k a_l`` as a Pauli sum (unit strengths by default)."""
        lam = np.ones(len(self)) if strengths is None else np.asarray(strengths, dtype=float)
        out = PauliSum(basis.n)
        for s, (k, l) in zip(lam, self.factors):
            out = out + PauliSum.coerce(basis.elements[k] * basis.elements[l]) * float(s)
        return out


def zz_spec(basis: SubalgebraBasis, strengths=None) -> ParasiticSpec:
    """Nearest-neighbour ``Z_j Z_j+1`` terms, each factor a single-site ``Z``."""
    n = basis.n
    idx = [basis.position(PauliString.from_sites(n, {j: "Z"})) for j in range(1, n + 1)]
    return ParasiticSpec(tuple((idx[j], idx[j + 1]) for j in range(n - 1)), strengths, "zz")


def _word_label(n: int, x: int, z: int) -> str:
    return PauliString(n, int(x), int(z)).word


@dataclass(frozen=True)
class EtaTensor:
    """Sparse commutator table ``[W_p, a_l] = sum_q eta b_q``.

    Stored as parallel arrays of ``(p, l, q, value)`` records; for Pauli
    words each ``(p, l)`` has at most one ``q``.  ``folded`` contracts ``l``
    with the initial-condition coefficients.
    """

    n: int
    basis_fingerprint: str
    product_words: np.ndarray  # (P, 2) masks of W_p
    init_terms: np.ndarray  # basis indices l with nonzero init coefficient
    init_coeffs: np.ndarray
    bq_words: np.ndarray  # (Q, 2) masks of b_q
    rec_p: np.ndarray
    rec_l: np.ndarray
    rec_q: np.ndarray
    rec_val: np.ndarray
    pair_p: np.ndarray = field(repr=False)  # (d*d,) word index of a_k a_l, -1 for identity
    pair_phase: np.ndarray = field(repr=False)
    task: str = "custom"
    _folded: sp.csr_matrix = field(default=None, repr=False, compare=False)
    _pairs: sp.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        keep = self.pair_p >= 0
        pairs = sp.csr_matrix((self.pair_phase[keep], (self.pair_p[keep], np.nonzero(keep)[0])),
                              shape=(len(self.product_words), len(self.pair_p)))
        object.__setattr__(self, "_pairs", pairs)
        lpos = {int(l): i for i, l in enumerate(self.init_terms)}
        w = self.init_coeffs[[lpos[int(l)] for l in self.rec_l]] if len(self.rec_l) else np.zeros(0)
        folded = sp.csr_matrix((self.rec_val * w, (self.rec_p, self.rec_q)),
                               shape=(len(self.product_words), len(self.bq_words)))
        folded.sum_duplicates()
        object.__setattr__(self, "_folded", folded)

    @property
    def folded(self) -> sp.csr_matrix:
        """``eta_pq`` with ``[W_p, I(0)] = sum_q eta_pq b_q``."""
        return self._folded

    @property
    def pairs(self) -> sp.csr_matrix:
        """``(P, d*d)`` map summing ``Y_kl`` into product words with their phases."""
        return self._pairs

    @property
    def entries(self) -> dict[tuple[int, int], list[tuple[int, complex]]]:
        out: dict[tuple[int, int], list[tuple[int, complex]]] = {}
        for p, l, q, v in zip(self.rec_p, self.rec_l, self.rec_q, self.rec_val):
            out.setdefault((int(p), int(l)), []).append((int(q), complex(v)))
        return out

    def product_word(self, p: int) -> PauliString:
        return PauliString(self.n, int(self.product_words[p, 0]), int(self.product_words[p, 1]))

    def bq_word(self, q: int) -> PauliString:
        return PauliString(self.n, int(self.bq_words[q, 0]), int(self.bq_words[q, 1]))

    def reconstruct(self, p: int, l: int) -> PauliSum:
        """``sum_q eta b_q`` for one stored ``(p, l)``; empty if absent."""
        acc = PauliSum(self.n)
        sel = np.nonzero((self.rec_p == p) & (self.rec_l == l))[0]
        for i in sel:
            acc = acc + PauliSum(self.n, {self.bq_word(self.rec_q[i]).key: complex(self.rec_val[i])})
        return acc

    def dump(self) -> str:
        n = self.n
        lines = [CACHE_MAGIC, f"# n={n}", f"# task={self.task}",
                 f"# basis={self.basis_fingerprint}",
                 "# init=" + ",".join(f"{int(l)}:{float(c)!r}"
                                      for l, c in zip(self.init_terms, self.init_coeffs))]
        order = np.lexsort((self.rec_l, self.rec_p))
        for i in order:
            pw = _word_label(n, *self.product_words[self.rec_p[i]])
            qw = _word_label(n, *self.bq_words[self.rec_q[i]])
            v = self.rec_val[i]
            lines.append(f"{pw}\t{int(self.rec_l[i])}\t{qw}\t{float(v.real)!r}\t{float(v.imag)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dump())

    @classmethod
    def load(cls, path, basis: SubalgebraBasis) -> "EtaTensor":
        """Read a cache file written by ``save``; the basis hash must match."""
        text = Path(path).read_text().splitlines()
        if not text or text[0] != CACHE_MAGIC:
            raise DomainError(f"{path} is not an eta cache file")
        head = {}
        i = 1
        while i < len(text) and text[i].startswith("# "):
            k, _, v = text[i][2:].partition("=")
            head[k] = v
            i += 1
        if int(head["n"]) != basis.n or head["basis"] != basis.fingerprint():
            raise DomainError("eta cache was built for a different basis")
        init = [item.split(":") for item in head["init"].split(",") if item]
        init_terms = np.array([int(a) for a, _ in init], dtype=np.int64)
        init_coeffs = np.array([float(b) for _, b in init])
        words, pair_p, pair_phase = build_eta_tables(basis)
        pmap = {(int(a), int(b)): i for i, (a, b) in enumerate(words)}
        recs = [line.split("\t") for line in text[i:]]
        qkeys = sorted({PauliString.from_label(r[2]).key for r in recs})
        qmap = {k: j for j, k in enumerate(qkeys)}
        rp = [pmap[PauliString.from_label(r[0]).key] for r in recs]
        rq = [qmap[PauliString.from_label(r[2]).key] for r in recs]
        rl = [int(r[1]) for r in recs]
        rv = [complex(float(r[3]), float(r[4])) for r in recs]
        bq = np.array(qkeys, dtype=np.int64).reshape(-1, 2)
        return cls(basis.n, basis.fingerprint(), words, init_terms, init_coeffs, bq,
                   np.array(rp, dtype=np.int64), np.array(rl, dtype=np.int64),
                   np.array(rq, dtype=np.int64), np.array(rv, dtype=complex),
                   pair_p, pair_phase, head.get("task", "custom"))


def build_eta_tables(basis: SubalgebraBasis):
    """Product words of all ordered basis pairs.

    Returns ``(words, pair_p, pair_phase)``: distinct non-identity product
    words ``(P, 2)``, and for each flattened pair ``k * d + l`` the index of
    its word (``-1`` for the identity) and the phase ``i**k`` with
    ``a_k a_l = phase * W_p``.
    """
    x, z = basis.masks
    d = basis.dim
    xk, xl = np.repeat(x, d), np.tile(x, d)
    zk, zl = np.repeat(z, d), np.tile(z, d)
    px, pz = xk ^ xl, zk ^ zl
    phase = _I_POW[word_phase_array(xk, zk, xl, zl)]
    ident = (px == 0) & (pz == 0)
    keys = np.stack([px, pz], axis=1)
    uniq, inv = np.unique(keys[~ident], axis=0, return_inverse=True)
    pair_p = np.full(d * d, -1, dtype=np.int64)
    pair_p[~ident] = inv.ravel()
    return uniq, pair_p, np.where(ident, 0.0, phase)


def build_eta(basis: SubalgebraBasis, init: OperatorVector, spec: ParasiticSpec | None = None,
              task: str = "custom") -> EtaTensor:
    """Exact commutators of every product word with every initial-condition term."""
    if spec is not None:
        spec.check(basis)
    words, pair_p, pair_phase = build_eta_tables(basis)
    x, z = basis.masks
    l_idx = np.nonzero(init.coeffs)[0]
    P, L = len(words), len(l_idx)
    wx, wz = np.repeat(words[:, 0], L), np.repeat(words[:, 1], L)
    ax, az = np.tile(x[l_idx], P), np.tile(z[l_idx], P)
    anti = anticommute_array(wx, wz, ax, az)
    # [W, a] = 2 W a when the words anticommute
    k = word_phase_array(wx[anti], wz[anti], ax[anti], az[anti])
    val = 2.0 * _I_POW[k]
    rx, rz = wx[anti] ^ ax[anti], wz[anti] ^ az[anti]
    bq, rq = np.unique(np.stack([rx, rz], axis=1), axis=0, return_inverse=True)
    rec_p = np.repeat(np.arange(P), L)[anti]
    rec_l = np.tile(l_idx, P)[anti]
    return EtaTensor(basis.n, basis.fingerprint(), words, l_idx.astype(np.int64),
                     init.coeffs[l_idx].copy(), bq.reshape(-1, 2), rec_p, rec_l,
                     rq.ravel().astype(np.int64), val, pair_p, pair_phase, task)


@dataclass(frozen=True)
class FactorTrajectory:
    """Backward-conjugated coefficients of the factor elements at quadrature nodes."""

    times: np.ndarray
    weights: np.ndarray
    coeffs: dict[int, np.ndarray]  # basis index -> (nodes, d)


def _bin_pieces(pulse: PulseSchedule, gens: GeneratorSet, substeps: int):
    """Per-bin full backward propagators and node propagators."""
    h = pulse.bin_values()[0]
    dt = pulse.dt
    fulls, nodes = [], []
    for q in range(pulse.bins):
        A = gens.assemble(h[q])
        fulls.append(sla.expm(-A * dt))
        nodes.append([sla.expm(-A * dt * (i + 0.5) / substeps) for i in range(substeps)])
    return fulls, nodes


def _factor_columns(spec: ParasiticSpec) -> list[int]:
    return sorted({k for pair in spec.factors for k in pair})


def evolved_parasitic_coeffs(pulse: PulseSchedule, gens: GeneratorSet, spec: ParasiticSpec,
                             substeps: int = 1) -> FactorTrajectory:
    """Coefficients of ``U0^dag a_k U0`` for every factor ``a_k`` at midpoint nodes.

    Each bin carries ``substeps`` equally spaced nodes with weight
    ``dt / substeps`` (composite midpoint rule).
    """
    _check(pulse, gens)
    spec.check(gens.basis)
    cols = _factor_columns(spec)
    fulls, nodes = _bin_pieces(pulse, gens, substeps)
    dt = pulse.dt
    prefix = np.eye(gens.basis.dim)
    out = {k: [] for k in cols}
    times = []
    for q in range(pulse.bins):
        for i, E in enumerate(nodes[q]):
            cur = prefix @ E[:, cols]
            for c, k in enumerate(cols):
                out[k].append(cur[:, c])
            times.append((q + (i + 0.5) / substeps) * dt)
        prefix = prefix @ fulls[q]
    w = np.full(len(times), dt / substeps)
    return FactorTrajectory(np.array(times), w, {k: np.array(v) for k, v in out.items()})


@dataclass(frozen=True)
class ConstraintReport:
    value: float
    contributions: np.ndarray
    integrals: np.ndarray  # (terms, d, d): int z_j z_j+1^T dt
    amplitudes: np.ndarray = field(repr=False, default=None)  # (terms, Q) complex

    def recompute(self, eta: EtaTensor) -> float:
        return float(sum(_term_value(Y, eta)[0] for Y in self.integrals))


def _register(basis: SubalgebraBasis, eta: EtaTensor):
    if basis.fingerprint() != eta.basis_fingerprint:
        raise DomainError("eta tensor was built for a different basis")


def _term_value(Y: np.ndarray, eta: EtaTensor):
    S = eta.pairs @ Y.ravel()
    v = eta.folded.T @ S
    return float(np.vdot(v, v).real), v


def _integrals(traj: FactorTrajectory, spec: ParasiticSpec) -> np.ndarray:
    return np.stack([(traj.coeffs[k] * traj.weights[:, None]).T @ traj.coeffs[l]
                     for k, l in spec.factors])


def constraint(pulse: PulseSchedule, gens: GeneratorSet, spec: ParasiticSpec, eta: EtaTensor,
               substeps: int = 1) -> ConstraintReport:
    """Value of the first-order parasitic constraint for ``pulse``."""
    _register(gens.basis, eta)
    traj = evolved_parasitic_coeffs(pulse, gens, spec, substeps)
    Y = _integrals(traj, spec)
    return _report(Y, eta)


def _report(Y: np.ndarray, eta: EtaTensor) -> ConstraintReport:
    vals, amps = zip(*(_term_value(y, eta) for y in Y))
    contrib = np.array(vals)
    return ConstraintReport(float(contrib.sum()), contrib, Y, np.array(amps))


def first_order_increment(pulse: PulseSchedule, gens: GeneratorSet, spec: ParasiticSpec,
                          eta: EtaTensor, strengths=None, substeps: int = 1) -> PauliSum:
    """``-i int [U0^dag H_P U0, I(0)] dt`` assembled from ``z`` and ``eta``."""
    rep = constraint(pulse, gens, spec, eta, substeps)
    lam = np.ones(len(spec)) if strengths is None else np.asarray(strengths, dtype=float)
    v = (lam[:, None] * rep.amplitudes).sum(axis=0)
    terms = {}
    for q, c in enumerate(v):
        if c != 0:
            terms[eta.bq_word(q).key] = -1j * c
    return PauliSum(gens.basis.n, terms)


def _fd_step(pulse: PulseSchedule, rel: float) -> float:
    scale = float(np.max(np.abs(pulse.amplitudes[driven_rows(pulse.n)]), initial=0.0))
    return rel * (scale if scale > 0 else 1.0)


def constraint_gradient(pulse: PulseSchedule, gens: GeneratorSet, spec: ParasiticSpec,
                        eta: EtaTensor, step: float = 1e-6, substeps: int = 1,
                        rows=None) -> np.ndarray:
    """Central finite differences of the constraint in every amplitude of ``rows``.

    The step is ``step`` times the largest driven amplitude.  A probe in bin
    ``q`` only changes that bin's propagator, so each probe reuses the prefix
    product before ``q`` and a precomputed suffix sum after it.
    Returns ``(channels, bins)`` with zeros outside ``rows``.
    """
    _check(pulse, gens)
    _register(gens.basis, eta)
    rows = driven_rows(pulse.n) if rows is None else np.asarray(rows)
    d = gens.basis.dim
    M = pulse.bins
    dt = pulse.dt
    h = pulse.bin_values()[0]
    fulls, nodes = _bin_pieces(pulse, gens, substeps)
    w = dt / substeps
    fac = spec.factors
    e = np.eye(d)

    def inbin(node_mats):
        return np.stack([sum(w * np.outer(E[:, k], E[:, l]) for E in node_mats) for k, l in fac])

    # prefix products and accumulated integrals before each bin
    prefix = [e]
    cum = [np.zeros((len(fac), d, d))]
    for q in range(M):
        P = prefix[-1]
        cum.append(cum[-1] + P @ inbin(nodes[q]) @ P.T)
        prefix.append(P @ fulls[q])
    # suffix sums: contributions of bins after q, seen from the end of bin q
    suffix = [None] * M
    acc = np.zeros((len(fac), d, d))
    for q in range(M - 1, -1, -1):
        suffix[q] = acc
        acc = inbin(nodes[q]) + fulls[q] @ acc @ fulls[q].T

    def value(Y):
        return sum(_term_value(y, eta)[0] for y in Y)

    eps = _fd_step(pulse, step)
    grad = np.zeros((pulse.channels, M))
    for q in range(M):
        P = prefix[q]
        for c in rows:
            vals = []
            for sgn in (1.0, -1.0):
                hq = h[q].copy()
                hq[c] += sgn * eps
                A = gens.assemble(hq)
                Bq = sla.expm(-A * dt)
                Eq = [sla.expm(-A * dt * (i + 0.5) / substeps) for i in range(substeps)]
                local = inbin(Eq) + Bq @ suffix[q] @ Bq.T
                vals.append(value(cum[q] + P @ local @ P.T))
            grad[c, q] = (vals[0] - vals[1]) / (2 * eps)
    return grad


def combined_objective(pulse: PulseSchedule, problem, spec: ParasiticSpec, eta: EtaTensor,
                       weight: float, ensemble=None, substeps: int = 1, step: float = 1e-6,
                       order: int = 2, workers: int = 1):
    """``J + w C`` and its gradient.

    ``J`` is the (ensemble-mean) infidelity with its analytic gradient; the
    constraint gradient is taken by finite differences.  Returns
    ``(value, gradient, (J, C))``.
    """
    from .objective import ensemble_infidelity

    if weight < 0:
        raise DomainError("constraint weight must be non-negative")
    res = ensemble_infidelity(pulse, ensemble, problem, workers=workers, order=order)
    if weight == 0:
        return res.mean, res.gradient, (res.mean, 0.0)
    C = constraint(pulse, problem.gens, spec, eta, substeps).value
    gC = constraint_gradient(pulse, problem.gens, spec, eta, step, substeps)
    return res.mean + weight * C, res.gradient + weight * gC, (res.mean, C)


def eta_digest(eta: EtaTensor) -> str:
    return hashlib.sha256(eta.dump().encode()).hexdigest()[:16]
