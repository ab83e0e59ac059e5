"""Closed operator subalgebra of the driven spin chain.

The control Hamiltonian

    H(t) = sum_j g_j X_j X_{j+1} + sum_j f_j(t) Z_j + w_1(t) X_1 + w_n(t) X_n

together with the seed operators ``Z_j`` closes, under commutation, on a set
of ``2 n**2 + 3 n + 1`` Pauli words.  Operators spanned by that set are
handled as real coefficient vectors, and ``-i [h_p, .]`` for every control
term ``h_p`` becomes a real antisymmetric matrix with entries in ``{0, +-2}``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ClosureError, DomainError, EncodingError
from .pauli import PauliString, PauliSum, commutator, multiply, rotate_frame

STANDARD = "standard"
ROTATED = "rotated"
FRAMES = (STANDARD, ROTATED)

FIELD = "field"
COUPLING = "coupling"
EDGE = "edge"


def basis_size(n: int) -> int:
    return 2 * n * n + 3 * n + 1


def _chain_word(n: int, letters: dict[int, str]) -> PauliString:
    return PauliString.from_sites(n, letters)


def _z_string(start: int, length: int) -> dict[int, str]:
    """``Z_{start, length} = Z_{start+1} ... Z_{start+length}``."""
    return {start + i: "Z" for i in range(1, length + 1)}


def standard_basis_words(n: int) -> list[PauliString]:
    """Closed set for the standard frame in its canonical listing order."""
    words = [_chain_word(n, {i: "Z"}) for i in range(1, n + 1)]
    for a, b in (("X", "X"), ("Y", "Y"), ("X", "Y"), ("Y", "X")):
        for k in range(0, n - 1):
            for j in range(1, n - k):
                letters = _z_string(j, k)
                letters[j] = a
                letters[j + k + 1] = b
                words.append(_chain_word(n, letters))
    for end in ("X", "Y"):
        for j in range(0, n):
            letters = _z_string(0, j)
            letters[j + 1] = end
            words.append(_chain_word(n, letters))
    for end in ("X", "Y"):
        for j in range(0, n):
            letters = _z_string(n - j, j)
            letters[n - j] = end
            words.append(_chain_word(n, letters))
    words.append(_chain_word(n, _z_string(0, n)))
    return words


@dataclass(frozen=True)
class SubalgebraBasis:
    """Ordered, duplicate-free list of Pauli words spanning the dynamics."""

    n: int
    elements: tuple[PauliString, ...]
    frame: str = STANDARD
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = {}
        for i, w in enumerate(self.elements):
            if w.key in idx:
                raise DomainError(f"duplicate basis word {w.word}")
            idx[w.key] = i
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def dim(self) -> int:
        return len(self.elements)

    def position(self, word: PauliString) -> int:
        try:
            return self.index[word.key]
        except KeyError:
            raise EncodingError(f"{word.word} is not a basis element ({self.frame} frame)") from None

    def __contains__(self, word: PauliString) -> bool:
        return word.key in self.index

    def words(self) -> list[str]:
        return [w.word for w in self.elements]

    def fingerprint(self) -> str:
        """Short hash identifying the element list and its order."""
        h = hashlib.sha256("\n".join(self.words()).encode())
        return h.hexdigest()[:16]

    def dump(self) -> str:
        """One ``index<TAB>word`` line per element."""
        return "".join(f"{i}\t{w}\n" for i, w in enumerate(self.words()))

    @property
    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.array([w.x for w in self.elements], dtype=np.int64)
        z = np.array([w.z for w in self.elements], dtype=np.int64)
        return x, z


def build_basis(n: int, frame: str = STANDARD) -> SubalgebraBasis:
    """Explicit closed basis for an ``n``-site chain.

    In the rotated frame every word has ``X`` and ``Z`` exchanged; signs are
    irrelevant for basis words and are carried by the control terms instead.
    """
    if n < 2:
        raise DomainError(f"chain needs at least 2 sites, got {n}")
    if frame not in FRAMES:
        raise DomainError(f"unknown frame {frame!r}")
    words = standard_basis_words(n)
    if frame == ROTATED:
        words = [rotate_frame(w).unit() for w in words]
    return SubalgebraBasis(n, tuple(words), frame)


@dataclass(frozen=True)
class ControlTermSet:
    """Hamiltonian terms, one per control channel.

    Order: ``Z_j`` fields (n), ``X_j X_{j+1}`` couplings (n - 1), then edge
    drives ``X_1`` and ``X_n``.  In the rotated frame each term is mapped
    through ``X -> -Z``, ``Z -> X`` and keeps the resulting sign.
    """

    n: int
    terms: tuple[PauliString, ...]
    roles: tuple[str, ...]
    labels: tuple[str, ...]
    frame: str = STANDARD

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def field_channels(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == FIELD])

    @property
    def coupling_channels(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == COUPLING])

    @property
    def edge_channels(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == EDGE])

    @property
    def driven_channels(self) -> np.ndarray:
        """Channels that carry time-dependent pulses (everything but couplings)."""
        return np.array([i for i, r in enumerate(self.roles) if r != COUPLING])

    def hamiltonian(self, amplitudes: Sequence[float]) -> PauliSum:
        return PauliSum.from_strings(
            [a * t for a, t in zip(amplitudes, self.terms) if a != 0], n=self.n
        )

    def rotated(self) -> "ControlTermSet":
        frame = ROTATED if self.frame == STANDARD else STANDARD
        return ControlTermSet(self.n, tuple(rotate_frame(t) for t in self.terms),
                              self.roles, self.labels, frame)


def channel_labels(n: int) -> tuple[str, ...]:
    return tuple([f"f_{j}" for j in range(1, n + 1)]
                 + [f"g_{j}" for j in range(1, n)]
                 + ["w_1", f"w_{n}"])


def control_terms(n: int, frame: str = STANDARD) -> ControlTermSet:
    if n < 2:
        raise DomainError(f"chain needs at least 2 sites, got {n}")
    terms = [_chain_word(n, {j: "Z"}) for j in range(1, n + 1)]
    terms += [_chain_word(n, {j: "X", j + 1: "X"}) for j in range(1, n)]
    terms += [_chain_word(n, {1: "X"}), _chain_word(n, {n: "X"})]
    roles = (FIELD,) * n + (COUPLING,) * (n - 1) + (EDGE, EDGE)
    ts = ControlTermSet(n, tuple(terms), roles, channel_labels(n), STANDARD)
    if frame == ROTATED:
        ts = ts.rotated()
    elif frame != STANDARD:
        raise DomainError(f"unknown frame {frame!r}")
    return ts


@dataclass(frozen=True)
class AdjointGenerator:
    """Action ``a -> -i [h_p, a]`` in basis coordinates.

    ``values`` are exact integers; column ``cols[e]`` maps onto row
    ``rows[e]`` with weight ``values[e]``.
    """

    term_index: int
    dim: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values.astype(float), (self.rows, self.cols)),
                             shape=(self.dim, self.dim))

    def toarray(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        out[self.rows, self.cols] = self.values
        return out

    def dump(self) -> str:
        """Coordinate-list text: ``row col value`` per nonzero."""
        order = np.lexsort((self.cols, self.rows))
        return "".join(f"{self.rows[e]} {self.cols[e]} {self.values[e]}\n" for e in order)


@dataclass(frozen=True)
class GeneratorSet:
    """All adjoint generators of a control term set plus flat assembly tables."""

    basis: SubalgebraBasis
    terms: ControlTermSet
    generators: tuple[AdjointGenerator, ...]
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    channel: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.generators)

    def __iter__(self):
        return iter(self.generators)

    def __getitem__(self, i) -> AdjointGenerator:
        return self.generators[i]

    @property
    def dim(self) -> int:
        return self.basis.dim

    def assemble(self, h: np.ndarray) -> np.ndarray:
        """Dense ``K(h) = sum_p h_p K_p``; ``h`` may carry leading batch axes."""
        h = np.asarray(h, dtype=float)
        d = self.dim
        out = np.zeros(h.shape[:-1] + (d * d,))
        out[..., self.rows * d + self.cols] = self.values * h[..., self.channel]
        return out.reshape(h.shape[:-1] + (d, d))

    def assemble_sparse(self, h: Sequence[float]) -> sp.csr_matrix:
        h = np.asarray(h, dtype=float)
        return sp.csr_matrix((self.values * h[self.channel], (self.rows, self.cols)),
                             shape=(self.dim, self.dim))

    def apply_each(self, v: np.ndarray) -> np.ndarray:
        """``K_p v`` for every channel: ``(..., d) -> (..., P, d)``."""
        out = np.zeros(v.shape[:-1] + (len(self), self.dim))
        out[..., self.channel, self.rows] = self.values * v[..., self.cols]
        return out

    def bilinear(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``u . K_p v`` for every channel: ``(..., d), (..., d) -> (..., P)``."""
        contrib = u[..., self.rows] * self.values * v[..., self.cols]
        return np.add.reduceat(contrib, self._starts, axis=-1)

    @property
    def _starts(self) -> np.ndarray:
        # entries are sorted by channel and every channel has at least one entry
        return np.searchsorted(self.channel, np.arange(len(self)))


def _expand_in_basis(basis: SubalgebraBasis, op: PauliSum, term, element):
    out = []
    for word, c in op:
        if word.key not in basis.index:
            raise ClosureError(term, element, op)
        out.append((basis.index[word.key], c))
    return out


def structure_constants(basis: SubalgebraBasis, terms: ControlTermSet) -> GeneratorSet:
    """Adjoint generators ``(K_p)_{lk} = coeff of a_l in -i [h_p, a_k]``."""
    if basis.n != terms.n:
        raise DomainError("basis and control terms describe different chains")
    gens = []
    rows_all, cols_all, vals_all, ch_all = [], [], [], []
    for p, h in enumerate(terms.terms):
        rows, cols, vals = [], [], []
        for k, a in enumerate(basis.elements):
            comm = commutator(h, a)
            for l, c in _expand_in_basis(basis, comm, h, a):
                v = -1j * c
                if abs(v.imag) > 0 or v.real != round(v.real):
                    raise ClosureError(h, a, comm)
                rows.append(l)
                cols.append(k)
                vals.append(int(round(v.real)))
        if not rows:
            raise DomainError(f"control term {h} commutes with the whole basis")
        g = AdjointGenerator(p, basis.dim, np.array(rows), np.array(cols),
                             np.array(vals, dtype=np.int8))
        gens.append(g)
        rows_all += rows
        cols_all += cols
        vals_all += vals
        ch_all += [p] * len(rows)
    return GeneratorSet(basis, terms, tuple(gens), np.array(rows_all), np.array(cols_all),
                        np.array(vals_all, dtype=float), np.array(ch_all))


def closure_sweep(basis: SubalgebraBasis, terms: ControlTermSet) -> list[PauliString]:
    """Words produced by ``[h_p, a_k]`` that are missing from ``basis``."""
    missing = {}
    for h in terms.terms:
        for a in basis.elements:
            for word, _ in commutator(h, a):
                if word.key not in basis.index:
                    missing[word.key] = word
    return list(missing.values())


def brute_force_closure(terms: Iterable[PauliString], seeds: Iterable[PauliString],
                        max_size: int = 100_000) -> set[tuple[int, int]]:
    """Fixpoint of repeated commutation of ``seeds`` with ``terms``.

    Exponential in general; meant for small chains only.
    """
    terms = [t.unit() for t in terms]
    found = {s.key: s.unit() for s in seeds}
    frontier = list(found.values())
    while frontier:
        nxt = []
        for a in frontier:
            for h in terms:
                if a.commutes_with(h):
                    continue
                w = multiply(h, a).unit()
                if w.key not in found:
                    found[w.key] = w
                    nxt.append(w)
                    if len(found) > max_size:
                        raise DomainError("closure exceeded max_size")
        frontier = nxt
    return set(found)


@dataclass(frozen=True)
class OperatorVector:
    """Real coefficients of a Hermitian operator in a subalgebra basis."""

    coeffs: np.ndarray
    basis: SubalgebraBasis

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.dim,):
            raise DomainError(f"expected {self.basis.dim} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def to_pauli_sum(self) -> PauliSum:
        return PauliSum(self.basis.n,
                        {w.key: c for w, c in zip(self.basis.elements, self.coeffs) if c != 0})

    def component(self, word: PauliString | str) -> float:
        if isinstance(word, str):
            word = PauliString.from_label(word)
        return float(self.coeffs[self.basis.position(word)])


def encode(op, basis: SubalgebraBasis) -> OperatorVector:
    """Coefficient vector of a Hermitian operator spanned by ``basis``."""
    op = PauliSum.coerce(op)
    if op.n != basis.n:
        raise EncodingError(f"operator on {op.n} sites, basis on {basis.n}")
    v = np.zeros(basis.dim)
    for word, c in op:
        if word.key not in basis.index:
            raise EncodingError(f"term {word.word} is outside the {basis.frame}-frame basis")
        if c.imag != 0:
            raise EncodingError(f"non-Hermitian coefficient {c} on {word.word}")
        v[basis.index[word.key]] = c.real
    return OperatorVector(v, basis)


def cluster_operator(n: int) -> PauliSum:
    """``Z_1 X_2 + sum_j X_j Z_{j+1} X_{j+2} + X_{n-1} Z_n``."""
    if n < 2:
        raise DomainError("cluster operator needs n >= 2")
    ws = [_chain_word(n, {1: "Z", 2: "X"})]
    ws += [_chain_word(n, {j: "X", j + 1: "Z", j + 2: "X"}) for j in range(1, n - 1)]
    ws.append(_chain_word(n, {n - 1: "X", n: "Z"}))
    return PauliSum.from_strings(ws)


def ghz_operator(n: int) -> PauliSum:
    """``-sum_j Z_j Z_{j+1} - prod_j X_j``, whose ground state is the GHZ state."""
    ws = [-_chain_word(n, {j: "Z", j + 1: "Z"}) for j in range(1, n)]
    ws.append(-_chain_word(n, {j: "X" for j in range(1, n + 1)}))
    return PauliSum.from_strings(ws)


def sum_of(n: int, letter: str) -> PauliSum:
    return PauliSum.from_strings([_chain_word(n, {j: letter}) for j in range(1, n + 1)])


def parity_x(n: int) -> PauliSum:
    return PauliSum.from_strings([_chain_word(n, {j: "X" for j in range(1, n + 1)})])


TASK_OPERATORS = {
    "cluster-init": lambda n: sum_of(n, "Z"),
    "cluster-target": cluster_operator,
    "ghz-init": lambda n: sum_of(n, "X"),
    "ghz-target": ghz_operator,
    "measure-init": parity_x,
    "measure-target": lambda n: PauliSum.from_strings([_chain_word(n, {1: "X"})]),
}


def task_operator(task: str, n: int) -> PauliSum:
    try:
        return TASK_OPERATORS[task](n)
    except KeyError:
        raise DomainError(f"unknown task operator {task!r}; expected one of {sorted(TASK_OPERATORS)}") from None


def encode_target(task: str, basis: SubalgebraBasis) -> OperatorVector:
    """Coefficient vector of a named initial condition or control target.

    ``task`` is a key of ``TASK_OPERATORS`` or a bare task name, which
    selects its target.

    Raises
    ------
    EncodingError
        If the operator has a term outside ``basis``; GHZ and measurement
        operators only fit the rotated frame.
    """
    key = task if task in TASK_OPERATORS else f"{task}-target"
    return encode(task_operator(key, basis.n), basis)
