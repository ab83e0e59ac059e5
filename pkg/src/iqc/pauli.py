"""Exact symbolic algebra of n-qubit Pauli strings.

A Pauli word on ``n`` sites is stored as a pair of integer bit masks
``(x, z)`` in the symplectic convention: the letter on a site is ``I`` for
``(0, 0)``, ``X`` for ``(1, 0)``, ``Z`` for ``(0, 1)`` and ``Y`` for ``(1, 1)``.
Site ``j`` (1-based, leftmost in the text rendering) occupies bit ``n - j``,
so the masks index computational basis states directly with site 1 as the
most significant qubit.

The scalar attached to a :class:`PauliString` is kept exactly as
``coeff * i**power`` with ``coeff > 0``; products and commutators only ever
touch the integer ``power``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from numbers import Number
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import CapacityError, DimensionError, DomainError

PRUNE_THRESHOLD = 1e-14
DENSE_LIMIT = 12

_LETTER_BITS = {"I": (0, 0), "X": (1, 0), "Z": (0, 1), "Y": (1, 1)}
_BITS_LETTER = {v: k for k, v in _LETTER_BITS.items()}
_I_POWERS = (1.0 + 0j, 1j, -1.0 + 0j, -1j)


def _popcount(v: int) -> int:
    return bin(v).count("1")


def _word_phase(x1: int, z1: int, x2: int, z2: int) -> int:
    """Power of i in ``P(x1, z1) P(x2, z2) = i**k P(x1^x2, z1^z2)``.

    Uses ``P(x, z) = i**|x&z| X**x Z**z`` and ``Z**z X**x = (-1)**|z&x| X**x Z**z``.
    """
    x3, z3 = x1 ^ x2, z1 ^ z2
    return (
        _popcount(x1 & z1) + _popcount(x2 & z2) + 2 * _popcount(z1 & x2) - _popcount(x3 & z3)
    ) % 4


def word_phase_array(x1, z1, x2, z2) -> np.ndarray:
    """Vectorized ``_word_phase`` over integer mask arrays."""
    x1, z1, x2, z2 = (np.asarray(a, dtype=np.uint64) for a in (x1, z1, x2, z2))
    pc = np.bitwise_count
    k = (pc(x1 & z1).astype(np.int64) + pc(x2 & z2) + 2 * pc(z1 & x2).astype(np.int64)
         - pc((x1 ^ x2) & (z1 ^ z2)))
    return k % 4


def anticommute_array(x1, z1, x2, z2) -> np.ndarray:
    x1, z1, x2, z2 = (np.asarray(a, dtype=np.uint64) for a in (x1, z1, x2, z2))
    return ((np.bitwise_count(x1 & z2) + np.bitwise_count(z1 & x2)) & 1).astype(bool)


def _anticommute(x1: int, z1: int, x2: int, z2: int) -> bool:
    return (_popcount(x1 & z2) + _popcount(z1 & x2)) % 2 == 1


def _fmt_real(r: float) -> str:
    s = repr(float(r))
    return s[:-2] if s.endswith(".0") else s


def _render(word: str, coeff: complex) -> str:
    if coeff.imag == 0.0:
        mag, imag = coeff.real, False
    elif coeff.real == 0.0:
        mag, imag = coeff.imag, True
    else:
        return f"({_fmt_real(coeff.real)}{coeff.imag:+.17g}j)*{word}"
    sign = "-" if mag < 0 else ""
    mag = abs(mag)
    body = "" if mag == 1.0 else _fmt_real(mag)
    if imag:
        body += "i"
    prefix = sign + body
    if prefix == "":
        return word
    if prefix == "-":
        return "-" + word
    return prefix + "*" + word


_LABEL_RE = re.compile(r"^\s*(?:(?P<coef>[+-]?(?:\d+(?:\.\d*)?(?:e[+-]?\d+)?)?i?|[+-])\*?)?(?P<word>[IXYZ]+)\s*$")


@dataclass(frozen=True, slots=True)
class PauliString:
    """A Pauli word with an exact scalar ``coeff * i**power``.

    Parameters
    ----------
    n : int
        Number of sites.
    x, z : int
        Symplectic bit masks (site ``j`` at bit ``n - j``).
    power : int
        Power of ``i`` in the scalar, reduced modulo 4.
    coeff : float
        Positive real magnitude of the scalar.
    """

    n: int
    x: int = 0
    z: int = 0
    power: int = 0
    coeff: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"site count must be >= 1, got {self.n}")
        full = (1 << self.n) - 1
        if (self.x | self.z) & ~full:
            raise DimensionError(f"bit masks exceed {self.n} sites")
        c = float(self.coeff)
        if c == 0.0 or not np.isfinite(c):
            raise DomainError("Pauli string scalar must be finite and nonzero; use an empty PauliSum for zero")
        p = int(self.power)
        if c < 0:
            c, p = -c, p + 2
        object.__setattr__(self, "coeff", c)
        object.__setattr__(self, "power", p % 4)

    @classmethod
    def from_label(cls, label: str) -> "PauliString":
        """Parse ``"XZI"``, ``"-XZI"``, ``"i*XZI"`` or ``"-2i*XZI"``."""
        m = _LABEL_RE.match(label)
        if m is None:
            raise ValueError(f"cannot parse Pauli label {label!r}")
        word = m.group("word")
        coef = m.group("coef") or ""
        power = 0
        if coef.endswith("i"):
            power = 1
            coef = coef[:-1]
        if coef in ("", "+"):
            mag = 1.0
        elif coef == "-":
            mag = -1.0
        else:
            mag = float(coef)
        n = len(word)
        x = z = 0
        for j, letter in enumerate(word):
            bx, bz = _LETTER_BITS[letter]
            bit = 1 << (n - 1 - j)
            x |= bit * bx
            z |= bit * bz
        return cls(n, x, z, power, mag)

    @classmethod
    def from_sites(cls, n: int, letters: Mapping[int, str], coeff: float = 1.0) -> "PauliString":
        """Build from a ``{site: letter}`` map with 1-based sites."""
        x = z = 0
        for site, letter in letters.items():
            if not 1 <= site <= n:
                raise DimensionError(f"site {site} outside chain of {n}")
            bx, bz = _LETTER_BITS[letter]
            bit = 1 << (n - site)
            x |= bit * bx
            z |= bit * bz
        return cls(n, x, z, 0, coeff)

    @classmethod
    def identity(cls, n: int) -> "PauliString":
        return cls(n)

    @property
    def key(self) -> tuple[int, int]:
        return (self.x, self.z)

    @property
    def word(self) -> str:
        out = []
        for j in range(self.n):
            bit = 1 << (self.n - 1 - j)
            out.append(_BITS_LETTER[(int(bool(self.x & bit)), int(bool(self.z & bit)))])
        return "".join(out)

    @property
    def phase(self) -> complex:
        return self.coeff * _I_POWERS[self.power]

    @property
    def weight(self) -> int:
        return _popcount(self.x | self.z)

    def letter(self, site: int) -> str:
        bit = 1 << (self.n - site)
        return _BITS_LETTER[(int(bool(self.x & bit)), int(bool(self.z & bit)))]

    def unit(self) -> "PauliString":
        """The bare word with scalar 1."""
        return PauliString(self.n, self.x, self.z)

    def commutes_with(self, other: "PauliString") -> bool:
        _check_n(self, other)
        return not _anticommute(self.x, self.z, other.x, other.z)

    def is_hermitian(self) -> bool:
        return self.power % 2 == 0

    def __mul__(self, other):
        if isinstance(other, PauliString):
            return multiply(self, other)
        if isinstance(other, Number):
            return _scaled(self, other)
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, Number):
            return _scaled(self, other)
        return NotImplemented

    def __neg__(self) -> "PauliString":
        return PauliString(self.n, self.x, self.z, self.power + 2, self.coeff)

    def __str__(self) -> str:
        return _render(self.word, self.phase)

    def __repr__(self) -> str:
        return f"PauliString({str(self)!r})"


def _scaled(p: PauliString, s) -> PauliString:
    s = complex(s)
    if s.imag == 0.0:
        return PauliString(p.n, p.x, p.z, p.power, p.coeff * s.real)
    if s.real == 0.0:
        return PauliString(p.n, p.x, p.z, p.power + 1, p.coeff * s.imag)
    raise DomainError("Pauli string scalars must be real or purely imaginary; use PauliSum")


def _check_n(a, b):
    if a.n != b.n:
        raise DimensionError(f"site counts differ: {a.n} vs {b.n}")


def multiply(a: PauliString, b: PauliString) -> PauliString:
    """Exact product ``a @ b`` of two Pauli strings."""
    _check_n(a, b)
    k = _word_phase(a.x, a.z, b.x, b.z)
    return PauliString(a.n, a.x ^ b.x, a.z ^ b.z, a.power + b.power + k, a.coeff * b.coeff)


class PauliSum:
    """Linear combination of Pauli words with complex coefficients.

    Coefficients with magnitude below ``prune`` are dropped on construction,
    so the zero operator is the empty sum.
    """

    __slots__ = ("n", "_terms", "prune")

    def __init__(self, n: int, terms: Mapping[tuple[int, int], complex] | None = None,
                 prune: float = PRUNE_THRESHOLD):
        self.n = n
        self.prune = prune
        clean = {}
        for key, c in (terms or {}).items():
            c = complex(c)
            if abs(c) >= prune:
                clean[key] = c
        self._terms = clean

    @classmethod
    def from_strings(cls, strings: Iterable[PauliString], n: int | None = None,
                     prune: float = PRUNE_THRESHOLD) -> "PauliSum":
        strings = list(strings)
        if n is None:
            if not strings:
                raise DomainError("site count required for an empty sum")
            n = strings[0].n
        acc: dict[tuple[int, int], complex] = {}
        for s in strings:
            if s.n != n:
                raise DimensionError(f"site counts differ: {n} vs {s.n}")
            acc[s.key] = acc.get(s.key, 0j) + s.phase
        return cls(n, acc, prune)

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "PauliSum":
        return cls.from_strings(PauliString.from_label(s) for s in labels)

    @classmethod
    def coerce(cls, op) -> "PauliSum":
        if isinstance(op, PauliSum):
            return op
        if isinstance(op, PauliString):
            return cls.from_strings([op])
        raise TypeError(f"cannot interpret {type(op).__name__} as a Pauli sum")

    @property
    def terms(self) -> Mapping[tuple[int, int], complex]:
        return dict(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self) -> Iterator[tuple[PauliString, complex]]:
        for (x, z), c in self._terms.items():
            yield PauliString(self.n, x, z), c

    def coefficient(self, word: PauliString) -> complex:
        return self._terms.get(word.key, 0j)

    def is_zero(self) -> bool:
        return not self._terms

    def __add__(self, other):
        other = PauliSum.coerce(other)
        _check_n(self, other)
        acc = dict(self._terms)
        for k, c in other._terms.items():
            acc[k] = acc.get(k, 0j) + c
        return PauliSum(self.n, acc, self.prune)

    __radd__ = __add__

    def __neg__(self):
        return PauliSum(self.n, {k: -c for k, c in self._terms.items()}, self.prune)

    def __sub__(self, other):
        return self + (-PauliSum.coerce(other))

    def __mul__(self, other):
        if isinstance(other, Number):
            return PauliSum(self.n, {k: c * other for k, c in self._terms.items()}, self.prune)
        return self @ other

    def __rmul__(self, other):
        if isinstance(other, Number):
            return self * other
        return NotImplemented

    def __matmul__(self, other):
        other = PauliSum.coerce(other)
        _check_n(self, other)
        acc: dict[tuple[int, int], complex] = {}
        for (x1, z1), c1 in self._terms.items():
            for (x2, z2), c2 in other._terms.items():
                k = _word_phase(x1, z1, x2, z2)
                key = (x1 ^ x2, z1 ^ z2)
                acc[key] = acc.get(key, 0j) + c1 * c2 * _I_POWERS[k]
        return PauliSum(self.n, acc, self.prune)

    def dagger(self) -> "PauliSum":
        return PauliSum(self.n, {k: c.conjugate() for k, c in self._terms.items()}, self.prune)

    def equals(self, other, atol: float = 0.0) -> bool:
        diff = self - PauliSum.coerce(other)
        return all(abs(c) <= atol for c in diff._terms.values())

    def __eq__(self, other):
        if not isinstance(other, (PauliSum, PauliString)):
            return NotImplemented
        other = PauliSum.coerce(other)
        return self.n == other.n and self._terms == other._terms

    __hash__ = None

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        parts = [_render(PauliString(self.n, x, z).word, c)
                 for (x, z), c in sorted(self._terms.items(), key=lambda kv: _sort_key(self.n, kv[0]))]
        return " + ".join(parts)

    def __repr__(self) -> str:
        return f"PauliSum({str(self)!r})"


def _sort_key(n: int, key: tuple[int, int]) -> str:
    return PauliString(n, *key).word


def commutator(a, b) -> PauliSum:
    """``[a, b] = ab - ba``.

    For two Pauli strings the result is empty when they commute and a single
    word with coefficient ``2 * phase(a) * phase(b) * i**k`` otherwise.
    """
    if isinstance(a, PauliString) and isinstance(b, PauliString):
        _check_n(a, b)
        if not _anticommute(a.x, a.z, b.x, b.z):
            return PauliSum(a.n)
        return PauliSum.from_strings([2 * multiply(a, b)])
    a, b = PauliSum.coerce(a), PauliSum.coerce(b)
    _check_n(a, b)
    acc: dict[tuple[int, int], complex] = {}
    for (x1, z1), c1 in a._terms.items():
        for (x2, z2), c2 in b._terms.items():
            if _anticommute(x1, z1, x2, z2):
                k = _word_phase(x1, z1, x2, z2)
                key = (x1 ^ x2, z1 ^ z2)
                acc[key] = acc.get(key, 0j) + 2 * c1 * c2 * _I_POWERS[k]
    return PauliSum(a.n, acc)


def trace_inner(a, b) -> complex:
    """Normalized Hilbert-Schmidt product ``Tr(a^dagger b) / 2**n``."""
    a, b = PauliSum.coerce(a), PauliSum.coerce(b)
    _check_n(a, b)
    bt = b._terms
    return complex(sum(c.conjugate() * bt[k] for k, c in a._terms.items() if k in bt))


def to_dense(op, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense ``2**n x 2**n`` matrix, site 1 as the leftmost tensor factor."""
    op = PauliSum.coerce(op)
    n = op.n
    if n > limit:
        raise CapacityError(f"dense representation of {n} sites exceeds limit {limit}")
    dim = 1 << n
    cols = np.arange(dim, dtype=np.int64)
    out = np.zeros((dim, dim), dtype=complex)
    for (x, z), c in op._terms.items():
        signs = 1 - 2 * (np.bitwise_count(cols & z) & 1).astype(np.int64)
        out[cols ^ x, cols] += c * _I_POWERS[_popcount(x & z) % 4] * signs
    return out


def rotate_frame(p: PauliString) -> PauliString:
    """Apply the pi/2 Y rotation ``X -> -Z``, ``Z -> X``, ``Y -> Y`` site-wise."""
    nx = _popcount(p.x & ~p.z)
    # swapping masks turns X into Z and Z into X while Y stays put
    return PauliString(p.n, p.z, p.x, p.power + 2 * (nx % 2), p.coeff)
