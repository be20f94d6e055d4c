"""Lattice geometries and spin-1/2 operators with connected-element access.

Configurations are encoded as integers: site ``i`` is bit ``i`` (site 0 is the
least significant bit) and a set bit means spin down. Spin up therefore has
``sigma_z = +1`` and spin down ``sigma_z = -1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

BODIES = ("ZZ", "X", "Z", "I")
DIAGONAL_BODIES = frozenset({"ZZ", "Z", "I"})
_BODY_ARITY = {"ZZ": 2, "X": 1, "Z": 1, "I": 0}

#: Critical transverse field of the 2D square-lattice model, in units of J.
H_CRITICAL_SQUARE = 3.044
#: Critical transverse field of the 1D chain, in units of J.
H_CRITICAL_CHAIN = 1.0


class ModelError(ValueError):
    """Invalid geometry, operator or configuration."""


@dataclass(frozen=True)
class SpinConfig:
    """A computational-basis configuration of ``n`` two-level sites."""

    index: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("a configuration needs at least one site")
        if not 0 <= self.index < (1 << self.n):
            raise ModelError(f"index {self.index} out of range for n={self.n}")

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "SpinConfig":
        """Build from a per-site sequence with 0 = up and 1 = down."""
        index = 0
        for i, b in enumerate(bits):
            if b not in (0, 1):
                raise ModelError("bits must be 0 (up) or 1 (down)")
            index |= int(b) << i
        return cls(index, len(bits))

    @classmethod
    def from_string(cls, text: str) -> "SpinConfig":
        """Parse ``"ud.."`` or arrow notation, leftmost character is site 0."""
        table = {"u": 0, "U": 0, "↑": 0, "0": 0, "d": 1, "D": 1, "↓": 1, "1": 1}
        try:
            return cls.from_bits([table[c] for c in text])
        except KeyError as exc:
            raise ModelError(f"bad spin character {exc.args[0]!r}") from None

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple((self.index >> i) & 1 for i in range(self.n))

    def flip(self, site: int) -> "SpinConfig":
        return SpinConfig(self.index ^ (1 << site), self.n)

    def __str__(self) -> str:
        return "".join("↓" if b else "↑" for b in self.bits)


@dataclass(frozen=True)
class Geometry:
    """A chain of ``extent`` sites or an ``extent x extent`` square lattice."""

    kind: str
    extent: int
    boundary: str = "open"

    def __post_init__(self):
        if self.kind not in ("chain", "square"):
            raise ModelError(f"unknown geometry kind {self.kind!r}")
        if self.boundary not in ("open", "periodic"):
            raise ModelError(f"unknown boundary {self.boundary!r}")
        if self.extent < 1:
            raise ModelError("geometry extent must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "Geometry":
        """Parse ``kind:extent[:boundary]``, e.g. ``chain:12:open``."""
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ModelError(f"cannot parse geometry {text!r}")
        try:
            extent = int(parts[1])
        except ValueError:
            raise ModelError(f"bad extent in {text!r}") from None
        return cls(parts[0], extent, parts[2] if len(parts) == 3 else "open")

    @property
    def n_sites(self) -> int:
        return self.extent if self.kind == "chain" else self.extent**2

    def bonds(self) -> list[tuple[int, int]]:
        """Nearest-neighbour pairs ``(i, j)`` with ``i < j``, each listed once."""
        L = self.extent
        periodic = self.boundary == "periodic"
        pairs: set[tuple[int, int]] = set()

        def add(a, b):
            if a != b:
                pairs.add((min(a, b), max(a, b)))

        if self.kind == "chain":
            for i in range(L - 1):
                add(i, i + 1)
            if periodic:
                add(L - 1, 0)
        else:
            for x in range(L):
                for y in range(L):
                    site = x * L + y
                    if y + 1 < L or periodic:
                        add(site, x * L + (y + 1) % L)
                    if x + 1 < L or periodic:
                        add(site, ((x + 1) % L) * L + y)
        return sorted(pairs)


@dataclass(frozen=True)
class Term:
    coeff: float
    body: str
    sites: tuple[int, ...] = ()

    def __post_init__(self):
        if self.body not in BODIES:
            raise ModelError(f"unknown operator body {self.body!r}")
        if len(self.sites) != _BODY_ARITY[self.body]:
            raise ModelError(f"{self.body} term needs {_BODY_ARITY[self.body]} sites")
        if self.body == "ZZ" and self.sites[0] == self.sites[1]:
            raise ModelError("ZZ term on a single site")

    @property
    def diagonal(self) -> bool:
        return self.body in DIAGONAL_BODIES


@dataclass(frozen=True)
class OperatorTerms:
    """A real-weighted sum of Pauli strings from {ZZ, X, Z, I}; always Hermitian."""

    n: int
    terms: tuple[Term, ...] = field(default=())
    label: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("operator needs n >= 1")
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if any(not 0 <= s < self.n for s in t.sites):
                raise ModelError(f"site index out of range in {t}")
        # per-site X weights and diagonal tables, computed once
        x_weights = np.zeros(self.n)
        for t in self.terms:
            if t.body == "X":
                x_weights[t.sites[0]] += t.coeff
        object.__setattr__(self, "_x_weights", x_weights)
        object.__setattr__(
            self, "_has_diagonal", any(t.diagonal and t.coeff != 0 for t in self.terms)
        )

    @property
    def dim(self) -> int:
        return 1 << self.n

    def diagonal_part(self) -> "OperatorTerms":
        return OperatorTerms(self.n, [t for t in self.terms if t.diagonal], self.label + "_diag")

    def offdiagonal_part(self) -> "OperatorTerms":
        return OperatorTerms(
            self.n, [t for t in self.terms if not t.diagonal], self.label + "_offdiag"
        )

    @property
    def x_weights(self) -> np.ndarray:
        """Total X coefficient on each site (read-only copy)."""
        return self._x_weights.copy()

    def diagonal_values(self, indices) -> np.ndarray:
        """Diagonal matrix elements for an array of configuration indices."""
        idx = np.asarray(indices, dtype=np.int64)
        out = np.zeros(idx.shape, dtype=float)
        for t in self.terms:
            if t.body == "I":
                out += t.coeff
            elif t.body == "Z":
                out += t.coeff * _z(idx, t.sites[0])
            elif t.body == "ZZ":
                out += t.coeff * _z(idx, t.sites[0]) * _z(idx, t.sites[1])
        return out

    def to_sparse(self) -> sp.csr_matrix:
        """Sparse matrix in the computational basis, built vectorized over all rows."""
        dim = self.dim
        idx = np.arange(dim, dtype=np.int64)
        rows = [idx]
        cols = [idx]
        vals = [self.diagonal_values(idx).astype(complex)]
        for site, w in enumerate(self._x_weights):
            if w != 0:
                rows.append(idx)
                cols.append(idx ^ (1 << site))
                vals.append(np.full(dim, w, dtype=complex))
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dim, dim),
        )
        mat.sum_duplicates()
        return mat

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Matrix-free product ``O @ vectors`` for a vector or a column stack."""
        v = np.asarray(vectors)
        if v.shape[0] != self.dim:
            raise ModelError(f"vector length {v.shape[0]} != 2**{self.n}")
        idx = np.arange(self.dim, dtype=np.int64)
        diag = self.diagonal_values(idx)
        out = (diag * v.T).T.astype(complex)
        for site, w in enumerate(self._x_weights):
            if w != 0:
                out += w * v[idx ^ (1 << site)]
        return out

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "terms": [
                {"coeff": float(t.coeff), "body": t.body, "sites": list(t.sites)}
                for t in self.terms
            ],
        }

    @classmethod
    def from_json(cls, data: dict, label: str = "") -> "OperatorTerms":
        try:
            n = int(data["n"])
            terms = [
                Term(float(t["coeff"]), str(t["body"]), tuple(int(s) for s in t.get("sites", [])))
                for t in data["terms"]
            ]
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed operator spec: {exc}") from None
        return cls(n, terms, label)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "OperatorTerms":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), label=path.stem)


def _z(idx: np.ndarray, site: int) -> np.ndarray:
    return 1 - 2 * ((idx >> site) & 1)


def build_tfim(geometry: Geometry, J: float, h: float) -> OperatorTerms:
    """Transverse-field Ising model ``-J sum_<ij> Z_i Z_j - h sum_i X_i``."""
    n = geometry.n_sites
    terms = [Term(-J, "ZZ", bond) for bond in geometry.bonds()]
    terms += [Term(-h, "X", (i,)) for i in range(n)]
    return OperatorTerms(n, terms, "H")


def magnetization_x(n: int) -> OperatorTerms:
    """Average transverse magnetization ``(1/n) sum_i X_i``."""
    return OperatorTerms(n, [Term(1.0 / n, "X", (i,)) for i in range(n)], "Mx")


def identity(n: int) -> OperatorTerms:
    return OperatorTerms(n, [Term(1.0, "I")], "I")


def connected_elements(op: OperatorTerms, s: SpinConfig) -> list[tuple[SpinConfig, complex]]:
    """All ``(s', <s|O|s'>)`` with a non-zero matrix element.

    The diagonal entry comes first and is present whenever the operator has a
    diagonal term, even if its value at ``s`` happens to be zero.
    """
    if s.n != op.n:
        raise ModelError(f"configuration has {s.n} sites, operator has {op.n}")
    out = []
    if op._has_diagonal:
        out.append((s, complex(op.diagonal_values(s.index))))
    for site, w in enumerate(op._x_weights):
        if w != 0:
            out.append((s.flip(site), complex(w)))
    return out


def combine_terms(gammas: Sequence[float], parts: Sequence[OperatorTerms]) -> OperatorTerms:
    """Weighted sum ``sum_p gamma_p O_p``, merging identical Pauli strings."""
    gammas = list(gammas)
    if len(gammas) != len(parts) or not parts:
        raise ModelError("gammas and parts must have the same non-zero length")
    n = parts[0].n
    if any(p.n != n for p in parts):
        raise ModelError("all parts must act on the same number of sites")
    merged: dict[tuple[str, tuple[int, ...]], float] = {}
    for g, part in zip(gammas, parts):
        for t in part.terms:
            key = (t.body, tuple(sorted(t.sites)))
            merged[key] = merged.get(key, 0.0) + g * t.coeff
    terms = [Term(c, body, sites) for (body, sites), c in merged.items() if c != 0]
    return OperatorTerms(n, terms, "+".join(p.label for p in parts))


def split_diagonal(op: OperatorTerms) -> tuple[OperatorTerms, OperatorTerms]:
    """``(H0, H1)`` with ``H0`` diagonal in the computational basis."""
    return op.diagonal_part(), op.offdiagonal_part()


def all_configs(n: int) -> Iterable[SpinConfig]:
    return (SpinConfig(i, n) for i in range(1 << n))
