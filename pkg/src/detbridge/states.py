"""Dense amplitude-queryable states, basis families and the ``qsv1`` file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .spin_model import ModelError, OperatorTerms, SpinConfig, connected_elements

MAX_DENSE_SITES = 20

QSV_HEADER = {"format": "qsv1", "encoding": "c128le", "order": "site0-lsb-up0"}


class StateFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AmplitudeState:
    """An unnormalized state stored as a dense vector of ``2**n`` amplitudes."""

    n: int
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        if not 1 <= self.n <= MAX_DENSE_SITES:
            raise ModelError(f"dense states support 1 <= n <= {MAX_DENSE_SITES}, got {self.n}")
        amps = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amps.size != 1 << self.n:
            raise ModelError(f"expected {1 << self.n} amplitudes, got {amps.size}")
        if not np.any(amps):
            raise ModelError("the zero vector is not a state")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def dim(self) -> int:
        return 1 << self.n

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "AmplitudeState":
        return AmplitudeState(self.n, self.amplitudes / self.norm(), self.label)


def amplitude(state: AmplitudeState, s: SpinConfig) -> complex:
    if s.n != state.n:
        raise ModelError(f"configuration has {s.n} sites, state has {state.n}")
    return complex(state.amplitudes[s.index])


def uniform_state(n: int) -> AmplitudeState:
    """Product of ``(|up> + |down>)/sqrt(2)`` on every site."""
    dim = 1 << n
    return AmplitudeState(n, np.full(dim, 2.0 ** (-n / 2), dtype=complex), "uniform")


def basis_state(s: SpinConfig) -> AmplitudeState:
    amps = np.zeros(1 << s.n, dtype=complex)
    amps[s.index] = 1.0
    return AmplitudeState(s.n, amps, f"e_{s.index}")


def local_row(state: AmplitudeState, op: OperatorTerms, s: SpinConfig) -> complex:
    """``<s|O|phi>`` summed over the connected elements of ``s``."""
    if op.n != state.n:
        raise ModelError(f"operator has {op.n} sites, state has {state.n}")
    return sum(
        (value * state.amplitudes[sp.index] for sp, value in connected_elements(op, s)),
        0j,
    )


@dataclass(frozen=True, eq=False)
class BasisFamily:
    """An ordered family of ``m`` states on the same ``n`` sites."""

    members: tuple[AmplitudeState, ...]
    _matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ModelError("a basis family needs at least one member")
        n = members[0].n
        if any(s.n != n for s in members):
            raise ModelError("family members must share the site count")
        object.__setattr__(self, "members", members)
        mat = np.stack([s.amplitudes for s in members], axis=1)
        mat.setflags(write=False)
        object.__setattr__(self, "_matrix", mat)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, labels: Sequence[str] | None = None) -> "BasisFamily":
        """Family whose members are the columns of a ``2**n x m`` matrix."""
        matrix = np.asarray(matrix, dtype=complex)
        dim, m = matrix.shape
        n = dim.bit_length() - 1
        if 1 << n != dim:
            raise ModelError(f"row count {dim} is not a power of two")
        labels = labels or [f"phi_{k}" for k in range(m)]
        return cls(tuple(AmplitudeState(n, matrix[:, k], labels[k]) for k in range(m)))

    @property
    def n(self) -> int:
        return self.members[0].n

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only ``2**n x m`` matrix with member ``k`` in column ``k``."""
        return self._matrix

    def gram_rank(self, rtol: float = 1e-12) -> int:
        """Numerical rank of the family (advisory independence diagnostic)."""
        sv = np.linalg.svd(self._matrix, compute_uv=False)
        return int(np.sum(sv > rtol * sv[0]))

    def __len__(self) -> int:
        return self.m

    def __getitem__(self, k: int) -> AmplitudeState:
        return self.members[k]


def write_state(state: AmplitudeState, path) -> None:
    header = dict(QSV_HEADER, n=state.n)
    payload = state.amplitudes.astype("<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def read_state(path, label: str | None = None) -> AmplitudeState:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise StateFileError(f"{path}: missing header line")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StateFileError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or any(header.get(k) != v for k, v in QSV_HEADER.items()):
        raise StateFileError(f"{path}: malformed header, expected {QSV_HEADER}")
    n = header.get("n")
    if not isinstance(n, int) or not 1 <= n <= MAX_DENSE_SITES:
        raise StateFileError(f"{path}: malformed header, bad n={n!r}")
    if len(payload) % 16:
        raise StateFileError(f"{path}: truncated payload ({len(payload)} bytes)")
    count = len(payload) // 16
    if count != 1 << n:
        raise StateFileError(
            f"{path}: payload length mismatch ({count} amplitudes for n={n})"
        )
    amps = np.frombuffer(payload, dtype="<c16").astype(np.complex128)
    return AmplitudeState(n, amps, label if label is not None else Path(path).stem)


def load_family(paths: Sequence) -> BasisFamily:
    return BasisFamily(tuple(read_state(p) for p in paths))


def save_family(family: BasisFamily, directory, prefix: str = "basis") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, state in enumerate(family.members):
        path = directory / f"{prefix}_{k:03d}.qsv"
        write_state(state, path)
        paths.append(path)
    return paths
