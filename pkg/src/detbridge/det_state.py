"""Determinant-state amplitudes, the m-copy Metropolis sampler and local Rayleigh matrices.

A multi-configuration ``s = (s_1, ..., s_m)`` selects one basis configuration per
copy of the Hilbert space. The determinant state of a family ``{phi_k}`` has
amplitude ``det Phi(s) / m!`` with ``Phi(s)[i, j] = <s_i|phi_j>``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .spin_model import ModelError, OperatorTerms, SpinConfig
from .states import BasisFamily, local_row

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class MultiConfig:
    """One configuration per Hilbert-space copy; copy ``i`` feeds row ``i`` of ``Phi``."""

    copies: tuple[SpinConfig, ...]

    def __post_init__(self):
        copies = tuple(self.copies)
        if not copies:
            raise ModelError("a multi-configuration needs at least one copy")
        if any(c.n != copies[0].n for c in copies):
            raise ModelError("all copies must have the same site count")
        object.__setattr__(self, "copies", copies)

    @classmethod
    def from_indices(cls, indices: Sequence[int], n: int) -> "MultiConfig":
        return cls(tuple(SpinConfig(int(i), n) for i in indices))

    @property
    def m(self) -> int:
        return len(self.copies)

    @property
    def n(self) -> int:
        return self.copies[0].n

    @property
    def indices(self) -> np.ndarray:
        return np.array([c.index for c in self.copies], dtype=np.int64)

    def swapped(self, i: int, j: int) -> "MultiConfig":
        copies = list(self.copies)
        copies[i], copies[j] = copies[j], copies[i]
        return MultiConfig(tuple(copies))


@dataclass(frozen=True)
class DetSamplerConfig:
    """Metropolis chain settings; ``burn_in=None`` means ``10 * n * m`` proposals."""

    n_chains: int = 8
    n_samples_per_chain: int = 1000
    burn_in: int | None = None
    thin: int = 1
    seed: int = 0
    proposal: str = "single-copy-single-flip"

    def __post_init__(self):
        if self.n_chains < 1 or self.n_samples_per_chain < 1:
            raise ValueError("n_chains and n_samples_per_chain must be >= 1")
        if (self.burn_in is not None and self.burn_in < 0) or self.thin < 0:
            raise ValueError("burn_in and thin must be >= 0")
        if self.proposal != "single-copy-single-flip":
            raise ValueError(f"unsupported proposal {self.proposal!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def n_samples(self) -> int:
        return self.n_chains * self.n_samples_per_chain

    def burn_in_for(self, n: int, m: int) -> int:
        return 10 * n * m if self.burn_in is None else self.burn_in

    @classmethod
    def with_total(cls, n_samples: int, n_chains: int = 8, **kw) -> "DetSamplerConfig":
        per_chain = max(1, -(-n_samples // n_chains))
        return cls(n_chains=n_chains, n_samples_per_chain=per_chain, **kw)


@dataclass
class SampleSet:
    """Retained samples of shape ``(n_chains, n_per_chain, m)`` and chain diagnostics."""

    samples: np.ndarray
    n: int
    acceptance: np.ndarray
    seed: int
    spawn_keys: list
    burn_in: int
    thin: int
    skipped_singular: int = 0
    restarts: int = 0

    @property
    def m(self) -> int:
        return self.samples.shape[-1]

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.m)

    def configs(self) -> list[MultiConfig]:
        return [MultiConfig.from_indices(row, self.n) for row in self.flat()]

    def diagnostics(self) -> dict:
        return {
            "acceptance_per_chain": [float(a) for a in self.acceptance],
            "skipped_singular": int(self.skipped_singular),
            "restarts": int(self.restarts),
            "burn_in": int(self.burn_in),
            "thin": int(self.thin),
            "seed_lineage": {"master_seed": int(self.seed), "chain_spawn_keys": self.spawn_keys},
        }

    def diagnostics_json(self) -> str:
        return json.dumps(self.diagnostics(), indent=1)


def _phi(matrix: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """``Phi[..., i, j] = <s_i|phi_j>`` for index arrays of shape ``(..., m)``."""
    return matrix[indices]


def has_repeats(indices: np.ndarray) -> np.ndarray:
    """True where two copies coincide; ``Phi`` then has equal rows and ``det = 0`` exactly.

    LU in floating point returns a tiny non-zero value instead, so callers mask these.
    """
    srt = np.sort(np.asarray(indices), axis=-1)
    return np.any(srt[..., 1:] == srt[..., :-1], axis=-1)


def _dets(matrix: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return np.where(has_repeats(indices), 0, np.linalg.det(_phi(matrix, indices)))


def det_amplitude(family: BasisFamily, s: MultiConfig | Sequence[int]) -> complex:
    """Amplitude ``det Phi(s) / m!`` of the determinant state."""
    idx = s.indices if isinstance(s, MultiConfig) else np.asarray(s, dtype=np.int64)
    if isinstance(s, MultiConfig) and s.n != family.n:
        raise ModelError(f"configuration has {s.n} sites, family has {family.n}")
    if idx.shape != (family.m,):
        raise ModelError(f"need {family.m} copies, got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= 1 << family.n):
        raise ModelError("configuration index out of range")
    return complex(_dets(family.matrix, idx)) / math.factorial(family.m)


def change_basis(family: BasisFamily, B: np.ndarray) -> BasisFamily:
    """Family with member ``p`` equal to ``sum_k B[k, p] phi_k``."""
    B = np.asarray(B, dtype=complex)
    if B.shape != (family.m, family.m):
        raise ModelError(f"change of basis must be {family.m}x{family.m}, got {B.shape}")
    return BasisFamily.from_matrix(family.matrix @ B)


def enumerate_multiconfigs(n: int, m: int) -> np.ndarray:
    """All ``2**(n*m)`` multi-configurations as an ``(N, m)`` index array."""
    if n * m > 24:
        raise ModelError("exhaustive enumeration limited to n*m <= 24")
    dim = 1 << n
    grid = np.indices((dim,) * m).reshape(m, -1).T
    return np.ascontiguousarray(grid, dtype=np.int64)


def exact_det_probabilities(family: BasisFamily, configs: np.ndarray | None = None):
    """Normalized ``|det Phi(s)|**2`` over every multi-configuration."""
    if configs is None:
        configs = enumerate_multiconfigs(family.n, family.m)
    w = np.abs(_dets(family.matrix, configs)) ** 2
    return configs, w / w.sum()


def _find_start(log_weight: Callable, rng, n: int, m: int, fallback: np.ndarray, tries: int):
    dim = 1 << n
    for _ in range(tries):
        cand = rng.integers(0, dim, size=m)
        if np.isfinite(log_weight(cand[None, :])[0]):
            return cand
    if np.isfinite(log_weight(fallback[None, :])[0]):
        return fallback.copy()
    return None


def pivot_start(matrix: np.ndarray) -> np.ndarray:
    """Rows selected by column-pivoted QR of ``matrix.T``; gives a non-singular ``Phi``."""
    _, _, piv = scipy.linalg.qr(matrix.T, pivoting=True, mode="economic")
    return np.asarray(piv[: matrix.shape[1]], dtype=np.int64)


def log_abs2(values: np.ndarray) -> np.ndarray:
    """``log |values|**2``, ``-inf`` where a value vanishes."""
    with np.errstate(divide="ignore"):
        return 2 * np.log(np.abs(values))


def metropolis(
    log_weight: Callable[[np.ndarray], np.ndarray],
    n: int,
    m: int,
    cfg: DetSamplerConfig,
    fallback_start: np.ndarray,
    start_tries: int = 200,
) -> SampleSet:
    """Vectorized Metropolis-Hastings over ``cfg.n_chains`` independent chains.

    ``log_weight`` maps an ``(C, m)`` index array to log unnormalized
    probabilities (``-inf`` for zero weight); logs avoid underflow of
    ``|det|**2`` for large, nearly dependent families.
    Each proposal picks one copy and one site uniformly and flips that spin, so
    the proposal is symmetric. Every chain owns a generator spawned from the
    master seed and pre-draws its whole proposal stream, which makes the result
    independent of how chains are batched.
    """
    C = cfg.n_chains
    burn = cfg.burn_in_for(n, m)
    stride = max(cfg.thin, 1)
    keep = cfg.n_samples_per_chain
    total = burn + keep * stride

    seqs = np.random.SeedSequence(cfg.seed).spawn(C)
    rngs = [np.random.default_rng(ss) for ss in seqs]

    state = np.empty((C, m), dtype=np.int64)
    restarts = 0
    for c, rng in enumerate(rngs):
        start = _find_start(log_weight, rng, n, m, fallback_start, start_tries)
        if start is None:
            restarts += 1
            log.warning("chain %d: no non-zero start found, reseeding", c)
            rng = rngs[c] = np.random.default_rng(seqs[c].spawn(1)[0])
            start = _find_start(log_weight, rng, n, m, fallback_start, start_tries)
            if start is None:
                raise SamplerError("could not find a configuration with non-zero weight")
        state[c] = start

    copy_draw = np.stack([r.integers(0, m, size=total) for r in rngs])
    site_draw = np.stack([r.integers(0, n, size=total) for r in rngs])
    unif = np.stack([r.random(total) for r in rngs])

    w = log_weight(state)
    with np.errstate(divide="ignore"):
        log_unif = np.log(unif)
    out = np.empty((C, keep, m), dtype=np.int64)
    accepted = np.zeros(C, dtype=np.int64)
    rows = np.arange(C)
    kept = 0
    for step in range(total):
        prop = state.copy()
        prop[rows, copy_draw[:, step]] ^= np.left_shift(1, site_draw[:, step])
        w_new = log_weight(prop)
        acc = log_unif[:, step] + w < w_new
        state[acc] = prop[acc]
        w = np.where(acc, w_new, w)
        accepted += acc
        if step >= burn and (step - burn) % stride == stride - 1:
            out[:, kept] = state
            kept += 1
    return SampleSet(
        samples=out,
        n=n,
        acceptance=accepted / total,
        seed=cfg.seed,
        spawn_keys=[list(ss.spawn_key) for ss in seqs],
        burn_in=burn,
        thin=stride,
        restarts=restarts,
    )


def sample_chain(family: BasisFamily, cfg: DetSamplerConfig) -> SampleSet:
    """Sample multi-configurations from ``|det Phi(s)|**2``."""
    F = family.matrix

    def log_weight(idx):
        sign, logdet = np.linalg.slogdet(F[idx])
        return np.where((sign == 0) | has_repeats(idx), -np.inf, 2 * logdet)

    return metropolis(log_weight, family.n, family.m, cfg, pivot_start(F))


def _as_rows(family: BasisFamily, op: OperatorTerms) -> np.ndarray:
    if op.n != family.n:
        raise ModelError(f"operator has {op.n} sites, family has {family.n}")
    return op.apply(family.matrix)


def local_rayleigh(family: BasisFamily, op: OperatorTerms, s: MultiConfig) -> np.ndarray:
    """``Phi(s)^-1 Phi^(O)(s)`` for a single multi-configuration.

    Raises ``np.linalg.LinAlgError`` when ``Phi(s)`` is singular.
    """
    if s.n != family.n or s.m != family.m:
        raise ModelError("multi-configuration does not match the family")
    phi = _phi(family.matrix, s.indices)
    phi_o = np.array(
        [[local_row(state, op, c) for state in family.members] for c in s.copies]
    )
    if family.m == 1:
        if phi[0, 0] == 0:
            raise np.linalg.LinAlgError("zero amplitude")
        return phi_o / phi
    if has_repeats(s.indices):
        raise np.linalg.LinAlgError("repeated copies make Phi(s) singular")
    return np.linalg.solve(phi, phi_o)


@dataclass
class LocalBatch:
    values: np.ndarray  # (N, m, m), NaN where skipped
    valid: np.ndarray  # (N,) bool


def local_rayleigh_batch(
    matrix: np.ndarray, op_rows: np.ndarray, indices: np.ndarray
) -> LocalBatch:
    """Local Rayleigh matrices for an ``(N, m)`` array of multi-configurations.

    ``op_rows`` holds ``O phi_j`` as columns, so ``Phi^(O)(s)[i, j] = op_rows[s_i, j]``.
    Samples with exactly singular ``Phi`` are flagged invalid rather than solved.
    """
    phi = matrix[indices]
    phi_o = op_rows[indices]
    N, m, _ = phi.shape
    out = np.full((N, m, m), np.nan + 0j)
    if m == 1:
        valid = phi[:, 0, 0] != 0
        out[valid] = phi_o[valid] / phi[valid]
        return LocalBatch(out, valid)
    sign, _ = np.linalg.slogdet(phi)
    valid = (sign != 0) & ~has_repeats(indices)
    if np.any(valid):
        try:
            out[valid] = np.linalg.solve(phi[valid], phi_o[valid])
        except np.linalg.LinAlgError:
            # numerically singular despite non-zero det; fall back per sample
            for k in np.flatnonzero(valid):
                try:
                    out[k] = np.linalg.solve(phi[k], phi_o[k])
                except np.linalg.LinAlgError:
                    valid[k] = False
    valid &= np.all(np.isfinite(out.reshape(N, -1)), axis=1)
    return LocalBatch(out, valid)


def local_energy_batch(amps: np.ndarray, op_amps: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Standard single-state local energy ``<s|O|psi> / <s|psi>``."""
    return op_amps[indices] / amps[indices]


def sampler_config_dict(cfg: DetSamplerConfig) -> dict:
    return asdict(cfg)
