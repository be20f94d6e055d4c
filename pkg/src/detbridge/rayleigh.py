"""Rayleigh-matrix estimation: determinant-state and sum-of-states Monte Carlo, exact sums.

The Rayleigh matrix of a family is ``M = G^-1 G^(H)`` with Gram matrix
``G[i, j] = <phi_i|phi_j>`` and ``G^(H)[i, j] = <phi_i|H|phi_j>``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import gmpy2
import numpy as np

from . import xprec
from .det_state import (
    DetSamplerConfig,
    SampleSet,
    enumerate_multiconfigs,
    exact_det_probabilities,
    local_energy_batch,
    local_rayleigh_batch,
    log_abs2,
    metropolis,
    pivot_start,
    sample_chain,
)
from .spin_model import ModelError, OperatorTerms, identity
from .states import MAX_DENSE_SITES, BasisFamily

log = logging.getLogger(__name__)

MAX_EXACT_SITES = MAX_DENSE_SITES


class EstimationError(RuntimeError):
    pass


@dataclass
class GramPack:
    """``G`` and ``G^(O)`` for labelled operators on one family.

    Sum-of-states packs carry an unknown common factor ``1/||p||``
    (``scale_known`` is False); it cancels in every ratio.
    """

    G: np.ndarray
    ops: dict[str, np.ndarray]
    scale_known: bool
    provenance: str
    errors: dict[str, np.ndarray] | None = None
    run_id: str = ""
    # optional extended-precision copies, keyed "G" and by operator label
    xp: dict[str, xprec.XComplexMatrix] | None = None

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def op_xp(self, label: str) -> xprec.XComplexMatrix | None:
        if self.xp is None:
            return None
        return self.xp.get("G" if label in ("I", "identity") else label)

    def op(self, label: str) -> np.ndarray:
        if label in ("I", "identity"):
            return self.G
        try:
            return self.ops[label]
        except KeyError:
            raise KeyError(f"pack has no operator {label!r}; available {sorted(self.ops)}") from None

    def scaled(self, c: float) -> "GramPack":
        return GramPack(
            c * self.G,
            {k: c * v for k, v in self.ops.items()},
            self.scale_known and c == 1,
            self.provenance,
            None if self.errors is None else {k: abs(c) * v for k, v in self.errors.items()},
            self.run_id,
        )

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.G))

    def to_json(self) -> dict:
        return {
            "G": _cjson(self.G),
            "ops": {k: _cjson(v) for k, v in self.ops.items()},
            "scale_known": self.scale_known,
            "provenance": self.provenance,
            "errors": None if self.errors is None else {k: v.tolist() for k, v in self.errors.items()},
            "run_id": self.run_id,
            "xp": None if self.xp is None else {
                k: {"digits": v.digits, "entries": v.to_strings()} for k, v in self.xp.items()
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "GramPack":
        xp = data.get("xp")
        if xp is not None:
            xp = {k: xprec.XComplexMatrix.from_strings(v["entries"], v["digits"]) for k, v in xp.items()}
        return cls(
            _cfromjson(data["G"]),
            {k: _cfromjson(v) for k, v in data["ops"].items()},
            bool(data["scale_known"]),
            data["provenance"],
            None if data.get("errors") is None else {k: np.array(v) for k, v in data["errors"].items()},
            data.get("run_id", ""),
            xp,
        )


@dataclass
class RayleighEstimate:
    M: np.ndarray
    errors: np.ndarray | None = None
    assembly_policy: str = "direct-mean"
    imag_policy: str = "keep"
    diagnostics: dict = field(default_factory=dict)
    M_xp: xprec.XComplexMatrix | None = None

    @property
    def m(self) -> int:
        return self.M.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        w = np.linalg.eigvals(self.M)
        return w[np.lexsort((w.imag, w.real))]

    def eigen_diagnostics(self) -> dict:
        w = self.eigenvalues
        return {
            "eigenvalues": _cjson(w),
            "max_abs_imag": float(np.max(np.abs(w.imag))) if w.size else 0.0,
        }

    def to_json(self) -> dict:
        return {
            "M": _cjson(self.M),
            "errors": None if self.errors is None else self.errors.tolist(),
            "assembly_policy": self.assembly_policy,
            "imag_policy": self.imag_policy,
            "eigen_diagnostics": self.eigen_diagnostics(),
            "diagnostics": self.diagnostics,
            "M_xp": None if self.M_xp is None else {
                "digits": self.M_xp.digits, "entries": self.M_xp.to_strings()
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "RayleighEstimate":
        return cls(
            _cfromjson(data["M"]),
            None if data.get("errors") is None else np.array(data["errors"]),
            data.get("assembly_policy", "direct-mean"),
            data.get("imag_policy", "keep"),
            data.get("diagnostics", {}),
            None if data.get("M_xp") is None
            else xprec.XComplexMatrix.from_strings(data["M_xp"]["entries"], data["M_xp"]["digits"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "RayleighEstimate":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _cjson(a: np.ndarray):
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def _cfromjson(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def _op_label(op: OperatorTerms, k: int) -> str:
    return op.label or f"O{k}"


# --------------------------------------------------------------------------
# chain statistics

def _chain_mean_and_error(values: np.ndarray, valid: np.ndarray):
    """Mean over all valid samples and standard error from per-chain means.

    ``values`` has shape ``(C, N, ...)`` and ``valid`` shape ``(C, N)``.
    The error is computed separately for real and imaginary parts and combined
    as ``sqrt(err_re**2 + err_im**2)``.
    """
    C = values.shape[0]
    w = valid.astype(float)
    counts = w.sum(axis=1)
    if counts.sum() == 0:
        raise EstimationError("every sample was singular")
    filled = np.where(valid.reshape(valid.shape + (1,) * (values.ndim - 2)), values, 0)
    total = filled.sum(axis=(0, 1)) / counts.sum()
    if C < 2:
        return total, np.full(total.shape, np.nan)
    ok = counts > 0
    chain_means = filled.sum(axis=1)[ok] / counts[ok].reshape((-1,) + (1,) * (values.ndim - 2))
    c = chain_means.shape[0]
    err_re = chain_means.real.std(axis=0, ddof=1) / np.sqrt(c)
    err_im = chain_means.imag.std(axis=0, ddof=1) / np.sqrt(c)
    return total, np.sqrt(err_re**2 + err_im**2)


# --------------------------------------------------------------------------
# determinant-state estimator

def estimate_det_state(
    family: BasisFamily,
    H: OperatorTerms,
    cfg: DetSamplerConfig | None = None,
    exhaustive: bool = False,
    samples: SampleSet | None = None,
) -> RayleighEstimate:
    """Mean of ``Phi(s)^-1 Phi^(H)(s)`` over ``s ~ |det Phi(s)|**2``.

    ``exhaustive=True`` replaces sampling by an exact weighted sum over every
    multi-configuration (small ``n*m`` only).
    """
    if H.n != family.n:
        raise ModelError(f"operator has {H.n} sites, family has {family.n}")
    F = family.matrix
    HF = H.apply(F)
    if exhaustive:
        configs = enumerate_multiconfigs(family.n, family.m)
        _, w = exact_det_probabilities(family, configs)
        nz = w > 0
        batch = local_rayleigh_batch(F, HF, configs[nz])
        p = w[nz][batch.valid] / w[nz][batch.valid].sum()
        M = np.einsum("s,sij->ij", p, batch.values[batch.valid])
        return RayleighEstimate(
            M, np.zeros(M.shape), "direct-mean", "keep",
            {"estimator": "det", "mode": "exhaustive", "n_configs": int(nz.sum())},
        )
    if cfg is None:
        raise ValueError("a sampler configuration is required unless exhaustive=True")
    if samples is None:
        samples = sample_chain(family, cfg)
    C, N, m = samples.samples.shape
    batch = local_rayleigh_batch(F, HF, samples.flat())
    samples.skipped_singular = int((~batch.valid).sum())
    if samples.skipped_singular:
        log.warning("skipped %d singular samples", samples.skipped_singular)
    M, err = _chain_mean_and_error(
        batch.values.reshape(C, N, m, m), batch.valid.reshape(C, N)
    )
    diag = {"estimator": "det", "mode": "sampled", "n_samples": int(C * N)}
    diag.update(samples.diagnostics())
    return RayleighEstimate(M, err, "direct-mean", "keep", diag)


def vmc_energy(state_amps: np.ndarray, H: OperatorTerms, cfg: DetSamplerConfig, n: int):
    """Plain single-state VMC energy: mean local energy over ``|psi(s)|**2``.

    Returns ``(mean, standard_error)``; with the same configuration this uses
    exactly the chain of the one-member determinant-state sampler.
    """
    amps = np.asarray(state_amps, dtype=complex)
    Hpsi = H.apply(amps)

    def log_weight(idx):
        return log_abs2(amps[idx[:, 0]])

    ss = metropolis(log_weight, n, 1, cfg, np.array([int(np.argmax(np.abs(amps)))]))
    C, N, _ = ss.samples.shape
    eloc = local_energy_batch(amps, Hpsi, ss.flat()[:, 0]).reshape(C, N, 1, 1)
    mean, err = _chain_mean_and_error(eloc, np.ones((C, N), dtype=bool))
    return mean[0, 0], err[0, 0]


# --------------------------------------------------------------------------
# sum-of-states estimator

def sample_sum_of_states(family: BasisFamily, cfg: DetSamplerConfig) -> SampleSet:
    """Single-copy chain targeting ``sum_k |<s|phi_k>|**2``."""
    F = family.matrix
    p = np.sum(np.abs(F) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        logp = np.log(p)

    def log_weight(idx):
        return logp[idx[:, 0]]

    return metropolis(log_weight, family.n, 1, cfg, np.array([int(np.argmax(p))]))


def _sos_local(F: np.ndarray, OF: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``conj(phi_i(s)) (O phi_j)(s) / sum_k |phi_k(s)|**2`` for each sample."""
    rows = F[idx]
    denom = np.sum(np.abs(rows) ** 2, axis=1)
    return np.einsum("si,sj->sij", rows.conj(), OF[idx]) / denom[:, None, None]


def estimate_sum_of_states(
    family: BasisFamily,
    ops: Sequence[OperatorTerms],
    cfg: DetSamplerConfig | None = None,
    exhaustive: bool = False,
    samples: SampleSet | None = None,
) -> GramPack:
    """``G / ||p||`` and every ``G^(O) / ||p||`` from the summed-probability chain.

    An identity operator in ``ops`` reproduces ``G`` itself.
    """
    F = family.matrix
    for op in ops:
        if op.n != family.n:
            raise ModelError(f"operator {op.label!r} has {op.n} sites, family has {family.n}")
    labels = [_op_label(op, k) for k, op in enumerate(ops)]
    applied = [op.apply(F) for op in ops]
    if exhaustive:
        idx = np.arange(1 << family.n)
        p = np.sum(np.abs(F) ** 2, axis=1)
        keep = p > 0
        prob = p[keep] / p.sum()
        G = np.einsum("s,sij->ij", prob, _sos_local(F, F, idx[keep]))
        mats = {
            lab: np.einsum("s,sij->ij", prob, _sos_local(F, OF, idx[keep]))
            for lab, OF in zip(labels, applied)
        }
        return GramPack(G, mats, False, "sum-of-states", None, "exhaustive")
    if cfg is None:
        raise ValueError("a sampler configuration is required unless exhaustive=True")
    if samples is None:
        samples = sample_sum_of_states(family, cfg)
    C, N, _ = samples.samples.shape
    idx = samples.flat()[:, 0]
    valid = np.ones((C, N), dtype=bool)
    m = family.m
    G, gerr = _chain_mean_and_error(_sos_local(F, F, idx).reshape(C, N, m, m), valid)
    mats, errs = {}, {"G": gerr}
    for lab, OF in zip(labels, applied):
        mats[lab], errs[lab] = _chain_mean_and_error(
            _sos_local(F, OF, idx).reshape(C, N, m, m), valid
        )
    return GramPack(G, mats, False, "sum-of-states", errs, f"sos-seed{cfg.seed}")


# --------------------------------------------------------------------------
# exact oracle

def _xp_apply(op: OperatorTerms, Fx: np.ndarray) -> np.ndarray:
    """``O @ F`` on an object array of extended-precision entries."""
    idx = np.arange(op.dim, dtype=np.int64)
    diag = np.array([gmpy2.mpfr(float(d)) for d in op.diagonal_values(idx)], dtype=object)
    out = Fx * diag[:, None]
    for site, w in enumerate(op.x_weights):
        if w != 0:
            out = out + Fx[idx ^ (1 << site)] * gmpy2.mpfr(float(w))
    return out


def exact_gram_pack(
    family: BasisFamily, ops: Sequence[OperatorTerms] = (), digits: int | None = None
) -> GramPack:
    """Exact ``G`` and ``G^(O)`` by summation over the computational basis.

    With ``digits`` the sums are also carried out in extended precision and kept
    on the pack; for nearly dependent families the double-precision ``G`` loses
    its small eigenvalues to rounding, and the extended copies keep them.
    """
    if family.n > MAX_EXACT_SITES:
        raise ModelError(f"exact Gram matrices limited to n <= {MAX_EXACT_SITES}")
    for op in ops:
        if op.n != family.n:
            raise ModelError(f"operator {op.label!r} has {op.n} sites, family has {family.n}")
    F = family.matrix
    G = F.conj().T @ F
    mats = {_op_label(op, k): F.conj().T @ op.apply(F) for k, op in enumerate(ops)}
    xp = None
    if digits is not None:
        Fx = xprec.XComplexMatrix.from_array(F, digits)
        Fh = Fx.conj_transpose()
        xp = {"G": Fh @ Fx}
        with xprec.working_precision(digits):
            applied = {_op_label(op, k): _xp_apply(op, Fx.entries) for k, op in enumerate(ops)}
        for label, OF in applied.items():
            xp[label] = Fh @ xprec.XComplexMatrix(OF, digits)
    return GramPack(G, mats, True, "exact", None, "exact", xp)


# --------------------------------------------------------------------------
# assembly policies

@dataclass(frozen=True)
class Policy:
    """``direct`` (double LU), ``xp`` (extended-precision LU) or ``pinv`` (SVD cut)."""

    kind: str = "xp"
    digits: int = xprec.DEFAULT_DIGITS
    rcond: float = 1e-11

    @classmethod
    def parse(cls, text: str) -> "Policy":
        kind, _, arg = text.partition(":")
        if kind == "direct":
            return cls("direct")
        if kind == "xp":
            return cls("xp", digits=int(arg) if arg else xprec.DEFAULT_DIGITS)
        if kind == "pinv":
            return cls("pinv", rcond=float(arg) if arg else 1e-11)
        raise ValueError(f"unknown assembly policy {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "xp":
            return f"xp-inverse({self.digits})"
        if self.kind == "pinv":
            return f"pinv({self.rcond:g})"
        return "direct"


def solve_gram(G: np.ndarray, rhs: np.ndarray, policy: Policy) -> np.ndarray:
    """``G^-1 rhs`` under an assembly policy."""
    if policy.kind == "direct":
        return np.linalg.solve(G, rhs)
    if policy.kind == "pinv":
        return np.linalg.pinv(G, rcond=policy.rcond) @ rhs
    if policy.kind == "xp":
        a = xprec.XComplexMatrix.from_array(G, policy.digits)
        b = xprec.XComplexMatrix.from_array(rhs, policy.digits)
        try:
            return xprec.xp_solve(a, b).to_numpy().reshape(np.shape(rhs))
        except xprec.SingularMatrixError as exc:
            raise EstimationError(f"{exc}") from None
    raise ValueError(f"unknown policy kind {policy.kind!r}")


def assemble_rayleigh(pack: GramPack, policy: Policy | str = "xp", label: str = "H") -> RayleighEstimate:
    """Combine ``G`` and ``G^(label)`` into ``G^-1 G^(label)``."""
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    diag = {"provenance": pack.provenance, "label": label, "scale_known": pack.scale_known}
    Gx, Ox = pack.op_xp("G"), pack.op_xp(label)
    if policy.kind == "xp" and Gx is not None and Ox is not None:
        a = xprec.XComplexMatrix(Gx.entries, policy.digits)
        b = xprec.XComplexMatrix(Ox.entries, policy.digits)
        try:
            Mx = xprec.xp_solve(a, b)
        except xprec.SingularMatrixError as exc:
            raise EstimationError(f"{exc}") from None
        diag["extended_pack"] = True
        return RayleighEstimate(Mx.to_numpy(), None, policy.name, "keep", diag, Mx)
    M = solve_gram(pack.G, pack.op(label), policy)
    return RayleighEstimate(M, None, policy.name, "keep", diag)


def realify_eigenvalues(est: RayleighEstimate, cond_warn: float = 1e8) -> RayleighEstimate:
    """Replace ``M = P D P^-1`` by ``P Re(D) P^-1``."""
    w, P = np.linalg.eig(est.M)
    cond = np.linalg.cond(P)
    diag = dict(est.diagnostics)
    diag["eigenvector_condition"] = float(cond)
    if not np.isfinite(cond) or cond > cond_warn:
        warnings.warn(
            f"eigenbasis of the Rayleigh matrix is ill-conditioned (cond {cond:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    M = np.linalg.solve(P.T, (P * w.real).T).T
    return RayleighEstimate(M, est.errors, est.assembly_policy, "discard-eig-imag", diag)


def exact_rayleigh(family: BasisFamily, H: OperatorTerms, policy: Policy | str = "xp") -> RayleighEstimate:
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    digits = policy.digits if policy.kind == "xp" else None
    return assemble_rayleigh(exact_gram_pack(family, [H], digits), policy, _op_label(H, 0))


def with_identity(ops: Sequence[OperatorTerms], n: int) -> list[OperatorTerms]:
    ops = list(ops)
    if not any(op.label == "I" for op in ops):
        ops.append(identity(n))
    return ops
