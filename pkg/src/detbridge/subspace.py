"""Subspace metric, Ritz values and vectors, and ground-state interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .det_state import DetSamplerConfig, log_abs2, metropolis, sample_chain
from .oracle import infidelity
from .rayleigh import GramPack, Policy, RayleighEstimate, solve_gram
from .spin_model import ModelError
from .states import AmplitudeState, BasisFamily


class DegenerateRitzError(ValueError):
    pass


# --------------------------------------------------------------------------
# distances

def _orthonormal(family: BasisFamily, rtol: float = 1e-12) -> np.ndarray:
    Q, R = np.linalg.qr(family.matrix)
    d = np.abs(np.diag(R))
    if d.size == 0 or np.min(d) <= rtol * np.max(d):
        raise ModelError("family is rank deficient")
    return Q


def subspace_fidelity_exact(U: BasisFamily, V: BasisFamily) -> float:
    """``|det S|**2`` with ``S = Q_U^dag Q_V`` for orthonormalized bases."""
    if U.m != V.m or U.n != V.n:
        raise ModelError("subspaces must share m and n")
    S = _orthonormal(U).conj().T @ _orthonormal(V)
    return float(min(1.0, max(0.0, abs(np.linalg.det(S)) ** 2)))


def subspace_distance_exact(U: BasisFamily, V: BasisFamily) -> float:
    """Fubini-Study distance between the determinant states, in radians."""
    return float(math.acos(math.sqrt(subspace_fidelity_exact(U, V))))


@dataclass
class DistanceEstimate:
    distance: float
    error: float
    fidelity: complex
    fidelity_error: float
    ratio_means: tuple[complex, complex]


def _distance_from_ratios(r1: np.ndarray, r2: np.ndarray) -> DistanceEstimate:
    """Combine per-chain ratio means ``r1``, ``r2`` into a distance with error bar."""
    a, b = r1.mean(), r2.mean()
    C = r1.size
    if C > 1:
        sa = math.hypot(r1.real.std(ddof=1), r1.imag.std(ddof=1)) / math.sqrt(C)
        sb = math.hypot(r2.real.std(ddof=1), r2.imag.std(ddof=1)) / math.sqrt(C)
    else:
        sa = sb = float("nan")
    F = a * b
    sF = math.sqrt(abs(b) ** 2 * sa**2 + abs(a) ** 2 * sb**2)
    f = min(1.0, max(0.0, abs(F)))
    d = math.acos(math.sqrt(f))
    if 0 < f < 1:
        sd = sF / (2 * math.sqrt(f * (1 - f)))
    elif f == 1:
        sd = math.sqrt(sF)
    else:
        sd = float("inf") if sF > 0 else 0.0
    return DistanceEstimate(d, sd, complex(F), sF, (complex(a), complex(b)))


def subspace_distance_mc(
    U: BasisFamily, V: BasisFamily, cfg: DetSamplerConfig, control_variates: bool = False
) -> DistanceEstimate:
    """Product-of-means estimate of the determinant-state distance.

    Samples ``s ~ |det Psi(s)|**2`` and ``s ~ |det Phi(s)|**2`` (independent seeds
    derived from ``cfg.seed``) and averages the cross ratios of determinants.
    """
    if control_variates:
        raise NotImplementedError("control-variate estimator is not available")
    if U.m != V.m or U.n != V.n:
        raise ModelError("subspaces must share m and n")
    FU, FV = U.matrix, V.matrix
    ss_u = sample_chain(U, cfg)
    ss_v = sample_chain(V, _child_cfg(cfg))
    su, sv = ss_u.flat(), ss_v.flat()
    r1 = _det_ratio(FV[su], FU[su])
    r2 = _det_ratio(FU[sv], FV[sv])
    C = cfg.n_chains
    return _distance_from_ratios(r1.reshape(C, -1).mean(axis=1), r2.reshape(C, -1).mean(axis=1))


def _det_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``det(num) / det(den)`` batched, through log-determinants to avoid underflow."""
    sn, ln = np.linalg.slogdet(num)
    sd, ld = np.linalg.slogdet(den)
    return sn / sd * np.exp(ln - ld)


def _child_cfg(cfg: DetSamplerConfig) -> DetSamplerConfig:
    """Configuration for the second chain family, with a derived seed."""
    child = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains + 1)[-1]
    seed = int(child.generate_state(1, dtype=np.uint64)[0])
    return DetSamplerConfig(
        cfg.n_chains, cfg.n_samples_per_chain, cfg.burn_in, cfg.thin, seed, cfg.proposal
    )


def state_distance_mc(psi: AmplitudeState, phi: AmplitudeState, cfg: DetSamplerConfig) -> DistanceEstimate:
    """Two-state Fubini-Study distance from ``E_psi[phi/psi] E_phi[psi/phi]``."""
    if psi.n != phi.n:
        raise ModelError("states live on different site counts")
    a, b = psi.amplitudes, phi.amplitudes

    def chain(amps, c):
        def log_weight(idx):
            return log_abs2(amps[idx[:, 0]])

        return metropolis(log_weight, psi.n, 1, c, np.array([int(np.argmax(np.abs(amps)))]))

    sa = chain(a, cfg).flat()[:, 0]
    sb = chain(b, _child_cfg(cfg)).flat()[:, 0]
    C = cfg.n_chains
    r1 = (b[sa] / a[sa]).reshape(C, -1).mean(axis=1)
    r2 = (a[sb] / b[sb]).reshape(C, -1).mean(axis=1)
    return _distance_from_ratios(r1, r2)


# --------------------------------------------------------------------------
# Ritz values and vectors

@dataclass
class RitzResult:
    values: np.ndarray
    vectors: np.ndarray
    imag: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def m(self) -> int:
        return self.values.size

    def state(self, family: BasisFamily, k: int) -> np.ndarray:
        """Hilbert-space Ritz vector ``sum_p P[p, k] phi_p``."""
        return family.matrix @ self.vectors[:, k]


def _sort_eig(w: np.ndarray, P: np.ndarray) -> RitzResult:
    order = np.argsort(w.real, kind="stable")
    return RitzResult(w.real[order].copy(), P[:, order], w.imag[order].copy())


def _check_gram(G: np.ndarray) -> None:
    """Reject a Gram matrix that is singular to double precision."""
    w = np.linalg.eigvalsh(0.5 * (G + G.conj().T))
    if w[-1] <= 0 or abs(w[0]) <= 10 * G.shape[0] * np.finfo(float).eps * w[-1]:
        raise ModelError("Gram matrix is singular to double precision")


def ritz_spectrum(source: GramPack | RayleighEstimate, label: str = "H") -> RitzResult:
    """Ritz values ascending with matching coefficient vectors.

    Exact packs solve ``G^(H) a = mu G a`` through a Cholesky factorization of
    ``G``; estimated packs and Rayleigh estimates eigendecompose ``M`` directly.
    """
    if isinstance(source, RayleighEstimate):
        w, P = np.linalg.eig(source.M)
        return _sort_eig(w, P)
    GH = source.op(label)
    _check_gram(source.G)
    if source.scale_known:
        A = 0.5 * (GH + GH.conj().T)
        B = 0.5 * (source.G + source.G.conj().T)
        try:
            w, P = scipy.linalg.eigh(A, B)
        except np.linalg.LinAlgError as exc:
            raise ModelError(f"Gram matrix is singular: {exc}") from None
        return RitzResult(w, P, np.zeros_like(w))
    try:
        M = np.linalg.solve(source.G, GH)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"Gram matrix is singular: {exc}") from None
    w, P = np.linalg.eig(M)
    return _sort_eig(w, P)


def ritz_observable(
    pack_h: GramPack,
    pack_a: GramPack | None = None,
    h_label: str = "H",
    a_label: str = "A",
    policy: Policy | str = "direct",
    rel_gap: float = 1e-10,
) -> np.ndarray:
    """Average of ``A`` on each Ritz vector, ``diag(P^-1 G^-1 G^(A) P)`` in Ritz order.

    Refuses degenerate Ritz values; for those, evaluate the direct ratio
    ``a^dag G^(A) a / a^dag G a`` on chosen coefficient vectors instead.
    """
    if pack_a is None:
        pack_a = pack_h
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    if pack_a.G.shape != pack_h.G.shape:
        raise ModelError("packs describe families of different size")
    ritz = ritz_spectrum(pack_h, h_label)
    mu = ritz.values
    scale = max(np.max(np.abs(mu)), 1e-300)
    if mu.size > 1 and np.min(np.diff(mu)) <= rel_gap * scale:
        raise DegenerateRitzError(
            "Ritz values are degenerate; use the direct ratio a^dag G^(A) a / a^dag G a"
        )
    MA = solve_gram(pack_a.G, pack_a.op(a_label), policy)
    P = ritz.vectors
    return np.real(np.diag(np.linalg.solve(P, MA @ P)))


def direct_ratio(pack: GramPack, alpha: np.ndarray, label: str) -> float:
    """``Re(a^dag G^(A) a / a^dag G a)``."""
    num = np.vdot(alpha, pack.op(label) @ alpha)
    den = np.vdot(alpha, pack.G @ alpha)
    return float((num / den).real)


# --------------------------------------------------------------------------
# ground-state interpolation

@dataclass
class InterpolationResult:
    gamma: np.ndarray
    mu0: float
    alpha: np.ndarray
    infidelity: float | None = None


class GroundStateInterpolator:
    """Lowest Ritz pair of ``sum_p gamma_p G^-1 G^(H_p)`` for many parameter points.

    The per-part matrices are computed once; every query is an ``m x m`` problem.
    """

    def __init__(self, packs: GramPack | Sequence[GramPack], labels: Sequence[str]):
        if isinstance(packs, GramPack):
            packs = [packs] * len(labels)
        packs = list(packs)
        if len(packs) != len(labels) or not packs:
            raise ModelError("need one pack per part label")
        first = packs[0]
        for p in packs[1:]:
            if p.scale_known != first.scale_known or p.provenance != first.provenance:
                raise ModelError("packs mix scale conventions (exact vs sum-of-states)")
            if p is not first and (p.run_id != first.run_id or not np.array_equal(p.G, first.G)):
                raise ModelError("packs come from different runs; their scales do not cancel")
        self.G = first.G
        self.scale_known = first.scale_known
        self.parts = [p.op(lab) for p, lab in zip(packs, labels)]

    def query(self, gamma: Sequence[float]) -> InterpolationResult:
        gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
        if gamma.size != len(self.parts):
            raise ModelError(f"expected {len(self.parts)} parameters, got {gamma.size}")
        GH = sum(g * part for g, part in zip(gamma, self.parts))
        pack = GramPack(self.G, {"H": GH}, self.scale_known, "interp")
        ritz = ritz_spectrum(pack, "H")
        return InterpolationResult(gamma, float(ritz.values[0]), ritz.vectors[:, 0])


def interpolate_ground_state(
    family: BasisFamily,
    packs: GramPack | Sequence[GramPack],
    labels: Sequence[str],
    gamma_query: Sequence[Sequence[float]],
    exact_states: Sequence[np.ndarray] | None = None,
) -> list[InterpolationResult]:
    """Interpolated ground states at each query point, with infidelities if available."""
    interp = GroundStateInterpolator(packs, labels)
    out = []
    for k, g in enumerate(gamma_query):
        res = interp.query(g)
        if exact_states is not None:
            res.infidelity = infidelity(exact_states[k], family.matrix @ res.alpha)
        out.append(res)
    return out
