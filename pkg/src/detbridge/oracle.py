"""Exact reference quantities: dense spectra, ground states and fidelities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .spin_model import ModelError, OperatorTerms
from .states import AmplitudeState

MAX_DENSE_DIAG_SITES = 12


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def residuals(self, H: OperatorTerms) -> np.ndarray:
        Hv = H.apply(self.eigenvectors)
        return np.linalg.norm(Hv - self.eigenvectors * self.eigenvalues, axis=0)


def diagonalize(H: OperatorTerms, n_lowest: int | None = None) -> SpectralDecomposition:
    """Hermitian eigendecomposition of the dense matrix, eigenvalues ascending.

    ``n_lowest`` restricts the computation to the lowest eigenpairs.
    """
    if H.n > MAX_DENSE_DIAG_SITES:
        raise ModelError(f"dense diagonalization limited to n <= {MAX_DENSE_DIAG_SITES}")
    dense = H.to_dense()
    if not np.any(dense.imag):
        dense = dense.real  # real symmetric eigh is several times faster
    subset = None if n_lowest is None else (0, min(n_lowest, H.dim) - 1)
    w, v = scipy.linalg.eigh(dense, subset_by_index=subset)
    return SpectralDecomposition(w, v.astype(complex))


def ground_state(H: OperatorTerms, tol: float = 1e-14) -> tuple[float, AmplitudeState]:
    """Lowest eigenpair from a sparse Lanczos (ARPACK) run."""
    if H.dim <= 64:
        spec = diagonalize(H, n_lowest=1)
        return float(spec.eigenvalues[0]), AmplitudeState(H.n, spec.eigenvectors[:, 0], "ground")
    v0 = np.full(H.dim, 1.0 / np.sqrt(H.dim))
    w, v = spla.eigsh(H.to_sparse().real, k=1, which="SA", tol=tol, v0=v0)
    return float(w[0]), AmplitudeState(H.n, v[:, 0].astype(complex), "ground")


def fidelity(a: AmplitudeState, b: AmplitudeState) -> float:
    """``|<a|b>|^2 / (||a||^2 ||b||^2)`` clamped to ``[0, 1]``."""
    if a.n != b.n:
        raise ModelError("states live on different site counts")
    return vector_fidelity(a.amplitudes, b.amplitudes)


def vector_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    na = np.vdot(a, a).real
    nb = np.vdot(b, b).real
    if na == 0 or nb == 0:
        raise ModelError("fidelity of a zero vector")
    return float(min(1.0, max(0.0, abs(np.vdot(a, b)) ** 2 / (na * nb))))


def infidelity(a, b) -> float:
    """``1 - fidelity`` computed from the component of ``b`` orthogonal to ``a``.

    Avoids the cancellation in ``1 - F`` so infidelities far below ``1e-16``
    are still resolved.
    """
    a = a.amplitudes if isinstance(a, AmplitudeState) else np.asarray(a)
    b = b.amplitudes if isinstance(b, AmplitudeState) else np.asarray(b)
    ua = a / np.linalg.norm(a)
    ub = b / np.linalg.norm(b)
    perp = ub - ua * np.vdot(ua, ub)
    return float(min(1.0, np.vdot(perp, perp).real))


class ExactPropagator:
    """Evolves states under ``exp(-iHt)`` from one dense eigendecomposition."""

    def __init__(self, H: OperatorTerms):
        self.H = H
        self.spectrum = diagonalize(H)

    def evolve(self, psi0: np.ndarray, t: float) -> np.ndarray:
        V = self.spectrum.eigenvectors
        c = V.conj().T @ psi0
        return V @ (np.exp(-1j * self.spectrum.eigenvalues * t) * c)

    def states_at(self, psi0: np.ndarray, times) -> np.ndarray:
        """Columns are the evolved states at each time."""
        V = self.spectrum.eigenvectors
        c = V.conj().T @ psi0
        phases = np.exp(-1j * np.outer(self.spectrum.eigenvalues, np.asarray(times)))
        return V @ (phases * c[:, None])
