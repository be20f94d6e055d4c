"""Bridge: linear-combination dynamics on a fixed family of basis states.

The coefficients of ``|psi_a(t)> = sum_k a_k(t) |phi_k>`` follow the effective
Schrodinger equation ``da/dt = -i M a`` with the Rayleigh matrix ``M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import xprec
from .oracle import infidelity
from .rayleigh import GramPack, RayleighEstimate
from .spin_model import ModelError
from .states import BasisFamily


@dataclass(frozen=True)
class GaugeNote:
    """TDVP solutions differ by ``lambda * a``; the scalar only changes norm and phase.

    Bridge always takes ``lambda = 0``.
    """

    lambda_choice: int = 0


@dataclass
class BridgeTrajectory:
    times: np.ndarray
    alphas: np.ndarray  # (T, m)
    rayleigh_source: dict = field(default_factory=dict)
    precision_digits: int = xprec.DEFAULT_DIGITS
    mode: str = "stepped"

    @property
    def m(self) -> int:
        return self.alphas.shape[1]

    def state(self, family: BasisFamily, k: int) -> np.ndarray:
        return family.matrix @ self.alphas[k]

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "alphas": np.stack([self.alphas.real, self.alphas.imag], axis=-1).tolist(),
            "rayleigh_source": self.rayleigh_source,
            "precision_digits": self.precision_digits,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BridgeTrajectory":
        a = np.asarray(data["alphas"], dtype=float)
        return cls(
            np.asarray(data["times"], dtype=float),
            a[..., 0] + 1j * a[..., 1],
            data.get("rayleigh_source", {}),
            int(data.get("precision_digits", xprec.DEFAULT_DIGITS)),
            data.get("mode", "stepped"),
        )


def refined_grid(basis_times: Sequence[float], refine: int = 10, extrapolate: float = 0.0) -> np.ndarray:
    """``refine`` points per basis interval, optionally extended past the last basis time.

    The basis times themselves are always on the grid.
    """
    basis_times = np.asarray(basis_times, dtype=float)
    if basis_times.size < 2:
        return basis_times.copy()
    delta = basis_times[1] - basis_times[0]
    t_end = basis_times[-1] + extrapolate
    n_int = int(round((t_end - basis_times[0]) / delta * refine))
    grid = basis_times[0] + np.arange(n_int + 1) * (delta / refine)
    grid[::refine][: basis_times.size] = basis_times
    return grid


def _validate_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] != 0 or np.any(np.diff(times) < 0):
        raise ModelError("times must be sorted ascending and start at 0")
    return times


def _spacing_key(dt: float) -> float:
    return float(f"{dt:.12e}")


def _matrix(M) -> tuple[np.ndarray | xprec.XComplexMatrix, dict]:
    """The generator, preferring the extended-precision copy when one exists."""
    if isinstance(M, RayleighEstimate):
        source = {"assembly_policy": M.assembly_policy, "imag_policy": M.imag_policy}
        return (M.M if M.M_xp is None else M.M_xp), source
    if isinstance(M, xprec.XComplexMatrix):
        return M, {}
    return np.asarray(M, dtype=complex), {}


def _to_xp(M, digits: int) -> xprec.XComplexMatrix:
    if isinstance(M, xprec.XComplexMatrix):
        return xprec.XComplexMatrix(M.entries, digits)
    return xprec.XComplexMatrix.from_array(M, digits)


def _step_matrices(mats: dict, digits: int) -> dict:
    """``expm(-i M dt)`` in extended precision for each ``(dt, M)`` key."""
    return {key: xprec.xp_expm(_to_xp(M, digits).scale(-1j * dt)) for key, (M, dt) in mats.items()}


def _check_growth(alphas: np.ndarray, digits: int) -> None:
    """Refuse when the coefficients grew enough to consume half the working digits."""
    growth = np.max(np.linalg.norm(alphas, axis=1)) / np.linalg.norm(alphas[0])
    if not np.isfinite(growth) or math.log10(max(growth, 1.0)) > digits / 2:
        raise xprec.XPrecError(
            f"coefficient norm grew by {growth:.3g}, beyond the precision budget of "
            f"{digits} digits; raise --digits or shorten the horizon"
        )


def _stepper(times, matrix_at: Callable[[int], tuple[np.ndarray, tuple]], alpha0, digits):
    m = alpha0.size
    intervals = {}
    keys = []
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        M, tag = matrix_at(k)
        key = (_spacing_key(dt), tag)
        keys.append(key)
        intervals.setdefault(key, (M, dt))
    steps = _step_matrices(intervals, digits)
    alphas = np.empty((times.size, m), dtype=complex)
    a = xprec.XComplexMatrix.from_array(alpha0.reshape(-1, 1), digits)
    alphas[0] = alpha0
    for k, key in enumerate(keys):
        a = steps[key] @ a
        alphas[k + 1] = a.to_numpy()[:, 0]
    _check_growth(alphas, digits)
    return alphas


def bridge_solve(
    M: RayleighEstimate | np.ndarray,
    times: Sequence[float],
    alpha0: np.ndarray | None = None,
    digits: int = xprec.DEFAULT_DIGITS,
    mode: str = "stepped",
) -> BridgeTrajectory:
    """Coefficients ``a(t) = expm(-i M t) a(0)`` on a time grid.

    ``stepped`` computes one extended-precision step matrix per distinct grid
    spacing and propagates; ``direct`` exponentiates ``-i M t`` at every time.
    """
    Mat, source = _matrix(M)
    m = Mat.shape[0]
    source["extended_generator"] = isinstance(Mat, xprec.XComplexMatrix)
    times = _validate_times(times)
    if alpha0 is None:
        alpha0 = np.zeros(m, dtype=complex)
        alpha0[0] = 1.0
    alpha0 = np.asarray(alpha0, dtype=complex)
    if alpha0.shape != (m,) or not np.any(alpha0):
        raise ModelError("alpha0 must be a non-zero vector of length m")
    if mode == "stepped":
        alphas = _stepper(times, lambda k: (Mat, ()), alpha0, digits)
    elif mode == "direct":
        alphas = np.empty((times.size, m), dtype=complex)
        Mx = _to_xp(Mat, digits)
        a0 = xprec.XComplexMatrix.from_array(alpha0.reshape(-1, 1), digits)
        for k, t in enumerate(times):
            alphas[k] = alpha0 if t == 0 else (xprec.xp_expm(Mx.scale(-1j * t)) @ a0).to_numpy()[:, 0]
        _check_growth(alphas, digits)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BridgeTrajectory(times, alphas, source, digits, mode)


def bridge_solve_time_dependent(
    parts: Sequence[RayleighEstimate | np.ndarray],
    betas: Callable[[float], Sequence[float]] | np.ndarray,
    times: Sequence[float],
    alpha0: np.ndarray | None = None,
    digits: int = xprec.DEFAULT_DIGITS,
) -> BridgeTrajectory:
    """Bridge for ``H(t) = sum_p beta_p(t) H_p`` with ``beta`` held constant on each grid interval.

    On ``[t_k, t_{k+1}]`` the generator is ``sum_p beta_p(t_k) M_p``.
    """
    mats = [p.M if isinstance(p, RayleighEstimate) else np.asarray(p, dtype=complex) for p in parts]
    m = mats[0].shape[0]
    times = _validate_times(times)
    if callable(betas):
        beta_grid = np.array([np.atleast_1d(betas(t)) for t in times], dtype=float)
    else:
        beta_grid = np.atleast_2d(np.asarray(betas, dtype=float))
        if beta_grid.shape[0] == 1:
            beta_grid = np.repeat(beta_grid, times.size, axis=0)
    if beta_grid.shape != (times.size, len(mats)):
        raise ModelError("need one coefficient per part at every grid time")
    if alpha0 is None:
        alpha0 = np.zeros(m, dtype=complex)
        alpha0[0] = 1.0
    alpha0 = np.asarray(alpha0, dtype=complex)

    def matrix_at(k):
        beta = beta_grid[k]
        return sum(b * M for b, M in zip(beta, mats)), tuple(beta.tolist())

    alphas = _stepper(times, matrix_at, alpha0, digits)
    return BridgeTrajectory(times, alphas, {"time_dependent": True}, digits, "stepped")


@dataclass
class ObservableSeries:
    times: np.ndarray
    values: np.ndarray
    imag_residue: np.ndarray


def _quadratic_forms_xp(Ax: xprec.XComplexMatrix, Mx: xprec.XComplexMatrix) -> np.ndarray:
    """``a_t^dag M a_t`` for every column ``a_t`` of ``Ax``, summed in extended precision."""
    Y = Mx @ Ax
    with xprec.working_precision(Ax.digits):
        conj = np.vectorize(lambda z: z.conjugate(), otypes=[object])(Ax.entries)
        sums = (conj * Y.entries).sum(axis=0)
    return np.array([complex(z) for z in sums])


def bridge_observable(pack: GramPack, label: str, traj: BridgeTrajectory) -> ObservableSeries:
    """``Re(a^dag G^(A) a / a^dag G a)`` at every trajectory time.

    With extended-precision copies on the pack both quadratic forms are summed
    at that precision; for nearly dependent families the coefficients are large
    and the double-precision forms cancel catastrophically.
    """
    a = traj.alphas
    Gx, GAx = pack.op_xp("G"), pack.op_xp(label)
    if Gx is not None and GAx is not None:
        Ax = xprec.XComplexMatrix.from_array(a.T, Gx.digits)
        num = _quadratic_forms_xp(Ax, GAx)
        den = _quadratic_forms_xp(Ax, Gx)
    else:
        GA = pack.op(label)
        num = np.einsum("ti,ij,tj->t", a.conj(), GA, a)
        den = np.einsum("ti,ij,tj->t", a.conj(), pack.G, a)
    if np.any(np.abs(den) < 1e-300):
        raise ModelError("degenerate coefficient vector (a^dag G a vanishes)")
    ratio = num / den
    return ObservableSeries(traj.times, ratio.real, ratio.imag)


def bridge_infidelity(traj: BridgeTrajectory, family: BasisFamily, oracle: np.ndarray) -> np.ndarray:
    """Infidelity of ``sum_k a_k(t) phi_k`` with exact states (columns of ``oracle``).

    Evaluated on the dense Bridge state, equal to
    ``1 - |<psi|psi_a>|^2 / (||psi||^2 a^dag G a)``.
    """
    oracle = np.asarray(oracle)
    if oracle.ndim != 2 or oracle.shape[1] != traj.times.size:
        raise ModelError("oracle must hold one exact state per trajectory time")
    states = family.matrix @ traj.alphas.T
    return np.array([infidelity(oracle[:, k], states[:, k]) for k in range(traj.times.size)])


def optimal_in_subspace(
    family: BasisFamily,
    oracle_state: np.ndarray,
    pack: GramPack | None = None,
    digits: int = xprec.DEFAULT_DIGITS,
    cond_switch: float = 1e8,
) -> float:
    """Smallest infidelity with ``oracle_state`` reachable in the family's span.

    Computes ``1 - v^dag G^-1 v / ||psi||^2`` with ``v_k = <phi_k|psi>``; the
    solve runs in extended precision once ``cond(G)`` exceeds ``cond_switch``.
    """
    psi = np.asarray(oracle_state, dtype=complex)
    F = family.matrix
    G = F.conj().T @ F if pack is None else pack.G
    if pack is not None and not pack.scale_known:
        raise ModelError("the optimal infidelity needs an exactly scaled Gram matrix")
    norm2 = np.vdot(psi, psi).real
    Gx = None if pack is None else pack.op_xp("G")
    if Gx is not None:
        # overlaps in extended precision too, so nothing is rounded before the solve
        Gx = xprec.XComplexMatrix(Gx.entries, digits)
        Fh = xprec.XComplexMatrix.from_array(F, digits).conj_transpose()
        vx = Fh @ xprec.XComplexMatrix.from_array(psi.reshape(-1, 1), digits)
    else:
        v = F.conj().T @ psi
        if np.linalg.cond(G) <= cond_switch:
            val = 1 - np.vdot(v, np.linalg.solve(G, v)).real / norm2
            return float(min(1.0, max(0.0, val)))
        Gx = xprec.XComplexMatrix.from_array(G, digits)
        vx = xprec.XComplexMatrix.from_array(v.reshape(-1, 1), digits)
    try:
        x = xprec.xp_solve(Gx, vx)
    except xprec.SingularMatrixError as exc:
        raise ModelError(f"Gram matrix is singular: {exc}") from None
    with xprec.working_precision(digits):
        proj = (vx.conj_transpose() @ x).entries[0, 0].real
        val = 1 - proj / xprec.XComplexMatrix.from_array(np.array([[norm2]]), digits).entries[0, 0].real
    return float(min(1.0, max(0.0, float(val))))


def optimal_in_subspace_qr(family: BasisFamily, oracle_state: np.ndarray) -> float:
    """Same quantity from an orthonormalized basis; no Gram matrix is formed."""
    Q, _ = np.linalg.qr(family.matrix)
    psi = np.asarray(oracle_state, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    perp = psi - Q @ (Q.conj().T @ psi)
    return float(min(1.0, np.vdot(perp, perp).real))


def tdvp_residual(G: np.ndarray, GH: np.ndarray, alpha: np.ndarray) -> float:
    """Relative residual of ``S adot = -i F`` at ``adot = -i G^-1 G^(H) a``.

    ``S`` and ``F`` are the quantum geometric tensor and force vector of the
    linear state ``sum_k a_k phi_k``. Returns ``||S adot + i F|| / ||F||``,
    measured against the force scale when ``F`` vanishes.
    """
    a = np.asarray(alpha, dtype=complex)
    Ga = G @ a
    n2 = np.vdot(a, Ga).real
    S = (G - np.outer(Ga, Ga.conj()) / n2) / n2
    e = np.vdot(a, GH @ a) / n2
    F = (GH @ a - e * Ga) / n2
    adot = -1j * np.linalg.solve(G, GH @ a)
    res = np.linalg.norm(S @ adot + 1j * F)
    fnorm = np.linalg.norm(F)
    ref = np.linalg.norm(GH @ a) / n2
    if fnorm <= 1e-12 * ref or fnorm == 0:
        return float(res / ref) if ref > 0 else 0.0
    return float(res / fnorm)
