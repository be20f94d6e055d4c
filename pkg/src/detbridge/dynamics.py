"""Basis generation for Bridge: exact evolution, product-expansion schemes and noise.

Product schemes are applied exactly to dense vectors. ``H0`` is the part of the
Hamiltonian diagonal in the computational basis and ``H1`` the off-diagonal rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .oracle import MAX_DENSE_DIAG_SITES, ExactPropagator, infidelity
from .spin_model import ModelError, OperatorTerms
from .states import AmplitudeState, BasisFamily

MAX_KRYLOV_SITES = 16
KRYLOV_TOL = 1e-12


# --------------------------------------------------------------------------
# generators: the operations a scheme needs from a Hamiltonian

class DenseGenerator:
    """Scheme backend for an explicit Hermitian matrix (used for order checks)."""

    def __init__(self, H: np.ndarray):
        self.H = np.asarray(H, dtype=complex)
        self.d = np.real(np.diag(self.H)).copy()
        self.off = self.H - np.diag(self.d)

    def full(self, v):
        return self.H @ v

    def offdiag(self, v):
        return self.off @ v

    def exp_diag(self, c, v):
        return np.exp(-1j * c * self.d) * v

    def exp_offdiag(self, c, v):
        return scipy.linalg.expm(-1j * c * self.off) @ v

    def exp_full(self, t, v):
        return scipy.linalg.expm(-1j * t * self.H) @ v


class TermsGenerator:
    """Scheme backend for ``OperatorTerms``; off-diagonal part is a sum of X fields."""

    def __init__(self, H: OperatorTerms):
        self.op = H
        self.n = H.n
        self.d = H.diagonal_values(np.arange(H.dim))
        self.w = H.x_weights
        self.idx = np.arange(H.dim, dtype=np.int64)
        self._prop = None

    def full(self, v):
        return self.op.apply(v)

    def offdiag(self, v):
        out = np.zeros_like(v, dtype=complex)
        for site, w in enumerate(self.w):
            if w != 0:
                out += w * v[self.idx ^ (1 << site)]
        return out

    def exp_diag(self, c, v):
        return np.exp(-1j * c * self.d) * v

    def exp_offdiag(self, c, v):
        # X fields on distinct sites commute and X^2 = 1
        v = np.asarray(v, dtype=complex)
        for site, w in enumerate(self.w):
            if w != 0:
                v = np.cos(c * w) * v - 1j * np.sin(c * w) * v[self.idx ^ (1 << site)]
        return v

    def exp_full(self, t, v):
        return exact_evolve_vector(self.op, v, t)


def _generator(H):
    if isinstance(H, OperatorTerms):
        return TermsGenerator(H)
    return DenseGenerator(H)


# --------------------------------------------------------------------------
# exact evolution

def krylov_evolve(H: OperatorTerms, psi, t: float, tol: float = KRYLOV_TOL, kmax: int = 30):
    """Lanczos propagation of ``exp(-iHt) psi`` with adaptive substeps.

    Each substep builds a Krylov basis of dimension up to ``kmax`` and shrinks
    the substep until the a-posteriori error estimate
    ``beta_k * |[exp(-i T dt) e_1]_{k-1}|`` is below ``tol``.
    """
    v = np.asarray(psi, dtype=complex).copy()
    norm0 = np.linalg.norm(v)
    if t == 0 or norm0 == 0:
        return v
    sign = 1.0 if t > 0 else -1.0
    remaining = abs(t)
    dt = remaining
    while remaining > 0:
        beta0 = np.linalg.norm(v)
        V = np.zeros((v.size, kmax + 1), dtype=complex)
        V[:, 0] = v / beta0
        alpha = np.zeros(kmax)
        beta = np.zeros(kmax)
        k_used = kmax
        for j in range(kmax):
            w = H.apply(V[:, j])
            alpha[j] = np.vdot(V[:, j], w).real
            w -= alpha[j] * V[:, j]
            if j > 0:
                w -= beta[j - 1] * V[:, j - 1]
            # full reorthogonalization keeps the small basis accurate
            w -= V[:, : j + 1] @ (V[:, : j + 1].conj().T @ w)
            beta[j] = np.linalg.norm(w)
            if beta[j] < 1e-14 * beta0 + 1e-300:
                k_used = j + 1
                break
            V[:, j + 1] = w / beta[j]
        k = k_used
        T = np.diag(alpha[:k]) + np.diag(beta[: k - 1], 1) + np.diag(beta[: k - 1], -1)
        evals, evecs = np.linalg.eigh(T)
        happy = k < kmax
        step = min(dt, remaining)
        while True:
            y = evecs @ (np.exp(-1j * sign * evals * step) * evecs[0].conj())
            err = 0.0 if happy else beta[k - 1] * abs(y[-1])
            if err <= tol or step < 1e-10 * abs(t):
                break
            step *= 0.5
        v = beta0 * (V[:, :k] @ y)
        remaining -= step
        dt = step * 1.5 if err < tol * 1e-3 else step
    return v


def exact_evolve_vector(H: OperatorTerms, psi, t: float, method: str = "auto") -> np.ndarray:
    if H.n > MAX_KRYLOV_SITES:
        raise ModelError(f"exact evolution limited to n <= {MAX_KRYLOV_SITES}")
    if method == "auto":
        method = "dense" if H.n <= MAX_DENSE_DIAG_SITES else "krylov"
    if method == "dense":
        return ExactPropagator(H).evolve(np.asarray(psi, dtype=complex), t)
    if method == "krylov":
        return krylov_evolve(H, psi, t)
    raise ValueError(f"unknown evolution method {method!r}")


def exact_evolve(H: OperatorTerms, psi0: AmplitudeState, t: float, method: str = "auto") -> AmplitudeState:
    """``exp(-iHt)|psi0>``: dense spectral up to 12 sites, Lanczos up to 16."""
    if H.n != psi0.n:
        raise ModelError("operator and state site counts differ")
    if t == 0:
        return psi0
    out = exact_evolve_vector(H, psi0.amplitudes, t, method)
    return AmplitudeState(psi0.n, out, f"{psi0.label}@t={t:g}")


# --------------------------------------------------------------------------
# product-expansion schemes

SCHEME_KINDS = ("taylor", "lpe", "slpe", "trotter2", "exact")


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    order: int
    a: tuple[complex, ...] = ()
    b: tuple[complex, ...] = ()

    @property
    def substeps(self) -> int:
        return max(len(self.a), 1)

    @property
    def name(self) -> str:
        if self.kind in ("trotter2", "exact"):
            return self.kind
        return f"{self.kind}{self.order}"

    def step(self, H, v: np.ndarray, delta: float, renormalize: bool = True) -> np.ndarray:
        """Apply one time step of length ``delta`` to ``v``."""
        gen = H if isinstance(H, (DenseGenerator, TermsGenerator)) else _generator(H)
        norm = (lambda x: x / np.linalg.norm(x)) if renormalize else (lambda x: x)
        v = np.asarray(v, dtype=complex)
        if self.kind == "exact":
            return norm(gen.exp_full(delta, v))
        if self.kind == "taylor":
            out = v.copy()
            term = v.copy()
            for k in range(1, self.order + 1):
                term = (-1j * delta / k) * gen.full(term)
                out = out + term
            return norm(out)
        if self.kind == "lpe":
            for ak in self.a:
                v = norm(v - 1j * ak * delta * gen.full(v))
            return v
        if self.kind == "slpe":
            for ak, bk in zip(self.a, self.b):
                v = norm(gen.exp_diag(bk * delta, v))
                v = norm(v - 1j * ak * delta * gen.offdiag(v))
            return v
        if self.kind == "trotter2":
            v = norm(gen.exp_diag(0.5 * delta, v))
            v = norm(gen.exp_offdiag(delta, v))
            return norm(gen.exp_diag(0.5 * delta, v))
        raise ModelError(f"unknown scheme kind {self.kind!r}")

    def step_matrix(self, H: np.ndarray, delta: float) -> np.ndarray:
        """Dense one-step operator (no renormalization) for a matrix generator."""
        gen = DenseGenerator(H)
        eye = np.eye(gen.H.shape[0], dtype=complex)
        return np.column_stack(
            [self.step(gen, eye[:, j], delta, renormalize=False) for j in range(eye.shape[0])]
        )


def lpe_coefficients(order: int) -> tuple[complex, ...]:
    """``a_k`` with ``prod_k (1 - i a_k x) = sum_{j<=order} (-i x)^j / j!``.

    With ``y = -i x`` each factor is ``1 + a_k y``, so ``-1/a_k`` are the roots of
    the truncated exponential series in ``y``; roots are polished by Newton steps.
    """
    poly = [1.0 / math.factorial(j) for j in range(order, -1, -1)]
    roots = np.roots(poly).astype(complex)
    dpoly = np.polyder(poly)
    for _ in range(5):
        roots = roots - np.polyval(poly, roots) / np.polyval(dpoly, roots)
    a = sorted((-1.0 / r for r in roots), key=lambda z: (round(z.real, 12), -z.imag))
    return tuple(complex(z) for z in a)


# Order conditions for prod_{k=1,2} (1 - i a_k H1 d) exp(-i b_k H0 d) with the
# k=1 factor applied first; matching exp(-i (H0 + H1) d) through second order.
def _slpe2_conditions(a1, a2, b1, b2):
    return [
        a1 + a2 - 1,  # H1
        b1 + b2 - 1,  # H0
        a1 * a2 - 0.5,  # H1 H1
        b2 * a1 - 0.5,  # H0 H1
        a1 * b1 + a2 * b2 + a2 * b1 - 0.5,  # H1 H0
        0.5 * (b1 + b2) ** 2 - 0.5,  # H0 H0
    ]


SLPE2_START = (0.6 + 0.4j, 0.4 - 0.6j, 0.6 + 0.4j, 0.4 - 0.6j)


def slpe2_coefficients(start: Sequence[complex] = SLPE2_START) -> tuple[tuple, tuple]:
    """Solve the second-order conditions with a least-squares root finder."""

    def residual(x):
        z = x[0::2] + 1j * x[1::2]
        r = np.array(_slpe2_conditions(*z))
        return np.concatenate([r.real, r.imag])

    x0 = np.array([[z.real, z.imag] for z in map(complex, start)]).ravel()
    sol = scipy.optimize.least_squares(residual, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    z = sol.x[0::2] + 1j * sol.x[1::2]
    if np.max(np.abs(residual(sol.x))) > 1e-13:
        raise ModelError("SLPE2 order conditions did not converge")
    return (complex(z[0]), complex(z[1])), (complex(z[2]), complex(z[3]))


def scheme_coefficients(kind: str, order: int | None = None) -> SchemeSpec:
    if kind not in SCHEME_KINDS:
        raise ModelError(f"unknown scheme {kind!r}")
    if kind == "exact":
        return SchemeSpec("exact", 0)
    if kind == "trotter2":
        return SchemeSpec("trotter2", 2)
    if order is None or not 1 <= order <= 4:
        raise ModelError(f"{kind} supports orders 1..4, got {order}")
    if kind == "taylor":
        return SchemeSpec("taylor", order)
    if kind == "lpe":
        return SchemeSpec("lpe", order, lpe_coefficients(order))
    if order != 2:
        raise ModelError("slpe is only available at order 2")
    a, b = slpe2_coefficients()
    return SchemeSpec("slpe", 2, a, b)


def parse_scheme(text: str) -> SchemeSpec:
    """``exact``, ``trotter2`` or a kind followed by its order, e.g. ``lpe2``."""
    if text in ("exact", "trotter2"):
        return scheme_coefficients(text)
    for kind in ("taylor", "slpe", "lpe"):
        if text.startswith(kind) and text[len(kind):].isdigit():
            return scheme_coefficients(kind, int(text[len(kind):]))
    raise ModelError(f"cannot parse scheme {text!r}")


def one_step_error(scheme: SchemeSpec, H: np.ndarray, delta: float) -> float:
    """Spectral-norm distance between the scheme step and ``exp(-iH delta)``."""
    exact = scipy.linalg.expm(-1j * delta * np.asarray(H))
    return float(np.linalg.norm(scheme.step_matrix(H, delta) - exact, 2))


def richardson_slope(scheme: SchemeSpec, H: np.ndarray, deltas: Sequence[float]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(delta)``."""
    errs = [one_step_error(scheme, H, d) for d in deltas]
    return float(np.polyfit(np.log(deltas), np.log(errs), 1)[0])


# --------------------------------------------------------------------------
# basis generation

@dataclass(frozen=True)
class Noise:
    """``eps = 0`` means noiseless; otherwise complex Gaussian of relative norm ``eps``."""

    eps: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise ModelError("noise eps must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "Noise":
        if text in ("none", "", None):
            return cls(0.0)
        if text.startswith("g:"):
            return cls(float(text[2:]))
        raise ModelError(f"cannot parse noise {text!r}")

    @property
    def descriptor(self) -> str:
        return "none" if self.eps == 0 else f"gaussian({self.eps:g})"

    def apply(self, v: np.ndarray, rng) -> np.ndarray:
        if self.eps == 0:
            return v
        eta = rng.normal(size=v.shape) + 1j * rng.normal(size=v.shape)
        eta *= self.eps * np.linalg.norm(v) / np.linalg.norm(eta)
        out = v + eta
        return out / np.linalg.norm(out)


@dataclass
class GenerationReport:
    times: list[float]
    delta: float
    scheme: str
    noise: str
    seed: int
    infidelity: list[float]
    step_infidelity: list[float]
    files: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "times": self.times,
            "delta": self.delta,
            "scheme": self.scheme,
            "noise": self.noise,
            "seed": self.seed,
            "infidelity": self.infidelity,
            "step_infidelity": self.step_infidelity,
            "files": self.files,
        }


def generate_basis(
    H: OperatorTerms,
    psi0: AmplitudeState,
    delta: float,
    steps: int,
    scheme: SchemeSpec,
    noise: Noise = Noise(),
    seed: int = 0,
) -> tuple[BasisFamily, GenerationReport]:
    """Family ``[psi0, psi(delta), ..., psi(steps*delta)]`` from repeated scheme steps.

    Every state is normalized. The report compares each state with the exact
    dynamics at ``k*delta`` and with one exact step from the previous state.
    """
    if steps < 1:
        raise ModelError("steps must be >= 1")
    if H.n != psi0.n:
        raise ModelError("operator and state site counts differ")
    if H.n > MAX_KRYLOV_SITES:
        raise ModelError(f"basis generation limited to n <= {MAX_KRYLOV_SITES}")
    gen = TermsGenerator(H)
    rng = np.random.default_rng(seed)
    dense = H.n <= MAX_DENSE_DIAG_SITES
    prop = ExactPropagator(H) if dense else None

    def exact_step(v, t):
        return prop.evolve(v, t) if dense else krylov_evolve(H, v, t)

    v0 = psi0.amplitudes / psi0.norm()
    states = [v0]
    times = [0.0]
    infid = [0.0]
    step_infid = [0.0]
    v = v0
    for k in range(1, steps + 1):
        if scheme.kind == "exact":
            nxt = exact_step(v, delta)
            nxt = nxt / np.linalg.norm(nxt)
        else:
            nxt = scheme.step(gen, v, delta)
        nxt = noise.apply(nxt, rng)
        step_infid.append(infidelity(exact_step(v, delta), nxt))
        v = nxt
        states.append(v)
        times.append(k * delta)
        infid.append(infidelity(exact_step(v0, k * delta), v))
    family = BasisFamily.from_matrix(
        np.column_stack(states), labels=[f"{scheme.name}_t{k}" for k in range(steps + 1)]
    )
    report = GenerationReport(
        times=times,
        delta=delta,
        scheme=scheme.name,
        noise=noise.descriptor,
        seed=seed,
        infidelity=infid,
        step_infidelity=step_infid,
    )
    return family, report
