"""Extended-precision complex dense matrices (MPFR/MPC through gmpy2).

Only the kernels the Bridge pipeline needs: LU solve, scaling-and-squaring
exponential, matrix-vector products and norms. Entries are ``gmpy2.mpc`` held
in numpy object arrays so products go through ``ndarray.dot``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import gmpy2
import numpy as np

DEFAULT_DIGITS = 200
MIN_DIGITS = 50
_GUARD_BITS = 16


class XPrecError(ArithmeticError):
    pass


class SingularMatrixError(XPrecError):
    pass


def digits_to_bits(digits: int) -> int:
    return int(math.ceil(digits * math.log2(10))) + _GUARD_BITS


@contextmanager
def working_precision(digits: int):
    with gmpy2.context(gmpy2.get_context(), precision=digits_to_bits(digits)):
        yield


def _to_mpc(z) -> gmpy2.mpc:
    if isinstance(z, gmpy2.mpc):
        return gmpy2.mpc(z)
    z = complex(z)
    return gmpy2.mpc(gmpy2.mpfr(z.real), gmpy2.mpfr(z.imag))


@dataclass(frozen=True, eq=False)
class XComplexMatrix:
    entries: np.ndarray
    digits: int = DEFAULT_DIGITS

    def __post_init__(self):
        if self.digits < MIN_DIGITS:
            raise XPrecError(f"digits must be >= {MIN_DIGITS}")
        if self.entries.ndim != 2:
            raise XPrecError("XComplexMatrix entries must be two-dimensional")

    @classmethod
    def from_array(cls, a, digits: int = DEFAULT_DIGITS) -> "XComplexMatrix":
        a = np.asarray(a)
        if a.ndim == 1:
            a = a[:, None]
        with working_precision(digits):
            flat = [_to_mpc(z) for z in a.ravel()]
        out = np.empty(len(flat), dtype=object)
        out[:] = flat
        return cls(out.reshape(a.shape), digits)

    @classmethod
    def identity(cls, m: int, digits: int = DEFAULT_DIGITS) -> "XComplexMatrix":
        return cls.from_array(np.eye(m), digits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def to_numpy(self) -> np.ndarray:
        """Round every entry to the nearest complex double."""
        return np.array([[complex(z) for z in row] for row in self.entries], dtype=complex)

    def to_strings(self) -> list:
        """Nested ``[[re, im], ...]`` decimal strings that round-trip at this precision."""
        with working_precision(self.digits):
            return [[[str(z.real), str(z.imag)] for z in row] for row in self.entries]

    @classmethod
    def from_strings(cls, data, digits: int = DEFAULT_DIGITS) -> "XComplexMatrix":
        with working_precision(digits):
            rows = [[gmpy2.mpc(gmpy2.mpfr(re), gmpy2.mpfr(im)) for re, im in row] for row in data]
        out = np.empty((len(rows), len(rows[0]) if rows else 0), dtype=object)
        for i, row in enumerate(rows):
            out[i, :] = row
        return cls(out, digits)

    def _wrap(self, entries) -> "XComplexMatrix":
        return XComplexMatrix(entries, self.digits)

    def __matmul__(self, other: "XComplexMatrix") -> "XComplexMatrix":
        if self.cols != other.rows:
            raise XPrecError(f"shape mismatch {self.shape} @ {other.shape}")
        with working_precision(max(self.digits, other.digits)):
            return XComplexMatrix(self.entries.dot(other.entries), max(self.digits, other.digits))

    def __add__(self, other: "XComplexMatrix") -> "XComplexMatrix":
        with working_precision(self.digits):
            return self._wrap(self.entries + other.entries)

    def __sub__(self, other: "XComplexMatrix") -> "XComplexMatrix":
        with working_precision(self.digits):
            return self._wrap(self.entries - other.entries)

    def scale(self, c) -> "XComplexMatrix":
        with working_precision(self.digits):
            c = _to_mpc(c)
            return self._wrap(self.entries * c)

    def conj_transpose(self) -> "XComplexMatrix":
        with working_precision(self.digits):
            conj = np.vectorize(lambda z: z.conjugate(), otypes=[object])(self.entries)
        return self._wrap(conj.T.copy())


def xp_norm1(a: XComplexMatrix) -> gmpy2.mpfr:
    """Maximum absolute column sum."""
    with working_precision(a.digits):
        return max(sum((abs(z) for z in a.entries[:, j]), gmpy2.mpfr(0)) for j in range(a.cols))


def xp_norm_fro(a: XComplexMatrix) -> gmpy2.mpfr:
    with working_precision(a.digits):
        return gmpy2.sqrt(sum((gmpy2.norm(z) for z in a.entries.ravel()), gmpy2.mpfr(0)))


def xp_matvec(a: XComplexMatrix, v) -> XComplexMatrix:
    if not isinstance(v, XComplexMatrix):
        v = XComplexMatrix.from_array(np.asarray(v).reshape(-1, 1), a.digits)
    return a @ v


def xp_lu(a: XComplexMatrix):
    """Partial-pivoted LU, returned packed as ``(lu, perm, min_pivot_ratio)``.

    ``min_pivot_ratio`` is the smallest ``|pivot| / max|a|`` encountered.
    """
    if a.rows != a.cols:
        raise XPrecError("LU needs a square matrix")
    m = a.rows
    with working_precision(a.digits):
        lu = a.entries.copy()
        perm = np.arange(m)
        scale = max((abs(z) for z in lu.ravel()), default=gmpy2.mpfr(0))
        if scale == 0:
            raise SingularMatrixError("zero matrix")
        min_ratio = None
        for k in range(m):
            mags = [abs(lu[i, k]) for i in range(k, m)]
            p = k + int(np.argmax(mags))
            if p != k:
                lu[[k, p]] = lu[[p, k]]
                perm[[k, p]] = perm[[p, k]]
            pivot = lu[k, k]
            ratio = abs(pivot) / scale
            min_ratio = ratio if min_ratio is None else min(min_ratio, ratio)
            if pivot == 0:
                return lu, perm, gmpy2.mpfr(0)
            if k + 1 < m:
                lu[k + 1 :, k] = lu[k + 1 :, k] / pivot
                lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, perm, min_ratio


def xp_solve(a: XComplexMatrix, b: XComplexMatrix, check_residual: bool = True) -> XComplexMatrix:
    """Solve ``a x = b`` by partial-pivoted LU at the working precision of ``a``.

    Raises ``SingularMatrixError`` when a pivot falls below ``10**(-digits/2)``
    relative to the largest entry, or when the residual check fails.
    """
    if not isinstance(b, XComplexMatrix):
        b = XComplexMatrix.from_array(b, a.digits)
    if a.rows != b.rows:
        raise XPrecError(f"shape mismatch {a.shape} vs {b.shape}")
    digits = a.digits
    lu, perm, min_ratio = xp_lu(a)
    threshold = gmpy2.mpfr(10) ** (-(digits // 2))
    if min_ratio < threshold:
        raise SingularMatrixError(
            f"matrix is singular to {digits} digits (pivot ratio {float(min_ratio):.3g}); "
            "use a pseudo-inverse policy instead"
        )
    m = a.rows
    with working_precision(digits):
        x = b.entries[perm].copy()
        for k in range(m):  # unit lower triangular
            if k + 1 < m:
                x[k + 1 :] -= np.outer(lu[k + 1 :, k], x[k])
        for k in range(m - 1, -1, -1):
            x[k] = x[k] / lu[k, k]
            if k > 0:
                x[:k] -= np.outer(lu[:k, k], x[k])
    out = XComplexMatrix(x, digits)
    if check_residual:
        res = xp_norm_fro(a @ out - b)
        bound = threshold * xp_norm_fro(b)
        if res > bound:
            raise SingularMatrixError(
                f"residual {float(res):.3g} exceeds 1e-{digits // 2} * ||b||; "
                "use a pseudo-inverse policy instead"
            )
    return out


def xp_inverse(a: XComplexMatrix) -> XComplexMatrix:
    return xp_solve(a, XComplexMatrix.identity(a.rows, a.digits))


def xp_expm(a: XComplexMatrix, max_scaled_norm: float = 2.0**-8) -> XComplexMatrix:
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    The matrix is scaled by ``2**-j`` until its 1-norm is below
    ``max_scaled_norm`` (at most 1/2), the series is summed until a term drops
    below ``10**-digits`` in norm, and the result is squared ``j`` times.
    """
    if a.rows != a.cols:
        raise XPrecError("expm needs a square matrix")
    if not 0 < max_scaled_norm <= 0.5:
        raise XPrecError("max_scaled_norm must be in (0, 1/2]")
    digits = a.digits
    m = a.rows
    norm = xp_norm1(a)
    j = 0
    if norm > 0:
        j = max(0, int(math.ceil(math.log2(float(norm) / max_scaled_norm))) + 1)
    with working_precision(digits):
        scaled = a.entries * (gmpy2.mpfr(2) ** (-j))
        tol = gmpy2.mpfr(10) ** (-digits)
        eye = XComplexMatrix.identity(m, digits).entries
        result = eye.copy()
        term = eye.copy()
        k = 1
        while True:
            term = term.dot(scaled) / k
            result = result + term
            tnorm = max(sum((abs(z) for z in term[:, c]), gmpy2.mpfr(0)) for c in range(m))
            if tnorm < tol or k > 10 * digits:
                break
            k += 1
        for _ in range(j):
            result = result.dot(result)
    return XComplexMatrix(result, digits)
