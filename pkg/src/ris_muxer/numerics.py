"""Complex dense linear algebra helpers and a finite-difference oracle.

All routines work in double precision on numpy arrays (row-major, C order).
Leading dimensions are treated as a batch where noted.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class NumericsError(ValueError):
    """Raised for shape mismatches and numerically invalid inputs."""


class NotPositiveDefiniteError(NumericsError):
    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} has value {value!r}")


def as_complex(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.complex128)


def matmul(a, b) -> np.ndarray:
    a = as_complex(a)
    b = as_complex(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError(f"matmul needs matrices, got ndim {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def hermitian_solve(a, b) -> np.ndarray:
    """Solve ``a x = b`` for Hermitian positive definite ``a`` via Cholesky.

    Works on a single matrix or a stack. Raises
    :class:`NotPositiveDefiniteError` naming the first failing pivot.
    """
    a = as_complex(a)
    b = as_complex(b)
    if a.shape[-1] != a.shape[-2]:
        raise NumericsError(f"matrix must be square, got {a.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"dimension mismatch: {a.shape} vs rhs {b.shape}")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise _failing_pivot(a) from None
    y = _tri_solve(low, b, lower=True)
    return _tri_solve(np.conj(np.swapaxes(low, -1, -2)), y, lower=False)


def _tri_solve(t: np.ndarray, b: np.ndarray, lower: bool) -> np.ndarray:
    from scipy.linalg import solve_triangular

    if t.ndim == 2:
        return solve_triangular(t, b, lower=lower, check_finite=False)
    out = np.empty(np.broadcast_shapes(t.shape[:-2], b.shape[:-2]) + b.shape[-2:], dtype=np.complex128)
    tb = np.broadcast_to(t, out.shape[:-2] + t.shape[-2:])
    bb = np.broadcast_to(b, out.shape)
    for idx in np.ndindex(out.shape[:-2]):
        out[idx] = solve_triangular(tb[idx], bb[idx], lower=lower, check_finite=False)
    return out


def _failing_pivot(a: np.ndarray) -> NotPositiveDefiniteError:
    # Plain LDL^H sweep to locate the first non-positive pivot.
    mats = a.reshape((-1,) + a.shape[-2:])
    for mat in mats:
        m = mat.copy()
        n = m.shape[0]
        for k in range(n):
            piv = m[k, k].real
            if not piv > 0.0 or not np.isfinite(piv):
                return NotPositiveDefiniteError(k, float(piv))
            m[k + 1:, k + 1:] -= np.outer(m[k + 1:, k], np.conj(m[k, k + 1:])) / piv
    return NotPositiveDefiniteError(-1, float("nan"))


def pseudoinverse(a) -> np.ndarray:
    """Moore-Penrose inverse by SVD.

    Singular values below ``s_max * max(rows, cols) * eps`` are treated as
    zero, so the zero matrix maps to the zero matrix.
    """
    a = as_complex(a)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(a.shape[::-1], dtype=np.complex128)
    cutoff = s[0] * max(a.shape) * np.finfo(np.float64).eps
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (np.conj(vh).T * inv) @ np.conj(u).T


def rank(a, rtol: float | None = None) -> int:
    s = np.linalg.svd(as_complex(a), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    if rtol is None:
        rtol = max(np.shape(a)) * np.finfo(np.float64).eps
    return int(np.sum(s > rtol * s[0]))


class NonFiniteValueError(NumericsError):
    def __init__(self, coordinate: int, value: float):
        self.coordinate = coordinate
        super().__init__(f"objective is not finite ({value!r}) when perturbing coordinate {coordinate}")


def finite_difference_gradient(f: Callable[[np.ndarray], float], x0, step: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not step > 0:
        raise NumericsError("step must be positive")
    x0 = np.array(x0, dtype=np.float64, copy=True)
    flat = x0.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x0))
        flat[i] = orig - step
        fm = float(f(x0))
        flat[i] = orig
        for v in (fp, fm):
            if not np.isfinite(v):
                raise NonFiniteValueError(i, v)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x0.shape)
