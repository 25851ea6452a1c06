"""Dense float64 matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects; :func:`as_matrix` is the
single place where shape and finiteness are checked.
"""
from dataclasses import dataclass

import numpy as np

from ._backend import get_kernels

JACOBI_TOL = 1e-12
MAX_SWEEPS = 100
RANK_TOL = 1e-10


class ShapeError(ValueError):
    """Operands are not conformable."""


class SvdConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap before all column pairs were orthogonal."""

    def __init__(self, sweeps, residual):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(largest off-diagonal cosine {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class SvdFactors:
    """``a = u @ diag(sigma) @ v.T`` with sigma nonincreasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def rank(self, tol=RANK_TOL):
        return numerical_rank(self.sigma, tol)

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def numerical_rank(sigma, tol=RANK_TOL):
    """Count singular values above ``tol * sigma_max``."""
    sigma = np.asarray(sigma)
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > tol * sigma[0]))


def _complete_basis(q, k):
    """Replace columns k.. of the orthonormal-prefix matrix ``q`` with an orthonormal completion."""
    m, r = q.shape
    basis = [q[:, j] for j in range(k)]
    out = q.copy()
    col = k
    for e in range(m):
        if col == r:
            break
        x = np.zeros(m)
        x[e] = 1.0
        for _ in range(2):
            for b in basis:
                x -= (b @ x) * b
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            x /= nrm
            basis.append(x)
            out[:, col] = x
            col += 1
    return out


def _finish(rotated, v, compute_uv):
    # rotated: (m, n) tall, columns sigma_j u_j
    sigma = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not compute_uv:
        return None, sigma, None
    rotated = rotated[:, order]
    v = v[:, order]
    m, n = rotated.shape
    floor = max(m, n) * np.finfo(np.float64).eps * (sigma[0] if sigma.size else 0.0)
    good = int(np.count_nonzero(sigma > floor)) if sigma[0] > 0 else 0
    u = np.zeros((m, n))
    u[:, :good] = rotated[:, :good] / sigma[:good]
    if good < n:
        u = _complete_basis(u, good)
        sigma[good:] = 0.0
    return u, sigma, v


def svd_batch(stack, compute_uv=True, backend=None):
    """SVD of every matrix in a (batch, m, n) stack.

    Returns ``(u, sigma, v)`` with shapes (batch, m, r), (batch, r), (batch, n, r)
    where r = min(m, n); ``u`` and ``v`` are None when ``compute_uv`` is False.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or min(stack.shape[1:]) < 1:
        raise ShapeError(f"expected a (batch, m, n) stack, got shape {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise ValueError("matrix stack contains NaN or Inf")
    kern = get_kernels(backend)
    nb, m, n = stack.shape
    flip = m < n
    work = stack.transpose(0, 2, 1) if flip else stack
    rotated, v, sweeps, off = kern.jacobi_svd_batch(
        np.ascontiguousarray(work), JACOBI_TOL, MAX_SWEEPS, compute_uv
    )
    if off > JACOBI_TOL:
        raise SvdConvergenceError(sweeps, off)
    r = min(m, n)
    sig = np.empty((nb, r))
    us = np.empty((nb, m, r)) if compute_uv else None
    vs = np.empty((nb, n, r)) if compute_uv else None
    for b in range(nb):
        u_b, s_b, v_b = _finish(rotated[b], v[b] if compute_uv else None, compute_uv)
        sig[b] = s_b
        if compute_uv:
            if flip:
                u_b, v_b = v_b, u_b
            us[b] = u_b
            vs[b] = v_b
    return us, sig, vs


def svd(a, backend=None):
    """Full thin SVD of ``a`` by one-sided Jacobi rotations."""
    a = as_matrix(a)
    u, sigma, v = svd_batch(a[None], compute_uv=True, backend=backend)
    return SvdFactors(u=u[0], sigma=sigma[0], v=v[0])


def singular_values(a, backend=None):
    a = as_matrix(a)
    return svd_batch(a[None], compute_uv=False, backend=backend)[1][0]


def tail_from_sigma(sigma, h):
    """Sum of the singular values with index > h, counting only up to the numerical rank."""
    if h < 0:
        raise ValueError(f"h must be nonnegative, got {h}")
    r = numerical_rank(sigma)
    if h >= r:
        return 0.0
    return float(np.sum(np.asarray(sigma)[h:r]))


def tail_singular_sum(w, h, backend=None):
    """sum_{j>h} sigma_j(w); zero once h reaches the rank of w."""
    if h < 0:
        raise ValueError(f"h must be nonnegative, got {h}")
    return tail_from_sigma(singular_values(w, backend=backend), h)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are not conformable")
    return a @ b


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes {a.shape} and {b.shape} differ")
    return a * b


def conv2d_valid(x, kernel, backend=None):
    """Valid-mode 2-D cross-correlation (no kernel flip)."""
    x = as_matrix(x, "input")
    kernel = as_matrix(kernel, "kernel")
    if kernel.shape[0] > x.shape[0] or kernel.shape[1] > x.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} larger than input {x.shape}")
    out = get_kernels(backend).conv2d_valid_batch(x[None, None], kernel[None, None])
    return out[0, 0]
