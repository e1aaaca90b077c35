"""Small dense linear-algebra kernel: Jacobi eigendecomposition, Lyapunov
solver, Hurwitz margins.

Everything here targets tiny matrices (dimension a few tens at most), so
the simplest verifiable algorithms win: cyclic Jacobi rotations for the
symmetric eigenproblem and Kronecker vectorization for the Lyapunov
equation.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SymmetricEigen",
    "AsymmetricMatrixError",
    "NonHurwitzError",
    "sym_eigen",
    "lyapunov_solve",
    "hurwitz_margin",
    "momentum_block_margin",
]


class AsymmetricMatrixError(ValueError):
    pass


class NonHurwitzError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetricEigen:
    """Ascending eigenvalues and an orthogonal eigenvector matrix (columns)."""

    eigenvalues: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.vectors @ np.diag(self.eigenvalues) @ self.vectors.T


def sym_eigen(a, max_sweeps: int = 100) -> SymmetricEigen:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Eigenvalues are returned ascending; each eigenvector is normalized so
    that its first nonzero entry is positive.  Raises
    AsymmetricMatrixError when ||A - A^T|| > 1e-10 ||A||.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("sym_eigen needs a square matrix")
    norm_a = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > 1e-10 * max(norm_a, 1e-300):
        raise AsymmetricMatrixError("matrix is not symmetric")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    p = np.eye(n)
    if n == 1:
        return SymmetricEigen(np.array([a[0, 0]]), np.array([[1.0]]))

    tol = 1e-15 * max(norm_a, 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol:
            break
        for i in range(n - 1):
            for j in range(i + 1, n):
                if abs(a[i, j]) <= tol / (n * n):
                    continue
                # classic two-sided rotation annihilating a[i, j]
                theta = (a[j, j] - a[i, i]) / (2.0 * a[i, j])
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta)) if theta != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot_i, rot_j = a[:, i].copy(), a[:, j].copy()
                a[:, i] = c * rot_i - s * rot_j
                a[:, j] = s * rot_i + c * rot_j
                rot_i, rot_j = a[i, :].copy(), a[j, :].copy()
                a[i, :] = c * rot_i - s * rot_j
                a[j, :] = s * rot_i + c * rot_j
                rot_i, rot_j = p[:, i].copy(), p[:, j].copy()
                p[:, i] = c * rot_i - s * rot_j
                p[:, j] = s * rot_i + c * rot_j

    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order]
    vecs = p[:, order]
    # sign convention: first entry of nonnegligible magnitude made positive
    for k in range(n):
        col = vecs[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300))[0]
        if nz.size and col[nz[0]] < 0:
            vecs[:, k] = -col
    return SymmetricEigen(eigvals, vecs)


def lyapunov_solve(b, q) -> np.ndarray:
    """Solve B G + G B^T = -Q for symmetric G by Kronecker vectorization.

    B must be Hurwitz (checked) and Q symmetric PSD-intended; the result
    is symmetrized after the solve.  O(n^6) flops: fine for n <= 40.
    """
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    n = b.shape[0]
    if b.shape != (n, n) or q.shape != (n, n):
        raise ValueError("B and Q must be square of the same size")
    if hurwitz_margin(b) <= 0:
        raise NonHurwitzError("B has an eigenvalue with nonnegative real part")
    # row-major vec: vec(B G) = (B (x) I) vec(G), vec(G B^T) = (I (x) B) vec(G)
    eye = np.eye(n)
    coef = np.kron(b, eye) + np.kron(eye, b)
    try:
        g = np.linalg.solve(coef, -q.reshape(n * n)).reshape(n, n)
    except np.linalg.LinAlgError as exc:
        raise NonHurwitzError(f"singular Lyapunov system: {exc}") from exc
    return 0.5 * (g + g.T)


def hurwitz_margin(b) -> float:
    """Negated largest real part of the eigenvalues (positive iff Hurwitz)."""
    b = np.asarray(b, dtype=float)
    return float(-np.linalg.eigvals(b).real.max())


def momentum_block_margin(r_inf: float, h_inf: float, hess: np.ndarray, v_diag: np.ndarray) -> float:
    """Hurwitz margin of [[-r I, h H], [-V, 0]] via its quadratic-root reduction.

    The block matrix's spectrum consists of the roots of
    lam^2 + r*lam + beta_k = 0 where beta_k are the eigenvalues of
    h V^{1/2} H V^{1/2}; no 2d x 2d eigensolve is needed.
    """
    v_diag = np.asarray(v_diag, dtype=float)
    v_sqrt = np.sqrt(v_diag)
    betas = sym_eigen(h_inf * (v_sqrt[:, None] * np.asarray(hess, float) * v_sqrt[None, :])).eigenvalues
    disc = r_inf * r_inf - 4.0 * betas
    real_parts = np.where(disc >= 0, (-r_inf + np.sqrt(np.maximum(disc, 0.0))) / 2.0, -r_inf / 2.0)
    return float(-real_parts.max())
