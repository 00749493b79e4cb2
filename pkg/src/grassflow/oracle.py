"""Dense desk-scale oracles, independent of every integrator code path.

A cyclic Jacobi eigensolver is the single root of trust here: the matrix
exponential, inverse square root, small SVD, and the closed-form solution
of the flow are all built on it, so agreement between an integrated run
and these routines is a genuine two-route check.
"""

from dataclasses import dataclass

import numpy as np

from .blocks import FrameBlock, block_data
from .errors import (
    AsymmetricInput,
    GrassflowError,
    NoConvergence,
    NonSquare,
    SingularMatrix,
)
from .operators import OperatorHandle, SpectrumSlice

JACOBI_MAX_DIM = 2048
JACOBI_MAX_SWEEPS = 100
JACOBI_OFF_RTOL = 1e-14
EXPM_MAX_DIM = 512
SVD_MAX_DIM = 2048
SVD_MAX_MINOR = 64
INV_SQRT_MIN_EIG = 1e-12


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in ascending order with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_symmetric(M, rtol, context):
    scale = float(np.max(np.abs(M))) if M.size else 0.0
    skew = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if skew > rtol * max(scale, 1e-300):
        raise AsymmetricInput(
            f"{context}: asymmetry {skew:.3e} exceeds {rtol:g} * max|M|"
        )


def jacobi_eigensolver(M):
    """Full eigendecomposition of a dense symmetric matrix by cyclic Jacobi.

    Sweeps over all off-diagonal pairs, rotating each one to zero, until
    the off-diagonal Frobenius mass falls below 1e-14 of the matrix norm.
    Deliberately avoids LAPACK so results are an independent reference.

    Returns
    -------
    EigenDecomposition
        Eigenvalues ascending; eigenvectors as columns, permuted to match.
    """
    A = np.array(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonSquare(f"expected square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n > JACOBI_MAX_DIM:
        raise GrassflowError(f"jacobi_eigensolver is desk-scale only (n <= {JACOBI_MAX_DIM})")
    _check_symmetric(A, 1e-10, "jacobi_eigensolver")
    A = (A + A.T) / 2.0

    V = np.eye(n)
    norm = float(np.linalg.norm(A))
    if norm == 0.0 or n == 1:
        order = np.argsort(np.diag(A), kind="stable")
        return EigenDecomposition(np.diag(A)[order].copy(), V[:, order].copy())
    tol = JACOBI_OFF_RTOL * norm
    # rotations on entries below this cannot move the off-mass past tol
    skip = tol / (2.0 * n * n)

    for sweep in range(JACOBI_MAX_SWEEPS + 1):
        off2 = float(np.sum(A * A) - np.sum(np.diag(A) ** 2))
        if off2 <= tol * tol:
            order = np.argsort(np.diag(A), kind="stable")
            return EigenDecomposition(np.diag(A)[order].copy(), V[:, order].copy())
        if sweep == JACOBI_MAX_SWEEPS:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) if theta != 0.0 else 1.0
                t /= abs(theta) + np.sqrt(theta * theta + 1.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    raise NoConvergence(
        f"off-diagonal mass still above tolerance after {JACOBI_MAX_SWEEPS} sweeps"
    )


def jacobi_eigenvalues(M):
    """Ascending eigenvalues of a small dense symmetric matrix."""
    return jacobi_eigensolver(M).eigenvalues


def expm_sym(M, scale=1.0):
    """exp(scale * M) for symmetric M, via the Jacobi eigendecomposition."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] > EXPM_MAX_DIM:
        raise GrassflowError(f"expm_sym is desk-scale only (n <= {EXPM_MAX_DIM})")
    dec = jacobi_eigensolver(M)
    Q = dec.eigenvectors
    return (Q * np.exp(scale * dec.eigenvalues)) @ Q.T


def inv_sqrt_spd(M):
    """Inverse matrix square root of a symmetric positive definite matrix.

    Raises SingularMatrix when the smallest eigenvalue is below 1e-12.
    """
    dec = jacobi_eigensolver(np.asarray(M, dtype=float))
    if dec.eigenvalues.size and dec.eigenvalues[0] < INV_SQRT_MIN_EIG:
        raise SingularMatrix(
            f"smallest eigenvalue {dec.eigenvalues[0]:.3e} below {INV_SQRT_MIN_EIG:g}"
        )
    Q = dec.eigenvectors
    return (Q / np.sqrt(dec.eigenvalues)) @ Q.T


def _dense_of(H):
    if isinstance(H, OperatorHandle):
        return H.to_dense()
    M = np.asarray(H, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NonSquare(f"expected square operator, got shape {M.shape}")
    return M


def analytic_flow_solution(H, U0, t):
    """Closed-form state of the gradient flow at time t.

    Computes ``exp(-H t) U0 B(t)^{-1/2}`` where
    ``B(t) = I - U0^T U0 + U0^T exp(-2 H t) U0``.  The orthogonal gauge is
    fixed to the identity, so results are only comparable through
    subspace distances, never entrywise.

    Raises SingularMatrix when B(t) is not positive definite, which
    signals an inadmissible starting block.
    """
    Hd = _dense_of(H)
    n = Hd.shape[0]
    if n > EXPM_MAX_DIM:
        raise GrassflowError(f"analytic solution is desk-scale only (n <= {EXPM_MAX_DIM})")
    U = block_data(U0)
    if U.shape[0] != n:
        raise NonSquare(f"block rows {U.shape[0]} do not match operator dim {n}")
    dec = jacobi_eigensolver(Hd)
    lam = dec.eigenvalues
    Q = dec.eigenvectors
    A = Q.T @ U
    decay = np.exp(-lam * t)
    G0 = U.T @ U
    bracket = np.eye(U.shape[1]) - G0 + A.T @ ((decay * decay)[:, None] * A)
    bracket = (bracket + bracket.T) / 2.0
    R = inv_sqrt_spd(bracket)
    return FrameBlock(Q @ (decay[:, None] * A) @ R)


def galerkin_flow_solution(H, basis_size, U0, t):
    """Closed-form flow state in the span of the lowest ``basis_size`` modes.

    Projects the starting block onto the lowest eigenvectors of the dense
    operator, evolves the projected coordinates in closed form, and lifts
    the result back to the ambient space.
    """
    Hd = _dense_of(H)
    n = Hd.shape[0]
    m = int(basis_size)
    if not 1 <= m <= n:
        raise GrassflowError(f"basis size {m} must lie in [1, {n}]")
    U = block_data(U0)
    dec = jacobi_eigensolver(Hd)
    lam = dec.eigenvalues[:m]
    Vm = dec.eigenvectors[:, :m]
    A0 = Vm.T @ U
    decay = np.exp(-lam * t)
    G0 = A0.T @ A0
    bracket = np.eye(U.shape[1]) - G0 + A0.T @ ((decay * decay)[:, None] * A0)
    bracket = (bracket + bracket.T) / 2.0
    R = inv_sqrt_spd(bracket)
    return FrameBlock(Vm @ (decay[:, None] * A0) @ R)


def svd_small(M):
    """Singular value decomposition for small dense matrices.

    Built on the Jacobi eigensolver applied to the Gram matrix of the
    smaller side; singular values come back descending with
    ``M ~ U @ diag(s) @ V.T``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise GrassflowError(f"expected a matrix, got shape {M.shape}")
    p, q = M.shape
    if max(p, q) > SVD_MAX_DIM or min(p, q) > SVD_MAX_MINOR:
        raise GrassflowError(
            f"svd_small limits: max(p,q) <= {SVD_MAX_DIM}, min(p,q) <= {SVD_MAX_MINOR}"
        )
    if p < q:
        U, s, V = svd_small(M.T)
        return V, s, U

    dec = jacobi_eigensolver(M.T @ M)
    order = np.argsort(dec.eigenvalues, kind="stable")[::-1]
    vals = np.clip(dec.eigenvalues[order], 0.0, None)
    V = dec.eigenvectors[:, order]
    s = np.sqrt(vals)
    cutoff = (s[0] if s.size else 0.0) * 1e-13
    U = np.zeros((p, q))
    filled = []
    for i in range(q):
        if s[i] > cutoff:
            U[:, i] = (M @ V[:, i]) / s[i]
            filled.append(i)
    # complete columns for (near-)zero singular values by orthogonalizing
    # standard basis vectors against what is already there
    missing = [i for i in range(q) if i not in filled]
    if missing:
        basis_idx = 0
        for i in missing:
            while basis_idx < p:
                cand = np.zeros(p)
                cand[basis_idx] = 1.0
                basis_idx += 1
                for _ in range(2):
                    cand -= U @ (U.T @ cand)
                norm = np.linalg.norm(cand)
                if norm > 1e-8:
                    U[:, i] = cand / norm
                    break
            else:
                raise GrassflowError("could not complete singular basis")
    return U, s, V


def spectrum_slice(H, block_size):
    """Lowest block_size (+1 when possible) eigenvalues of a dense operator."""
    Hd = _dense_of(H)
    n = Hd.shape[0]
    N = int(block_size)
    if not 1 <= N <= n:
        raise GrassflowError(f"block size {N} must lie in [1, {n}]")
    eigs = jacobi_eigensolver(Hd).eigenvalues
    take = min(N + 1, n)
    return SpectrumSlice(eigs[:take].copy(), N)
