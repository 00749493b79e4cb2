"""Energy, gradients, Gram/Rayleigh products, and admissibility of blocks.

Everything here is a pure function of its inputs.  The central object is
the extended Grassmann gradient ``H U - U (U^T H U)``; driving a block
along its negative both minimizes the trace energy and pulls the block
toward orthonormality.
"""

from dataclasses import dataclass

import numpy as np

from .blocks import FrameBlock, GramMatrix, RayleighBlock, as_block, block_data
from .errors import AdmissibilityFailure, DenseUnavailable, DimensionMismatch, GrassflowError
from .operators import OperatorHandle
from . import oracle

ADMISSIBLE_EPS = 1e-10
RANK_EPS = 1e-10
INIT_MODES = ("sub-stiefel", "stiefel", "super")


def _apply(H, U):
    if U.shape[0] != H.dim:
        raise DimensionMismatch(
            f"operator dim {H.dim} cannot act on block with {U.shape[0]} rows"
        )
    return H.apply(U)


def energy(H, block):
    """Half the trace of the block Rayleigh product, ``tr(U^T H U) / 2``.

    Invariant under right-multiplication of the block by any orthogonal
    matrix.
    """
    U = block_data(block)
    HU = _apply(H, U)
    return 0.5 * float(np.sum(U * HU))


def gradient(H, block):
    """Unconstrained energy gradient, simply ``H U``."""
    U = block_data(block)
    return FrameBlock(_apply(H, U))


def grassmann_gradient(H, block, HU=None):
    """Extended Grassmann gradient ``H U - U (U^T H U)``.

    Vanishes exactly on orthonormal bases of invariant subspaces.  Pass a
    precomputed ``HU`` to skip the operator apply.
    """
    U = block_data(block)
    if HU is None:
        HU = _apply(H, U)
    else:
        HU = block_data(HU)
    return FrameBlock(HU - U @ (U.T @ HU))


def extended_gradient(H, block, HU=None):
    """Commutator-form gradient ``H U (U^T U) - U (U^T H U)``.

    A diagnostic variant whose product against ``U^T`` is skew-symmetric;
    it is never used to drive the flow.
    """
    U = block_data(block)
    if HU is None:
        HU = _apply(H, U)
    else:
        HU = block_data(HU)
    return FrameBlock(HU @ (U.T @ U) - U @ (U.T @ HU))


def gram(block):
    """Gram matrix ``U^T U``, symmetrized to kill round-off asymmetry."""
    U = block_data(block)
    G = U.T @ U
    return GramMatrix((G + G.T) / 2.0)


def ortho_defect(block):
    """Frobenius distance of the Gram matrix from the identity."""
    U = block_data(block)
    G = U.T @ U
    N = U.shape[1]
    return float(np.linalg.norm(np.eye(N) - G))


def rayleigh_block(H, block, HU=None):
    """Symmetrized Rayleigh product ``U^T H U``.

    Its eigenvalues are the Ritz values of the block's span.
    """
    U = block_data(block)
    if HU is None:
        HU = _apply(H, U)
    else:
        HU = block_data(HU)
    B = U.T @ HU
    return RayleighBlock((B + B.T) / 2.0)


@dataclass(frozen=True)
class AdmissibilityReport:
    """Outcome of the strict-negativity and full-rank gates on a block."""

    ok: bool
    rayleigh_lambda_max: float
    gram_lambda_min: float
    strict: bool
    message: str


def admissible_initial(H, block, strict=True, eps_adm=ADMISSIBLE_EPS, eps_rank=RANK_EPS):
    """Gate a starting block: Rayleigh product negative definite, full rank.

    With ``strict`` (the default) the largest Rayleigh eigenvalue must lie
    below ``-eps_adm``; the relaxed gate only demands it not exceed
    ``+eps_adm``.  The decay theorems all need the strict version.
    """
    U = block_data(block)
    ritz = oracle.jacobi_eigenvalues(rayleigh_block(H, U).value)
    gram_eigs = oracle.jacobi_eigenvalues(gram(U).value)
    lam_max = float(ritz[-1])
    sig_min = float(gram_eigs[0])
    if strict:
        neg_ok = lam_max < -eps_adm
    else:
        neg_ok = lam_max <= eps_adm
    rank_ok = sig_min > eps_rank
    if neg_ok and rank_ok:
        msg = "ok"
    elif not neg_ok:
        msg = (
            f"Rayleigh block not negative definite: lambda_max = {lam_max:.6e}"
        )
    else:
        msg = f"block is rank deficient: min Gram eigenvalue = {sig_min:.6e}"
    return AdmissibilityReport(
        ok=bool(neg_ok and rank_ok),
        rayleigh_lambda_max=lam_max,
        gram_lambda_min=sig_min,
        strict=strict,
        message=msg,
    )


def _orthonormal_columns(A):
    """QR-orthonormalize columns with a deterministic sign convention."""
    Q, R = np.linalg.qr(A)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _negative_subspace(H, min_count):
    if not H.dense_assemblable:
        raise DenseUnavailable(
            "admissible-initial retries need a dense-assemblable operator"
        )
    dec = oracle.jacobi_eigensolver(H.to_dense())
    neg = dec.eigenvalues < 0.0
    count = int(np.sum(neg))
    if count < min_count:
        raise AdmissibilityFailure(
            f"operator has {count} negative eigenvalues, need at least {min_count}"
        )
    return dec.eigenvectors[:, neg]


def random_admissible_initial(
    H,
    N,
    seed,
    mode="sub-stiefel",
    scale_range=None,
    trusted=False,
    max_retries=16,
):
    """Seeded random starting block that passes the admissibility gate.

    Modes
    -----
    ``stiefel``
        Exactly orthonormal columns.
    ``sub-stiefel``
        Orthonormal columns scaled by per-column factors in ``(0, 1]``
        (Gram eigenvalues at most one).
    ``super``
        Factors in ``[1, 2]`` (Gram eigenvalues at least one).

    ``scale_range`` narrows the factor interval within the mode's range.
    When a draw fails the gate, the block is projected onto the span of
    the operator's negative eigendirections and redrawn, up to
    ``max_retries`` times.  Identical seeds give bitwise-identical blocks.
    """
    if mode not in INIT_MODES:
        raise GrassflowError(f"unknown init mode '{mode}' (choose from {INIT_MODES})")
    N = int(N)
    if N < 1 or N > H.dim:
        raise GrassflowError(f"block width {N} must lie in [1, {H.dim}]")
    if scale_range is None:
        scale_range = {"sub-stiefel": (0.1, 1.0), "stiefel": (1.0, 1.0), "super": (1.0, 2.0)}[mode]
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if mode == "sub-stiefel" and not (0.0 < lo <= hi <= 1.0):
        raise GrassflowError("sub-stiefel factors must lie in (0, 1]")
    if mode == "super" and not (1.0 <= lo <= hi <= 2.0):
        raise GrassflowError("super factors must lie in [1, 2]")

    if not trusted:
        # cheap desk-scale pre-check that the target block can be negative
        _negative_subspace(H, N)

    rng = np.random.default_rng(seed)
    basis = None
    for attempt in range(max_retries + 1):
        raw = rng.standard_normal((H.dim, N))
        if attempt > 0:
            if basis is None:
                basis = _negative_subspace(H, N)
            raw = basis @ (basis.T @ raw)
        Q = _orthonormal_columns(raw)
        if mode == "stiefel":
            candidate = Q
        else:
            factors = rng.uniform(lo, hi, size=N)
            candidate = Q * factors
        if admissible_initial(H, candidate).ok:
            return FrameBlock(candidate)
    raise AdmissibilityFailure(
        f"no admissible block after {max_retries} projected retries (seed {seed})"
    )
