"""Validated array containers for column blocks and their small square products."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, GrassflowError

GRAM_SYMMETRY_TOL = 1e-14
RAYLEIGH_SYMMETRY_RTOL = 1e-12


def _as_float_matrix(value, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise GrassflowError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FrameBlock:
    """An n-by-N block of column vectors.

    Columns are the evolving approximations to the lowest eigenvectors.
    Entries must be finite and the block cannot be wider than tall.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.data, "FrameBlock")
        if not np.all(np.isfinite(arr)):
            raise GrassflowError("FrameBlock contains NaN or Inf entries")
        n, width = arr.shape
        if width > n:
            raise GrassflowError(
                f"block width {width} exceeds ambient dimension {n}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def n(self):
        """Ambient dimension (number of rows)."""
        return self.data.shape[0]

    @property
    def width(self):
        """Number of columns in the block."""
        return self.data.shape[1]

    def copy(self):
        return FrameBlock(self.data.copy())


def as_block(value):
    """Coerce an (n, N) array (or FrameBlock) into a validated FrameBlock."""
    if isinstance(value, FrameBlock):
        return value
    return FrameBlock(np.asarray(value, dtype=float))


def block_data(value):
    """Return the underlying (n, N) float array of a block-like value."""
    if isinstance(value, FrameBlock):
        return value.data
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D block, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GramMatrix:
    """Symmetrized inner-product matrix of a block with itself."""

    value: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.value, "GramMatrix")
        if arr.shape[0] != arr.shape[1]:
            raise GrassflowError("GramMatrix must be square")
        skew = np.max(np.abs(arr - arr.T)) if arr.size else 0.0
        scale = max(1.0, float(np.max(np.abs(arr))) if arr.size else 0.0)
        if skew > GRAM_SYMMETRY_TOL * scale:
            raise GrassflowError(f"Gram matrix asymmetry {skew:.3e} too large")
        object.__setattr__(self, "value", (arr + arr.T) / 2.0)


@dataclass(frozen=True)
class RayleighBlock:
    """Symmetrized projection of the operator onto a block's span.

    Its eigenvalues are the Ritz values; the magnitude of its largest
    eigenvalue is the negativity constant used in the decay bounds.
    """

    value: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.value, "RayleighBlock")
        if arr.shape[0] != arr.shape[1]:
            raise GrassflowError("RayleighBlock must be square")
        skew = np.max(np.abs(arr - arr.T)) if arr.size else 0.0
        scale = max(1e-300, float(np.max(np.abs(arr))) if arr.size else 0.0)
        if skew > RAYLEIGH_SYMMETRY_RTOL * max(1.0, scale):
            raise GrassflowError(
                f"Rayleigh block asymmetry {skew:.3e} too large"
            )
        object.__setattr__(self, "value", (arr + arr.T) / 2.0)


def frobenius(arr):
    """Frobenius norm, the matrix norm used throughout."""
    return float(np.linalg.norm(np.asarray(arr, dtype=float)))
