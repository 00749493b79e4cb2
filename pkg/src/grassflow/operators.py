"""Symmetric linear operators exposed through a single apply-to-block primitive.

Builders produce immutable handles for dense, tridiagonal, or matrix-free
operators; every other module consumes only ``OperatorHandle.apply``.
A handle may carry a spectral shift, so it represents ``A - s*I`` for the
stored base operator ``A``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AsymmetricInput,
    DenseUnavailable,
    DimensionMismatch,
    GrassflowError,
    NonSquare,
    NonSymmetricHeader,
    ParseError,
    UnboundedMatrixFree,
)

DENSE_SYMMETRY_RTOL = 1e-12

KIND_DENSE = "dense"
KIND_TRIDIAGONAL = "tridiagonal"
KIND_MATRIX_FREE = "matrix-free"


@dataclass(frozen=True)
class OperatorHandle:
    """A symmetric operator of dimension ``dim`` acting on column blocks.

    Immutable after construction; ``apply`` is pure and may be called
    concurrently.  ``shift`` means the handle represents ``A - shift*I``
    where ``A`` is the stored base operator.
    """

    dim: int
    kind: str
    shift: float = 0.0
    symmetry_checked: bool = False
    _dense: np.ndarray | None = None
    _diag: np.ndarray | None = None
    _off: np.ndarray | None = None
    _apply_fn: object = None

    def apply(self, X):
        """Apply the (shifted) operator to a vector or an (n, k) block."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != self.dim:
            raise DimensionMismatch(
                f"operator dim {self.dim} cannot act on block of shape {X.shape}"
            )
        if self.kind == KIND_DENSE:
            Y = self._dense @ X
        elif self.kind == KIND_TRIDIAGONAL:
            Y = self._diag[:, None] * X
            if self.dim > 1:
                Y[:-1] += self._off[:, None] * X[1:]
                Y[1:] += self._off[:, None] * X[:-1]
        else:
            Y = np.asarray(self._apply_fn(X), dtype=float)
            if Y.shape != X.shape:
                raise DimensionMismatch(
                    f"matrix-free apply returned shape {Y.shape}, expected {X.shape}"
                )
        if self.shift != 0.0:
            Y = Y - self.shift * X
        return Y[:, 0] if single else Y

    def to_dense(self):
        """Assemble the shifted operator as a dense matrix.

        Raises DenseUnavailable for matrix-free handles.
        """
        if self.kind == KIND_DENSE:
            M = self._dense.copy()
        elif self.kind == KIND_TRIDIAGONAL:
            M = np.diag(self._diag)
            if self.dim > 1:
                idx = np.arange(self.dim - 1)
                M[idx, idx + 1] = self._off
                M[idx + 1, idx] = self._off
        else:
            raise DenseUnavailable(
                "matrix-free operator has no dense assembly"
            )
        if self.shift != 0.0:
            M[np.diag_indices(self.dim)] -= self.shift
        return M

    @property
    def dense_assemblable(self):
        return self.kind in (KIND_DENSE, KIND_TRIDIAGONAL)


@dataclass(frozen=True)
class SpectrumSlice:
    """The lowest ``block_size`` eigenvalues, plus the next one when known."""

    eigenvalues: np.ndarray
    block_size: int

    def __post_init__(self):
        eigs = np.asarray(self.eigenvalues, dtype=float)
        if eigs.ndim != 1 or eigs.size < self.block_size:
            raise GrassflowError("SpectrumSlice needs at least block_size eigenvalues")
        if np.any(np.diff(eigs) < 0):
            raise GrassflowError("SpectrumSlice eigenvalues must be ascending")
        object.__setattr__(self, "eigenvalues", eigs)

    @property
    def gap(self):
        """Distance between eigenvalue block_size+1 and block_size, if known."""
        if self.eigenvalues.size > self.block_size:
            return float(
                self.eigenvalues[self.block_size]
                - self.eigenvalues[self.block_size - 1]
            )
        return None


def build_dense(matrix):
    """Wrap a dense symmetric matrix; apply is exact dense multiplication.

    The input must be square and symmetric to a relative tolerance of
    1e-12 on its largest entry.
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {M.shape}")
    scale = float(np.max(np.abs(M))) if M.size else 0.0
    skew = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if skew > DENSE_SYMMETRY_RTOL * scale:
        raise AsymmetricInput(
            f"max |M_ij - M_ji| = {skew:.3e} exceeds {DENSE_SYMMETRY_RTOL:g} * max|M_ij|"
        )
    return OperatorHandle(
        dim=M.shape[0],
        kind=KIND_DENSE,
        symmetry_checked=True,
        _dense=M.copy(),
    )


def build_tridiagonal(diag, off):
    """Wrap a symmetric tridiagonal operator given its diagonals."""
    d = np.asarray(diag, dtype=float)
    e = np.asarray(off, dtype=float)
    if d.ndim != 1 or e.ndim != 1 or e.size != max(d.size - 1, 0):
        raise GrassflowError("tridiagonal needs diag of length n and off of length n-1")
    return OperatorHandle(
        dim=d.size,
        kind=KIND_TRIDIAGONAL,
        symmetry_checked=True,
        _diag=d.copy(),
        _off=e.copy(),
    )


def build_matrix_free(dim, apply_fn):
    """Wrap a user callback ``apply_fn(X) -> HX`` acting on (n, k) blocks.

    Symmetry is the caller's responsibility; the handle records that it
    was not checked.
    """
    if dim < 1:
        raise GrassflowError("dimension must be positive")
    return OperatorHandle(
        dim=int(dim),
        kind=KIND_MATRIX_FREE,
        symmetry_checked=False,
        _apply_fn=apply_fn,
    )


def build_laplacian_1d(m, domain_length=1.0):
    """Second-difference operator on m interior grid points, zero boundary.

    Represents (1/h^2) * tridiag(-1, 2, -1) with h = domain_length/(m+1).
    """
    if int(m) != m or m < 2:
        raise GrassflowError(f"need at least 2 grid points, got {m}")
    if domain_length <= 0:
        raise GrassflowError("domain_length must be positive")
    m = int(m)
    h = domain_length / (m + 1)
    inv_h2 = 1.0 / (h * h)
    return build_tridiagonal(np.full(m, 2.0 * inv_h2), np.full(m - 1, -inv_h2))


def shift_operator(H, s):
    """Return a handle for ``H - s*I``; eigenvectors are unchanged."""
    return OperatorHandle(
        dim=H.dim,
        kind=H.kind,
        shift=H.shift + float(s),
        symmetry_checked=H.symmetry_checked,
        _dense=H._dense,
        _diag=H._diag,
        _off=H._off,
        _apply_fn=H._apply_fn,
    )


def gershgorin_upper_bound(H):
    """Row-sum upper bound on the largest eigenvalue.

    Returns max_i (M_ii + sum_{j != i} |M_ij|) of the shifted assembly.
    Matrix-free handles have no such bound and must supply their own.
    """
    if H.kind == KIND_DENSE:
        M = H._dense
        diag = np.diag(M) - H.shift
        radii = np.sum(np.abs(M), axis=1) - np.abs(np.diag(M))
        return float(np.max(diag + radii))
    if H.kind == KIND_TRIDIAGONAL:
        diag = H._diag - H.shift
        radii = np.zeros(H.dim)
        if H.dim > 1:
            radii[:-1] += np.abs(H._off)
            radii[1:] += np.abs(H._off)
        return float(np.max(diag + radii))
    raise UnboundedMatrixFree(
        "no Gershgorin bound for a matrix-free operator; supply an explicit shift"
    )


def gershgorin_lower_bound(H):
    """Row-sum lower bound on the smallest eigenvalue (same disc estimate)."""
    if H.kind == KIND_DENSE:
        M = H._dense
        diag = np.diag(M) - H.shift
        radii = np.sum(np.abs(M), axis=1) - np.abs(np.diag(M))
        return float(np.min(diag - radii))
    if H.kind == KIND_TRIDIAGONAL:
        diag = H._diag - H.shift
        radii = np.zeros(H.dim)
        if H.dim > 1:
            radii[:-1] += np.abs(H._off)
            radii[1:] += np.abs(H._off)
        return float(np.min(diag - radii))
    raise UnboundedMatrixFree(
        "no Gershgorin bound for a matrix-free operator; supply an explicit shift"
    )


def default_shift(H, margin=0.01):
    """Shift that makes the whole spectrum negative, with a safety margin.

    Gershgorin upper bound plus ``margin`` times max(|bound|, 1).
    """
    g = gershgorin_upper_bound(H)
    return g + margin * max(abs(g), 1.0)


# --- MatrixMarket ingestion -------------------------------------------------
#
# Accepted headers:
#   %%MatrixMarket matrix coordinate real symmetric
#   %%MatrixMarket matrix array real symmetric
# Comment lines start with '%'; indices are 1-based; the lower triangle is
# stored and mirrored exactly on load.


def _mm_tokens(line):
    return line.strip().split()


def load_matrixmarket(path):
    """Read a symmetric MatrixMarket file into a dense OperatorHandle."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", line=1)

    header = _mm_tokens(lines[0].lower())
    if len(header) != 5 or header[0] != "%%matrixmarket" or header[1] != "matrix":
        raise ParseError(
            "expected '%%MatrixMarket matrix <format> <field> <symmetry>' header",
            line=1,
        )
    fmt, fieldname, symmetry = header[2], header[3], header[4]
    if fmt not in ("coordinate", "array"):
        raise ParseError(f"unsupported format '{fmt}'", line=1)
    if fieldname not in ("real", "integer"):
        raise ParseError(f"unsupported field '{fieldname}'", line=1)
    if symmetry != "symmetric":
        raise NonSymmetricHeader(
            f"only 'symmetric' matrices are accepted, got '{symmetry}'"
        )

    lineno = 1
    body = []
    for raw in lines[1:]:
        lineno += 1
        stripped = raw.strip()
        if not stripped or stripped.startswith("%"):
            continue
        body.append((lineno, stripped))
    if not body:
        raise ParseError("missing size line", line=lineno)

    size_lineno, size_line = body[0]
    toks = _mm_tokens(size_line)
    try:
        if fmt == "coordinate":
            if len(toks) != 3:
                raise ValueError
            rows, cols, nnz = int(toks[0]), int(toks[1]), int(toks[2])
        else:
            if len(toks) != 2:
                raise ValueError
            rows, cols = int(toks[0]), int(toks[1])
            nnz = None
    except ValueError:
        raise ParseError(f"bad size line '{size_line}'", line=size_lineno) from None
    if rows != cols:
        raise NonSquare(f"matrix is {rows}x{cols}, expected square")
    n = rows
    M = np.zeros((n, n))

    entries = body[1:]
    if fmt == "coordinate":
        if len(entries) != nnz:
            raise ParseError(
                f"header promises {nnz} entries, file has {len(entries)}",
                line=size_lineno,
            )
        seen = set()
        for lno, text in entries:
            toks = _mm_tokens(text)
            if len(toks) != 3:
                raise ParseError(f"expected 'i j value', got '{text}'", line=lno)
            try:
                i, j = int(toks[0]), int(toks[1])
                v = float(toks[2])
            except ValueError:
                raise ParseError(f"bad entry '{text}'", line=lno) from None
            if not (1 <= i <= n and 1 <= j <= n):
                raise ParseError(f"index ({i}, {j}) out of range for n={n}", line=lno)
            if i < j:
                raise ParseError(
                    f"entry ({i}, {j}) above the diagonal in a symmetric file",
                    line=lno,
                )
            if (i, j) in seen:
                raise ParseError(f"duplicate entry ({i}, {j})", line=lno)
            seen.add((i, j))
            M[i - 1, j - 1] = v
            M[j - 1, i - 1] = v
    else:
        expected = n * (n + 1) // 2
        if len(entries) != expected:
            raise ParseError(
                f"array symmetric body needs {expected} values, file has {len(entries)}",
                line=size_lineno,
            )
        k = 0
        for j in range(n):
            for i in range(j, n):
                lno, text = entries[k]
                k += 1
                try:
                    v = float(text.split()[0])
                except (ValueError, IndexError):
                    raise ParseError(f"bad value '{text}'", line=lno) from None
                M[i, j] = v
                M[j, i] = v

    return build_dense(M)


def save_matrixmarket(path, matrix_or_handle):
    """Write a symmetric matrix in coordinate format, lower triangle only.

    Values are printed with 17 significant digits so that a reload
    reproduces every stored entry bit for bit.
    """
    if isinstance(matrix_or_handle, OperatorHandle):
        M = matrix_or_handle.to_dense()
    else:
        M = np.asarray(matrix_or_handle, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NonSquare(f"expected square matrix, got shape {M.shape}")
    n = M.shape[0]
    rows = []
    for i in range(n):
        for j in range(i + 1):
            if M[i, j] != 0.0:
                rows.append(f"{i + 1} {j + 1} {M[i, j]:.17g}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"{n} {n} {len(rows)}\n")
        for row in rows:
            fh.write(row + "\n")
