"""Dense symmetric-matrix utilities for FIM and bound computations.

Matrices here are small (a few to a few dozen dimensions) and accuracy of
the eigen-extremes matters more than speed, so everything funnels through
LAPACK's symmetric eigensolver / Cholesky on a symmetrized copy.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

#: Asymmetry beyond this (relative to the largest entry) is treated as a
#: caller bug rather than float noise.
ASYMMETRY_TOLERANCE = 1e-9


class LinalgError(ValueError):
    pass


class NotPositiveDefiniteError(LinalgError):
    pass


def _as_array(m):
    if isinstance(m, SymMatrix):
        return m.entries
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {a.shape}")
    return a


def symmetrize(m):
    """(M + M^T)/2 after rejecting genuinely asymmetric input."""
    a = _as_array(m)
    if not np.all(np.isfinite(a)):
        raise LinalgError("non-finite matrix")
    scale = max(np.abs(a).max(), 1.0)
    gap = np.abs(a - a.T).max()
    if gap > ASYMMETRY_TOLERANCE * scale:
        raise LinalgError(
            f"matrix asymmetry {gap:.3e} exceeds tolerance "
            f"{ASYMMETRY_TOLERANCE:.0e} (relative to max entry)"
        )
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric real matrix with the symmetrization applied on entry."""

    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = symmetrize(self.entries if not isinstance(self.entries, SymMatrix)
                       else self.entries.entries)
        if a.shape[0] < 1:
            raise LinalgError("dim must be >= 1")
        object.__setattr__(self, "entries", a)

    @property
    def dim(self):
        return self.entries.shape[0]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim))

    @classmethod
    def diagonal(cls, values):
        return cls(np.diag(np.asarray(values, dtype=np.float64)))

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.entries.astype(dtype)
        return self.entries


def eigenvalues(m):
    """All eigenvalues, ascending."""
    return np.linalg.eigvalsh(symmetrize(m))


def spectral_norm(m):
    """max |eigenvalue| of a symmetric matrix."""
    ev = eigenvalues(m)
    return float(max(abs(ev[0]), abs(ev[-1])))


def min_eigenvalue(m):
    return float(eigenvalues(m)[0])


def intrinsic_dim(m):
    """trace / spectral norm of a PSD matrix; lies in [1, dim]."""
    a = symmetrize(m)
    norm = spectral_norm(a)
    if norm == 0.0:
        raise LinalgError("zero matrix has no intrinsic dimension")
    return float(np.trace(a)) / norm


def condition_number(m):
    """lambda_max / lambda_min for a symmetric positive definite matrix."""
    ev = eigenvalues(m)
    if ev[0] <= 0.0:
        raise NotPositiveDefiniteError(
            f"not positive definite (min eigenvalue {ev[0]:.3e})"
        )
    return float(ev[-1] / ev[0])


def invert_pd(m):
    """Inverse of a symmetric positive definite matrix via Cholesky.

    Raises NotPositiveDefiniteError("singular or indefinite FIM") when the
    factorization fails, which is how a failed invertibility condition on a
    learned FIM surfaces to callers.
    """
    a = symmetrize(m)
    try:
        chol = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular or indefinite FIM") from exc
    inv = scipy.linalg.cho_solve(chol, np.eye(a.shape[0]), check_finite=False)
    out = 0.5 * (inv + inv.T)
    return SymMatrix(out) if isinstance(m, SymMatrix) else out
