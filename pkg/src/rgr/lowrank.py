"""Truncated SVD and rank-k approximation of snapshot matrices.

A snapshot matrix is a plain 2-D ``float64`` array of shape ``(N, K)``: one
column per parameter/time step. For spatial data in more than one dimension,
rows are the flattened grid with the x index running fastest.

The decomposition follows the method of snapshots: the eigenvectors of the
small Gram matrix give the right singular vectors, and the left factor is
recovered from them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InvalidArgument, InvalidData


def as_snapshots(m, name="matrix") -> np.ndarray:
    """Validate ``m`` as a finite 2-D float64 array and return it."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidArgument(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidData(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class LowRankFactors:
    """Rank-k factor pair with ``left @ right`` approximating a snapshot matrix.

    ``left`` has orthonormal columns; the singular values are absorbed into
    ``right`` so that row i of ``right`` has norm ``singular_values[i]``.
    """

    left: np.ndarray
    right: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # first non-negligible entry of each column made non-negative
    signs = np.ones(u.shape[1])
    for j in range(u.shape[1]):
        col = u[:, j]
        scale = np.max(np.abs(col))
        if scale == 0.0:
            continue
        first = np.flatnonzero(np.abs(col) > 1e-12 * scale)[0]
        if col[first] < 0:
            signs[j] = -1.0
    return u * signs


def truncated_svd(m, k: int) -> LowRankFactors:
    """Eckart-Young optimal rank-``k`` factors of ``m``.

    Parameters
    ----------
    m : array_like, shape (N, K)
    k : int
        Target rank, ``1 <= k <= min(N, K)``.

    Returns
    -------
    LowRankFactors
        ``left`` is N x k with orthonormal columns, ``right`` is
        ``left.T @ m``, i.e. the singular values times the right singular
        vectors.
    """
    a = as_snapshots(m)
    n, kk = a.shape
    if not isinstance(k, (int, np.integer)) or k < 1 or k > min(n, kk):
        raise InvalidArgument(f"rank k={k} out of range [1, {min(n, kk)}]")
    if kk <= n:
        lam, w = np.linalg.eigh(a.T @ a)
        order = np.argsort(lam)[::-1][:k]
        w = w[:, order]
        # columns of a @ w are mutually orthogonal; QR restores unit norm
        # and completes the basis where singular values vanish
        q, r = np.linalg.qr(a @ w)
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        u = q * d
    else:
        lam, w = np.linalg.eigh(a @ a.T)
        order = np.argsort(lam)[::-1][:k]
        u = w[:, order]
    u = _fix_signs(u)
    v = u.T @ a
    s = np.linalg.norm(v, axis=1)
    # eigenvalue order can disagree with row norms at the rounding level
    perm = np.argsort(-s, kind="stable")
    if np.any(perm != np.arange(k)):
        u, v, s = u[:, perm], v[perm], s[perm]
    return LowRankFactors(left=u, right=v, singular_values=s)


def singular_values(m) -> np.ndarray:
    """All singular values of ``m`` in descending order (Gram route)."""
    a = as_snapshots(m)
    g = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    lam = np.linalg.eigvalsh(g)[::-1]
    return np.sqrt(np.clip(lam, 0.0, None))


def reconstruct(f: LowRankFactors) -> np.ndarray:
    """Return ``f.left @ f.right``."""
    if f.left.ndim != 2 or f.right.ndim != 2 or f.left.shape[1] != f.right.shape[0]:
        raise InvalidArgument(
            f"factor shapes {f.left.shape} and {f.right.shape} do not conform"
        )
    return f.left @ f.right


def frobenius_error(a, b, relative: bool = False) -> float:
    """Frobenius norm of ``a - b``, optionally divided by that of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.linalg.norm(a - b))
    if relative:
        na = float(np.linalg.norm(a))
        if na == 0.0:
            raise DegenerateInput("relative error undefined for a zero reference")
        err /= na
    return err


def pod_error(m, k: int, relative: bool = False) -> float:
    """Error of the best rank-``k`` approximation of ``m``."""
    f = truncated_svd(m, k)
    return frobenius_error(m, reconstruct(f), relative=relative)


def energy_fraction(sigma, k: int) -> float:
    """Share of the squared singular values captured by the leading ``k``."""
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    total = s2.sum()
    return float(s2[:k].sum() / total) if total > 0 else 1.0
