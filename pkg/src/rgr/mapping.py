"""Interpolation maps between the reference grid and a moving grid.

``map_forward`` samples reference-grid snapshots at the moving node
locations (G); ``map_inverse`` brings values carried by the moving nodes
back to the reference nodes (G^-1). Both use local polynomial stencils of
``degree + 1`` points per axis, so every output depends on at most
``(p + 1) ** dim`` inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import InvalidArgument, InvalidGrid, NumericalFailure
from .grid import MovingGrid, volumes


@dataclass(frozen=True)
class InterpConfig:
    degree: int = 1
    extrapolation: str = "clamp"

    def __post_init__(self):
        if self.degree not in (1, 3):
            raise InvalidArgument(f"interpolation degree must be 1 or 3, got {self.degree}")
        if self.extrapolation != "clamp":
            raise InvalidArgument("only the 'clamp' extrapolation policy is supported")


@dataclass(frozen=True, eq=False)
class DifferenceOperator:
    """Scaled second-difference matrix."""

    size: int
    scale: float
    matrix: np.ndarray

    def apply(self, x, axis=0):
        return np.moveaxis(np.tensordot(self.matrix, np.moveaxis(x, axis, 0), axes=1), 0, axis)


def second_difference(n: int, scale: float = 1.0) -> DifferenceOperator:
    """``[1, -2, 1]`` stencil times ``scale``; end rows reuse the nearest
    interior stencil (one-sided second differences).

    The matrix is cached and read-only.
    """
    if n < 3:
        raise InvalidArgument(f"second difference needs n >= 3, got {n}")
    if scale < 0:
        raise InvalidArgument("scale must be non-negative")
    return _second_difference(int(n), float(scale))


@lru_cache(maxsize=64)
def _second_difference(n: int, scale: float) -> DifferenceOperator:
    d = np.zeros((n, n))
    for i in range(n):
        c = min(max(i, 1), n - 2)
        d[i, c - 1:c + 2] = (1.0, -2.0, 1.0)
    d *= scale
    d.flags.writeable = False
    return DifferenceOperator(size=n, scale=scale, matrix=d)


def _axis_stencil(axis: np.ndarray, x: np.ndarray, degree: int):
    """Stencil base and Lagrange weights for points ``x`` on sorted nodes.

    ``x`` must already lie inside ``[axis[0], axis[-1]]``.
    """
    n = axis.size
    npts = min(degree + 1, n)
    cell = np.clip(np.searchsorted(axis, x, side="right") - 1, 0, n - 2)
    if npts == 2:
        x0 = axis[cell]
        t = (x - x0) / (axis[cell + 1] - x0)
        return cell, np.stack([1.0 - t, t], axis=-1)
    base = np.clip(cell - (npts - 1) // 2, 0, n - npts)
    nodes = [axis[base + m] for m in range(npts)]
    w = np.ones(x.shape + (npts,))
    for j in range(npts):
        for m in range(npts):
            if m != j:
                w[..., j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return base, w


def _check_shape(a, g: MovingGrid, steps, name):
    a = np.asarray(a, dtype=np.float64)
    k = g.n_steps if steps is None else len(steps)
    if a.shape != (g.reference.size, k):
        raise InvalidArgument(f"{name} has shape {a.shape}, expected {(g.reference.size, k)}")
    return a


def _check_grid(pos, g: MovingGrid, steps):
    vol = volumes(pos, g.reference.shape)
    bad = np.nonzero(vol.min(axis=0) <= 0)[0]
    if bad.size:
        step = int(bad[0]) if steps is None else int(np.asarray(steps)[bad[0]])
        raise InvalidGrid(f"moving grid has non-positive cell volume at step {step}")


def map_forward(m, g: MovingGrid, cfg: InterpConfig = InterpConfig(), steps=None,
                validate: bool = True, positions=None) -> np.ndarray:
    """Sample each snapshot column at its step's moving node locations.

    Parameters
    ----------
    m : ndarray, shape (N, K)
        Snapshots on the reference grid.
    g : MovingGrid
    cfg : InterpConfig
    steps : sequence of int, optional
        Grid steps the columns of ``m`` correspond to (default: all).
    validate : bool
        Raise :class:`InvalidGrid` when any cell volume is non-positive.
    positions : ndarray, optional
        Precomputed ``g.positions(steps)``.
    """
    m = _check_shape(m, g, steps, "snapshot matrix")
    pos = g.positions(steps) if positions is None else positions
    if validate:
        _check_grid(pos, g, steps)
    ref = g.reference
    if ref.dim == 1:
        x = np.clip(pos[0], ref.axes[0][0], ref.axes[0][-1])
        b, w = _axis_stencil(ref.axes[0], x, cfg.degree)
        cols = np.arange(m.shape[1])[None, :]
        out = np.zeros_like(m)
        for j in range(w.shape[-1]):
            out += w[..., j] * m[b + j, cols]
        return out
    nx, ny = ref.shape
    k = m.shape[1]
    vals = np.ascontiguousarray(m.T).reshape(k, ny, nx)
    out = _kernels.sample_2d(vals, ref.axes[0], ref.axes[1],
                             np.ascontiguousarray(pos[0].T), np.ascontiguousarray(pos[1].T),
                             cfg.degree)
    return out.T


def _inverse_1d(vals, pos, xref, degree):
    out = np.empty((xref.size, vals.shape[1]))
    for n in range(vals.shape[1]):
        nodes = pos[:, n]
        if degree == 1:
            out[:, n] = np.interp(xref, nodes, vals[:, n])
            continue
        x = np.clip(xref, nodes[0], nodes[-1])
        b, w = _axis_stencil(nodes, x, degree)
        out[:, n] = np.einsum("ij,ij->i", w, vals[b[:, None] + np.arange(w.shape[1]), n])
    return out


def locate(g: MovingGrid, steps=None, positions=None, tol=1e-12, maxit=40):
    """Fractional node-index coordinates of every reference node inside the
    moving grid, per step.

    Returns ``(xi, eta, status)`` arrays of shape (K, N); status is 0 when
    found, 1 when the node lies outside the deformed domain (coordinates
    clamped to the nearest boundary cell), 2 on Newton non-convergence.
    2-D grids only.
    """
    ref = g.reference
    pos = g.positions(steps) if positions is None else positions
    nx, ny = ref.shape
    k = pos.shape[2]
    X = np.ascontiguousarray(pos[0].T).reshape(k, ny, nx)
    Y = np.ascontiguousarray(pos[1].T).reshape(k, ny, nx)
    rc = ref.coords
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci = np.clip(ii.ravel(), 0, nx - 2).astype(np.int64)
    cj = np.clip(jj.ravel(), 0, ny - 2).astype(np.int64)
    return _kernels.locate_2d(X, Y, np.ascontiguousarray(rc[:, 0]),
                              np.ascontiguousarray(rc[:, 1]), ci, cj, tol, maxit)


def map_inverse(latent, g: MovingGrid, cfg: InterpConfig = InterpConfig(), steps=None,
                validate: bool = True, positions=None, return_info: bool = False):
    """Interpolate values carried by the moving nodes back to the reference
    nodes.

    In 1-D this is interpolation on the (monotone) moving node set. In 2-D
    each reference node is located in a deformed cell by a cell walk seeded
    from the previous step, the bilinear cell map is inverted by Newton
    iteration, and the value is interpolated at the recovered index
    coordinates. Reference nodes not covered by the moving grid take the
    nearest boundary value.

    With ``return_info`` the per-step count of such uncovered nodes is
    returned alongside the result.
    """
    latent = _check_shape(latent, g, steps, "latent matrix")
    pos = g.positions(steps) if positions is None else positions
    if validate:
        _check_grid(pos, g, steps)
    ref = g.reference
    if ref.dim == 1:
        out = _inverse_1d(latent, pos[0], ref.axes[0], cfg.degree)
        lo = ref.axes[0][:, None] < pos[0][:1]
        hi = ref.axes[0][:, None] > pos[0][-1:]
        outside = (lo | hi).sum(axis=0)
        return (out, {"outside": outside}) if return_info else out
    xi, eta, status = locate(g, steps=steps, positions=pos)
    bad = np.argwhere(status == _kernels.NO_CONVERGENCE)
    if bad.size:
        k, q = bad[0]
        s = int(k) if steps is None else int(np.asarray(steps)[k])
        raise NumericalFailure(f"inverse bilinear map did not converge for node {q} at step {s}",
                               step=s)
    nx, ny = ref.shape
    kk = latent.shape[1]
    vals = np.ascontiguousarray(latent.T).reshape(kk, ny, nx)
    out = _kernels.gather_index_2d(vals, xi, eta, cfg.degree).T
    if return_info:
        return out, {"outside": (status == _kernels.OUTSIDE).sum(axis=1)}
    return out
