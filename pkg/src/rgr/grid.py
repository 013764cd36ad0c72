"""Low-rank parameter/time-varying grids over structured reference grids.

The node coordinates of a moving grid at step ``n`` are, per coordinate axis,
``U @ V[:, n]`` evaluated on a coarse set of uniformly placed control nodes
and control steps, then upsampled to the fine grid: piecewise cubic (or
linear) in space, piecewise linear across steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument
from .lowrank import truncated_svd


@dataclass(frozen=True, eq=False)
class ReferenceGrid:
    """Constant tensor-product grid, given by one coordinate line per axis."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=np.float64).copy() for a in self.axes)
        if len(axes) not in (1, 2):
            raise InvalidArgument("only 1-D and 2-D grids are supported")
        for a in axes:
            if a.ndim != 1 or a.size < 2:
                raise InvalidArgument("each axis needs at least two nodes")
            if not np.all(np.diff(a) > 0):
                raise InvalidArgument("axis coordinates must be strictly increasing")
            a.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, bounds, counts) -> "ReferenceGrid":
        """Uniform grid; ``bounds`` is a list of (lo, hi) per axis."""
        return cls(tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, counts)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def extent(self) -> np.ndarray:
        return np.array([a[-1] - a[0] for a in self.axes])

    @property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (N, dim), x index fastest."""
        if self.dim == 1:
            return self.axes[0][:, None].copy()
        x, y = np.meshgrid(self.axes[0], self.axes[1], indexing="xy")
        return np.stack([x.ravel(), y.ravel()], axis=1)

    @property
    def boundary_mask(self) -> np.ndarray:
        return _boundary_mask(self.shape)

    def min_spacing(self) -> float:
        return float(min(np.diff(a).min() for a in self.axes))


def _boundary_mask(shape) -> np.ndarray:
    if len(shape) == 1:
        m = np.zeros(shape[0], dtype=bool)
        m[[0, -1]] = True
        return m
    nx, ny = shape
    m = np.zeros((ny, nx), dtype=bool)
    m[0, :] = m[-1, :] = True
    m[:, 0] = m[:, -1] = True
    return m.ravel()


def lagrange_weights(s: np.ndarray, n: int, degree: int):
    """Stencil start indices and weights for interpolation at index positions.

    Nodes sit at integer positions ``0 .. n-1``; ``s`` holds query positions
    in that index space. The stencil has ``degree + 1`` points (fewer when
    ``n`` is too small) and is shifted inward near the ends.
    """
    s = np.asarray(s, dtype=np.float64)
    npts = min(degree + 1, n)
    base = np.floor(s).astype(np.int64) - (npts - 1) // 2
    base = np.clip(base, 0, n - npts)
    w = np.ones(s.shape + (npts,))
    for j in range(npts):
        for m in range(npts):
            if m != j:
                w[..., j] *= (s - (base + m)) / (j - m)
    return base, w


@lru_cache(maxsize=64)
def _upsample_1d(n_fine: int, n_ctrl: int, degree: int) -> np.ndarray:
    if n_ctrl == n_fine:
        mat = np.eye(n_fine)
        mat.setflags(write=False)
        return mat
    s = np.arange(n_fine) * ((n_ctrl - 1) / (n_fine - 1))
    base, w = lagrange_weights(s, n_ctrl, degree)
    mat = np.zeros((n_fine, n_ctrl))
    rows = np.arange(n_fine)
    for j in range(w.shape[1]):
        mat[rows, base + j] += w[:, j]
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=64)
def _step_upsample(n_steps: int, n_ctrl: int, spacing: float) -> np.ndarray:
    if n_ctrl == n_steps and spacing == 1.0:
        mat = np.eye(n_steps)
        mat.setflags(write=False)
        return mat
    s = np.arange(n_steps) / spacing
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n_ctrl - 2)
    t = s - i0
    mat = np.zeros((n_steps, n_ctrl))
    rows = np.arange(n_steps)
    mat[rows, i0] += 1.0 - t
    mat[rows, i0 + 1] += t
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=16)
def _space_upsample(fine_shape, ctrl_shape, degree) -> np.ndarray:
    mats = [_upsample_1d(f, c, degree) for f, c in zip(fine_shape, ctrl_shape)]
    if len(mats) == 1:
        return mats[0]
    # x fastest: flat index i + nx * j
    mat = np.kron(mats[1], mats[0])
    mat.setflags(write=False)
    return mat


def control_coordinates(ref: ReferenceGrid, ctrl_shape) -> np.ndarray:
    """Reference coordinates at the control nodes, shape (N_c, dim)."""
    lines = []
    for a, nc in zip(ref.axes, ctrl_shape):
        s = np.linspace(0.0, a.size - 1, nc)
        lines.append(np.interp(s, np.arange(a.size), a))
    if ref.dim == 1:
        return lines[0][:, None]
    x, y = np.meshgrid(lines[0], lines[1], indexing="xy")
    return np.stack([x.ravel(), y.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class MovingGrid:
    """Low-rank moving grid: per coordinate axis, a factor pair (U, V).

    Attributes
    ----------
    reference : ReferenceGrid
    basis : tuple of ndarray
        Per axis, control-node factor of shape (N_c, r).
    coeffs : tuple of ndarray
        Per axis, control-step factor of shape (r, K_c).
    control_shape : tuple of int
        Control node count per spatial axis; N_c is their product.
    n_steps : int
        Number of fine steps K.
    step_spacing : float
        Fine steps per control-step interval.
    upsample_degree : int
        Spatial control-to-fine interpolation degree (1 or 3).
    pinned : bool
        Hold boundary nodes at their reference coordinates.
    """

    reference: ReferenceGrid
    basis: tuple
    coeffs: tuple
    control_shape: tuple
    n_steps: int
    step_spacing: float = field(default=None)
    upsample_degree: int = 3
    pinned: bool = True

    def __post_init__(self):
        basis = tuple(np.asarray(u, dtype=np.float64) for u in self.basis)
        coeffs = tuple(np.asarray(v, dtype=np.float64) for v in self.coeffs)
        ref = self.reference
        if len(basis) != ref.dim or len(coeffs) != ref.dim:
            raise InvalidArgument("need one factor pair per axis")
        ctrl = tuple(int(c) for c in self.control_shape)
        nc = int(np.prod(ctrl))
        r = basis[0].shape[1]
        kc = coeffs[0].shape[1]
        for u, v in zip(basis, coeffs):
            if u.shape != (nc, r) or v.shape != (r, kc):
                raise InvalidArgument(
                    f"factor shapes {u.shape}, {v.shape} inconsistent with "
                    f"N_c={nc}, r={r}, K_c={kc}"
                )
        if any(c < 2 or c > f for c, f in zip(ctrl, ref.shape)):
            raise InvalidArgument(f"control shape {ctrl} invalid for grid {ref.shape}")
        if self.upsample_degree not in (1, 3):
            raise InvalidArgument("upsample_degree must be 1 or 3")
        spacing = self.step_spacing
        if spacing is None:
            spacing = 1.0 if kc == 1 else (self.n_steps - 1) / (kc - 1)
        if kc < 2 and self.n_steps > 1:
            raise InvalidArgument("need at least two control steps")
        if (self.n_steps - 1) / spacing > kc - 1 + 1e-9:
            raise InvalidArgument("control steps do not cover all fine steps")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "control_shape", ctrl)
        object.__setattr__(self, "step_spacing", float(spacing))

    @property
    def rank(self) -> int:
        return self.basis[0].shape[1]

    @property
    def n_control(self) -> int:
        return self.basis[0].shape[0]

    @property
    def n_control_steps(self) -> int:
        return self.coeffs[0].shape[1]

    @property
    def dim(self) -> int:
        return self.reference.dim

    def control_boundary_mask(self) -> np.ndarray:
        return _boundary_mask(self.control_shape)

    def free_rows(self) -> np.ndarray:
        """Mask of control nodes whose U rows are optimization variables."""
        if self.pinned:
            return ~self.control_boundary_mask()
        return np.ones(self.n_control, dtype=bool)

    def parameters(self) -> np.ndarray:
        """Free entries of all factors as one flat vector."""
        free = self.free_rows()
        parts = []
        for u, v in zip(self.basis, self.coeffs):
            parts.append(u[free].ravel())
            parts.append(v.ravel())
        return np.concatenate(parts)

    def with_parameters(self, theta) -> "MovingGrid":
        theta = np.asarray(theta, dtype=np.float64)
        free = self.free_rows()
        nfree = int(free.sum()) * self.rank
        nv = self.rank * self.n_control_steps
        if theta.size != self.dim * (nfree + nv):
            raise InvalidArgument(f"parameter vector has size {theta.size}")
        basis, coeffs = [], []
        pos = 0
        for u, v in zip(self.basis, self.coeffs):
            u = u.copy()
            u[free] = theta[pos:pos + nfree].reshape(-1, self.rank)
            pos += nfree
            basis.append(u)
            coeffs.append(theta[pos:pos + nv].reshape(v.shape))
            pos += nv
        return replace(self, basis=tuple(basis), coeffs=tuple(coeffs))

    def control_product(self, axis: int) -> np.ndarray:
        """U @ V for one axis, with pinned boundary rows overwritten."""
        c = self.basis[axis] @ self.coeffs[axis]
        if self.pinned:
            mask = self.control_boundary_mask()
            ref = control_coordinates(self.reference, self.control_shape)[:, axis]
            c[mask] = ref[mask, None]
        return c

    def positions(self, steps=None) -> np.ndarray:
        """Fine node coordinates, shape (dim, N, len(steps))."""
        ref = self.reference
        s_time = _step_upsample(self.n_steps, self.n_control_steps, self.step_spacing)
        if steps is not None:
            s_time = s_time[np.asarray(steps)]
        out = np.empty((self.dim, ref.size, s_time.shape[0]))
        bmask = ref.boundary_mask
        rcoords = ref.coords
        mats = [_upsample_1d(f, c, self.upsample_degree)
                for f, c in zip(ref.shape, self.control_shape)]
        for a in range(self.dim):
            c = self.control_product(a) @ s_time.T
            if self.dim == 1:
                out[a] = mats[0] @ c
            else:
                # separable upsampling of the (ny_c, nx_c, K) control field
                nxc, nyc = self.control_shape
                k = c.shape[1]
                f = (mats[1] @ c.reshape(nyc, nxc * k)).reshape(-1, nxc, k)
                out[a] = np.matmul(mats[0], f).reshape(ref.size, k)
            if self.pinned:
                out[a][bmask] = rcoords[bmask, a][:, None]
        return out


def assemble(g: MovingGrid, n: int) -> np.ndarray:
    """Fine node coordinates at step ``n``, shape (N, dim)."""
    if not 0 <= n < g.n_steps:
        raise InvalidArgument(f"step {n} out of range [0, {g.n_steps})")
    return g.positions([n])[:, :, 0].T


def _affine_candidates(ctrl: np.ndarray, axis: int) -> list:
    # fields with zero second differences: other coordinates, then constants
    cands = [ctrl[:, b] for b in range(ctrl.shape[1]) if b != axis]
    cands.append(np.ones(ctrl.shape[0]))
    return cands


def init_from_reference(
    ref: ReferenceGrid,
    r: int,
    n_steps: int,
    perturb_scale: float = 1e-3,
    seed: int = 0,
    control_shape=None,
    control_steps: int | None = None,
    upsample_degree: int = 3,
    pinned: bool = True,
) -> MovingGrid:
    """Rank-``r`` grid factored from the reference grid repeated at every step.

    The replication matrix is rank one, so the remaining factor columns are
    completed with fields that cost nothing under second-difference
    smoothing (the other coordinate, then a constant), each paired with a
    zero coefficient row. Factors are balanced so that coefficient rows
    have unit max-norm, then every U entry receives an independent
    uniform perturbation of amplitude ``perturb_scale`` times the axis
    length.
    """
    if control_shape is None:
        control_shape = ref.shape
    control_shape = tuple(int(c) for c in control_shape)
    if control_steps is None:
        control_steps = n_steps
    if r < 1 or n_steps < 2 or perturb_scale < 0:
        raise InvalidArgument("need r >= 1, K >= 2 and perturb_scale >= 0")
    nc = int(np.prod(control_shape))
    if r > min(nc, control_steps):
        raise InvalidArgument(f"grid rank {r} exceeds min(N_c={nc}, K_c={control_steps})")
    ctrl = control_coordinates(ref, control_shape)
    rng = np.random.default_rng(seed)
    basis, coeffs = [], []
    for a in range(ref.dim):
        rep = np.repeat(ctrl[:, a:a + 1], control_steps, axis=1)
        f = truncated_svd(rep, r)
        u, v = f.left.copy(), f.right.copy()
        length = ref.extent[a]
        tiny = f.singular_values <= 1e-12 * max(f.singular_values[0], 1e-300)
        if np.any(tiny):
            keep = [u[:, j] for j in range(r) if not tiny[j]]
            extra = []
            for c in _affine_candidates(ctrl, a) + [u[:, j] for j in np.flatnonzero(tiny)]:
                w = c.copy()
                for b in keep + extra:
                    w -= (b @ w) * b
                nrm = np.linalg.norm(w)
                if nrm > 1e-8 * np.linalg.norm(c):
                    extra.append(w / nrm)
                if len(extra) == int(tiny.sum()):
                    break
            for j, e in zip(np.flatnonzero(tiny), extra):
                u[:, j] = e * (0.5 * length / np.max(np.abs(e)))
                v[j] = 0.0
        for j in range(r):
            scale = np.max(np.abs(v[j]))
            if scale > 0:
                if v[j].sum() < 0:
                    scale = -scale
                u[:, j] *= scale
                v[j] /= scale
        if not tiny[0]:
            # the balanced leading pair of c 1^T is exactly (c, 1); drop SVD rounding
            u[:, 0] = ctrl[:, a]
            v[0] = 1.0
        u += rng.uniform(-1.0, 1.0, size=u.shape) * (perturb_scale * length)
        basis.append(u)
        coeffs.append(v)
    return MovingGrid(
        reference=ref,
        basis=tuple(basis),
        coeffs=tuple(coeffs),
        control_shape=control_shape,
        n_steps=n_steps,
        upsample_degree=upsample_degree,
        pinned=pinned,
    )


@dataclass
class VolumeReport:
    """Cell-volume summary over one or more steps."""

    step_min: np.ndarray
    global_min: float
    violations: np.ndarray  # rows of (step, cell)
    v_min: float

    @property
    def passed(self) -> bool:
        if self.v_min > 0:
            return self.global_min >= self.v_min
        return self.global_min > 0

    def violating_steps(self) -> np.ndarray:
        return np.unique(self.violations[:, 0]) if len(self.violations) else np.array([], int)


def volumes(pos: np.ndarray, shape) -> np.ndarray:
    """Signed cell volumes for positions of shape (dim, N, K) -> (cells, K)."""
    if len(shape) == 1:
        return np.diff(pos[0], axis=0)
    nx, ny = shape
    k = pos.shape[2]
    x = pos[0].reshape(ny, nx, k)
    y = pos[1].reshape(ny, nx, k)
    x00, x10, x11, x01 = x[:-1, :-1], x[:-1, 1:], x[1:, 1:], x[1:, :-1]
    y00, y10, y11, y01 = y[:-1, :-1], y[:-1, 1:], y[1:, 1:], y[1:, :-1]
    area = 0.5 * ((x11 - x00) * (y01 - y10) - (x01 - x10) * (y11 - y00))
    return area.reshape((nx - 1) * (ny - 1), k)


def _report(vol: np.ndarray, v_min: float) -> VolumeReport:
    step_min = vol.min(axis=0)
    bad = vol < v_min if v_min > 0 else vol <= 0
    cells, steps = np.nonzero(bad)
    viol = np.stack([steps, cells], axis=1) if cells.size else np.empty((0, 2), int)
    viol = viol[np.lexsort((viol[:, 1], viol[:, 0]))] if len(viol) else viol
    return VolumeReport(step_min=step_min, global_min=float(step_min.min()),
                        violations=viol, v_min=float(v_min))


def cell_volumes(coords, ref: ReferenceGrid, v_min: float = 0.0) -> VolumeReport:
    """Cell volumes of one node configuration shaped like ``ref.coords``.

    1-D cells are successive differences; 2-D cells are signed
    quadrilateral areas (shoelace formula). Non-positive or sub-``v_min``
    volumes are reported, never raised.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(ref.size, ref.dim)
    vol = volumes(c.T[:, :, None], ref.shape)
    return _report(vol, v_min)


def validate_diffeomorphism(g: MovingGrid, v_min: float = 0.0) -> VolumeReport:
    """Assemble every step and check all cell volumes against ``v_min``."""
    return _report(volumes(g.positions(), g.reference.shape), v_min)
