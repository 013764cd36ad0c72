"""Deterministic snapshot generators.

* ``rotated_glyph``: a rasterized letter rotated through a range of angles.
* ``burgers_solve``: viscous Burgers equation, Crank-Nicolson with Newton.
* ``wave_solve``: 1-D wave equation, Newmark average acceleration.
* ``advecting_gaussian``: exact translating profile plus the exact moving
  grid that freezes it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_banded

from .errors import InvalidArgument, NumericalFailure
from .grid import MovingGrid, ReferenceGrid

_IC_KINDS = ("default", "gaussian", "sine", "zero")


@dataclass(frozen=True)
class PdeRunConfig:
    """Discretization and initial condition for the 1-D generators.

    ``ic`` is one of ``"default"`` (the generator's standard profile),
    ``"gaussian"`` (``amplitude * exp(-(x-center)^2/width^2) + background``),
    ``"sine"`` (``amplitude * sin(mode*pi*(x-x_a)/L)``) or ``"zero"``;
    ``ic_params`` overrides the parameters. ``stride`` keeps every
    ``stride``-th step, always including step 0.
    """

    bounds: tuple = (0.0, 1.0)
    final_time: float = 1.0
    dx: float = 1e-2
    dt: float = 1e-2
    ic: str = "default"
    ic_params: dict = field(default_factory=dict)
    reynolds: float = 1000.0
    stride: int = 1

    def __post_init__(self):
        xa, xb = (float(b) for b in self.bounds)
        object.__setattr__(self, "bounds", (xa, xb))
        if not xb > xa:
            raise InvalidArgument("domain bounds must satisfy x_a < x_b")
        if not (self.dx > 0 and self.dt > 0 and self.final_time > 0):
            raise InvalidArgument("dx, dt and final_time must be positive")
        if self.stride < 1:
            raise InvalidArgument("stride must be >= 1")
        if self.ic not in _IC_KINDS:
            raise InvalidArgument(f"unknown initial condition {self.ic!r}; expected one of {_IC_KINDS}")
        for name, span, h in (("dx", xb - xa, self.dx), ("dt", self.final_time, self.dt)):
            q = span / h
            if abs(q - round(q)) > 1e-8 * max(1.0, q):
                raise InvalidArgument(f"{name}={h} does not divide the interval length {span}")

    @property
    def n_points(self) -> int:
        return int(round((self.bounds[1] - self.bounds[0]) / self.dx)) + 1

    @property
    def n_steps(self) -> int:
        return int(round(self.final_time / self.dt)) + 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.n_points)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.final_time, self.n_steps)

    def kept_steps(self) -> np.ndarray:
        return np.arange(0, self.n_steps, self.stride)

    def reference(self) -> ReferenceGrid:
        return ReferenceGrid((self.x,))


def _initial(cfg: PdeRunConfig, default: dict) -> np.ndarray:
    x = cfg.x
    kind = cfg.ic
    prm = dict(cfg.ic_params)
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "sine":
        a = prm.get("amplitude", 1.0)
        mode = prm.get("mode", 1)
        length = cfg.bounds[1] - cfg.bounds[0]
        return a * np.sin(mode * np.pi * (x - cfg.bounds[0]) / length)
    p = {**default, **prm} if kind == "default" else {
        "amplitude": 1.0, "center": 0.5, "width": 0.1, "background": 0.0, **prm}
    return p["background"] + p["amplitude"] * np.exp(-((x - p["center"]) / p["width"]) ** 2)


# ---------------------------------------------------------------- glyphs

# strokes as (x0, y0, x1, y1) in [-1, 1]^2, y pointing up
_GLYPHS = {
    "A": ((-0.55, -0.7, 0.0, 0.7), (0.55, -0.7, 0.0, 0.7), (-0.3, -0.1, 0.3, -0.1)),
    "cross": ((-0.7, 0.0, 0.7, 0.0), (0.0, -0.7, 0.0, 0.7)),
}
_STROKE_HALF_WIDTH = 0.09
_EDGE_PIXELS = 2.0


def _pixel_centers(size: int) -> np.ndarray:
    return -1.0 + (np.arange(size) + 0.5) * (2.0 / size)


def glyph_reference(size: int) -> ReferenceGrid:
    c = _pixel_centers(size)
    return ReferenceGrid((c, c))


def rasterize(glyph: str, size: int) -> np.ndarray:
    """Anti-aliased glyph image, shape (size, size), row index = y."""
    if glyph not in _GLYPHS:
        raise InvalidArgument(f"unknown glyph {glyph!r}")
    c = _pixel_centers(size)
    x, y = np.meshgrid(c, c, indexing="xy")
    dist = np.full(x.shape, np.inf)
    for x0, y0, x1, y1 in _GLYPHS[glyph]:
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        dist = np.minimum(dist, np.hypot(x - x0 - t * dx, y - y0 - t * dy))
    ramp = _EDGE_PIXELS * 2.0 / size
    # intensity ramps linearly across the stroke edge
    return np.clip(0.5 - (dist - _STROKE_HALF_WIDTH) / ramp, 0.0, 1.0)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center; bilinear, zero fill."""
    ny, nx = img.shape
    th = math.radians(degrees)
    ct, st = math.cos(th), math.sin(th)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    j, i = np.mgrid[0:ny, 0:nx].astype(np.float64)
    # source location of each output pixel: inverse rotation
    u = ct * (i - cx) + st * (j - cy) + cx
    v = -st * (i - cx) + ct * (j - cy) + cy
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu, fv = u - i0, v - j0
    pad = np.zeros((ny + 2, nx + 2))
    pad[1:-1, 1:-1] = img
    i0p = np.clip(i0 + 1, 0, nx)
    j0p = np.clip(j0 + 1, 0, ny)
    inside = (i0 >= -1) & (i0 <= nx - 1) & (j0 >= -1) & (j0 <= ny - 1)
    out = ((1 - fv) * ((1 - fu) * pad[j0p, i0p] + fu * pad[j0p, i0p + 1])
           + fv * ((1 - fu) * pad[j0p + 1, i0p] + fu * pad[j0p + 1, i0p + 1]))
    return np.where(inside, out, 0.0)


def rotated_glyph(size: int = 50, total_degrees: float = 90.0, increment: float = 3.0,
                  glyph: str = "A"):
    """Snapshots of a glyph rotated from 0 to ``total_degrees``.

    Returns ``(M, reference)`` with one column per angle (x fastest in each
    column) and a reference grid of pixel centers on ``[-1, 1]^2``.
    """
    if size < 8:
        raise InvalidArgument("size must be >= 8")
    if total_degrees < 0 or increment < 0:
        raise InvalidArgument("angles must be non-negative")
    if increment == 0:
        if total_degrees != 0:
            raise InvalidArgument("increment 0 requires total_degrees 0")
        n = 1
    else:
        q = total_degrees / increment
        if abs(q - round(q)) > 1e-9 * max(1.0, q):
            raise InvalidArgument("increment must divide total_degrees")
        n = int(round(q)) + 1
    base = rasterize(glyph, size)
    cols = [base.ravel()]
    for k in range(1, n):
        cols.append(rotate_image(base, k * increment).ravel())
    return np.stack(cols, axis=1), glyph_reference(size)


# ---------------------------------------------------------------- Burgers

_BURGERS_IC = {"amplitude": 0.5, "center": 0.5, "width": 0.1, "background": 0.8}


def burgers_solve(cfg: PdeRunConfig, tol: float = 1e-10, max_newton: int = 20):
    """Viscous Burgers ``w_t + (w^2/2)_x = w_xx / Re`` with zero Dirichlet data.

    Conservative central differences in space, Crank-Nicolson in time;
    each step solves the tridiagonal Newton system. Returns ``(M, ref)``.
    """
    if cfg.reynolds <= 0:
        raise InvalidArgument("Reynolds number must be positive")
    w = _initial(cfg, _BURGERS_IC)
    w[0] = w[-1] = 0.0
    h, dt, nu = cfg.dx, cfg.dt, 1.0 / cfg.reynolds
    n = w.size - 2

    def residual_parts(u):
        # spatial operator on interior nodes; u includes the zero boundaries
        f = 0.5 * u * u
        return (f[2:] - f[:-2]) / (2 * h) - nu * (u[2:] - 2 * u[1:-1] + u[:-2]) / (h * h)

    keep = set(cfg.kept_steps().tolist())
    out = [w.copy()]
    ab = np.empty((3, n))
    for step in range(1, cfg.n_steps):
        old = w
        r_old = residual_parts(old)
        new = old.copy()
        for it in range(max_newton):
            res = (new[1:-1] - old[1:-1]) / dt + 0.5 * (residual_parts(new) + r_old)
            ui = new[1:-1]
            # d/du_{i+1} and d/du_{i-1} of the discrete operator
            up = np.empty(n)
            lo = np.empty(n)
            up[:-1] = ui[1:] / (2 * h)
            lo[1:] = -ui[:-1] / (2 * h)
            ab[0, 1:] = 0.5 * (up[:-1] - nu / (h * h))
            ab[0, 0] = 0.0
            ab[1] = 1.0 / dt + 0.5 * (2 * nu / (h * h))
            ab[2, :-1] = 0.5 * (lo[1:] - nu / (h * h))
            ab[2, -1] = 0.0
            delta = solve_banded((1, 1), ab, -res)
            new[1:-1] += delta
            if not np.all(np.isfinite(new)):
                raise NumericalFailure(f"Newton iteration diverged at step {step}", step=step)
            if np.max(np.abs(delta)) < tol:
                break
        else:
            raise NumericalFailure(f"Newton iteration did not converge at step {step}", step=step)
        w = new
        if step in keep:
            out.append(w.copy())
    return np.stack(out, axis=1), cfg.reference()


# ---------------------------------------------------------------- wave

_WAVE_IC = {"amplitude": 1.0, "center": 0.5, "width": 0.1, "background": 0.0}


def wave_energy(u, v, dx: float) -> float:
    """Kinetic plus strain energy of a state with zero boundary values."""
    return 0.5 * dx * float(v @ v) + 0.5 * float(np.sum(np.diff(u) ** 2)) / dx


def wave_solve(cfg: PdeRunConfig, return_velocity: bool = False):
    """Wave equation ``w_tt = w_xx`` with zero Dirichlet data and zero
    initial velocity, Newmark average acceleration in time.

    Returns ``(M, ref)`` or, with ``return_velocity``, ``(M, V, ref)``.
    """
    u = _initial(cfg, _WAVE_IC)
    u[0] = u[-1] = 0.0
    h, dt = cfg.dx, cfg.dt
    n = u.size - 2
    # stiffness of -d2/dx2 on interior nodes
    stiff = (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / (h * h)
    try:
        lhs = cho_factor(np.eye(n) + 0.25 * dt * dt * stiff)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"wave system factorization failed: {exc}") from exc
    ui = u[1:-1].copy()
    vi = np.zeros(n)
    ai = -stiff @ ui
    keep = set(cfg.kept_steps().tolist())
    us, vs = [u.copy()], [np.zeros_like(u)]
    for step in range(1, cfg.n_steps):
        pred = ui + dt * vi + 0.25 * dt * dt * ai
        a_new = cho_solve(lhs, -stiff @ pred)
        ui = pred + 0.25 * dt * dt * a_new
        vi = vi + 0.5 * dt * (ai + a_new)
        ai = a_new
        if step in keep:
            full = np.zeros(n + 2)
            full[1:-1] = ui
            us.append(full)
            fv = np.zeros(n + 2)
            fv[1:-1] = vi
            vs.append(fv)
    m = np.stack(us, axis=1)
    if return_velocity:
        return m, np.stack(vs, axis=1), cfg.reference()
    return m, cfg.reference()


# ---------------------------------------------------------------- oracle

def advecting_gaussian(c: float, cfg: PdeRunConfig, center: float | None = None,
                       width: float | None = None):
    """Exactly sampled ``w(x, t) = exp(-(x - x0 - c t)^2 / s^2)``.

    ``x0`` and ``s`` come from ``cfg.ic_params`` (``center``, ``width``)
    unless given. The peak must stay at least ``3 s`` inside the domain at
    all kept steps so the profile is negligible at the boundary.

    Returns ``(M, ref, grid)`` where ``grid`` is the exact rank-2 moving
    grid ``x_ref + c t_n`` (factors ``[x_ref, 1]`` and ``[1; c t_n]``,
    boundaries free, no control down-sampling).
    """
    x0 = cfg.ic_params.get("center", 0.5) if center is None else center
    s = cfg.ic_params.get("width", 0.1) if width is None else width
    if s <= 0:
        raise InvalidArgument("width must be positive")
    t = cfg.times[cfg.kept_steps()]
    peaks = x0 + c * t
    xa, xb = cfg.bounds
    if peaks.min() < xa + 3 * s - 1e-12 or peaks.max() > xb - 3 * s + 1e-12:
        raise InvalidArgument(
            f"profile leaves the domain: peak range [{peaks.min():.4g}, {peaks.max():.4g}] "
            f"not inside [{xa + 3 * s:.4g}, {xb - 3 * s:.4g}]"
        )
    x = cfg.x
    m = np.exp(-((x[:, None] - peaks[None, :]) / s) ** 2)
    ref = cfg.reference()
    u = np.stack([x, np.ones_like(x)], axis=1)
    v = np.stack([np.ones_like(t), c * t])
    grid = MovingGrid(reference=ref, basis=(u,), coeffs=(v,), control_shape=ref.shape,
                      n_steps=t.size, upsample_degree=1, pinned=False)
    return m, ref, grid
