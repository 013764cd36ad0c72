"""Compiled 2-D interpolation kernels.

Arrays are step-major: node fields have shape (K, ny, nx), query sets
(K, Q) or (Q,).
"""
import numpy as np
from numba import njit

FOUND = 0
OUTSIDE = 1
NO_CONVERGENCE = 2

_STARTS = np.array([[0.5, 0.5], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _index_weights(s, n, npts, w):
    # Lagrange weights at index position s on nodes 0..n-1; returns base
    base = int(np.floor(s)) - (npts - 1) // 2
    if base < 0:
        base = 0
    if base > n - npts:
        base = n - npts
    for j in range(npts):
        v = 1.0
        for m in range(npts):
            if m != j:
                v *= (s - (base + m)) / (j - m)
        w[j] = v
    return base


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _axis_weights(axis, x, npts, w):
    # Lagrange weights at physical x on sorted nodes; x clamped to the range
    n = axis.size
    if x < axis[0]:
        x = axis[0]
    elif x > axis[n - 1]:
        x = axis[n - 1]
    # guess from the mean spacing, then correct; exact for uniform axes
    cell = int((x - axis[0]) * (n - 1) / (axis[n - 1] - axis[0]))
    if cell > n - 2:
        cell = n - 2
    while cell > 0 and axis[cell] > x:
        cell -= 1
    while cell < n - 2 and axis[cell + 1] <= x:
        cell += 1
    base = cell - (npts - 1) // 2
    if base < 0:
        base = 0
    if base > n - npts:
        base = n - npts
    for j in range(npts):
        v = 1.0
        xj = axis[base + j]
        for m in range(npts):
            if m != j:
                xm = axis[base + m]
                v *= (x - xm) / (xj - xm)
        w[j] = v
    return base


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _axis_cell(axis, x):
    # containing cell and local coordinate at physical x (clamped)
    n = axis.size
    if x < axis[0]:
        x = axis[0]
    elif x > axis[n - 1]:
        x = axis[n - 1]
    cell = int((x - axis[0]) * (n - 1) / (axis[n - 1] - axis[0]))
    if cell > n - 2:
        cell = n - 2
    while cell > 0 and axis[cell] > x:
        cell -= 1
    while cell < n - 2 and axis[cell + 1] <= x:
        cell += 1
    return cell, (x - axis[cell]) / (axis[cell + 1] - axis[cell])


@njit(cache=True, nogil=True, error_model="numpy")
def sample_2d(vals, ax, ay, px, py, degree):
    """Interpolate reference-grid fields ``vals`` (K, ny, nx) at moving
    positions ``px``, ``py`` (K, Q); positions outside are clamped."""
    nk, nq = px.shape
    npx = min(degree + 1, ax.size)
    npy = min(degree + 1, ay.size)
    wx = np.empty(npx)
    wy = np.empty(npy)
    out = np.empty((nk, nq))
    if degree == 1:
        for k in range(nk):
            for q in range(nq):
                i, s = _axis_cell(ax, px[k, q])
                j, t = _axis_cell(ay, py[k, q])
                out[k, q] = ((1 - t) * ((1 - s) * vals[k, j, i] + s * vals[k, j, i + 1])
                             + t * ((1 - s) * vals[k, j + 1, i] + s * vals[k, j + 1, i + 1]))
        return out
    for k in range(nk):
        for q in range(nq):
            bx = _axis_weights(ax, px[k, q], npx, wx)
            by = _axis_weights(ay, py[k, q], npy, wy)
            acc = 0.0
            for jy in range(npy):
                row = 0.0
                for jx in range(npx):
                    row += wx[jx] * vals[k, by + jy, bx + jx]
                acc += wy[jy] * row
            out[k, q] = acc
    return out


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _residual(x00, y00, x10, y10, x11, y11, x01, y01, qx, qy, s, t):
    a = (1 - s) * (1 - t)
    b = s * (1 - t)
    c = s * t
    d = (1 - s) * t
    return (a * x00 + b * x10 + c * x11 + d * x01 - qx,
            a * y00 + b * y10 + c * y11 + d * y01 - qy)


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _local_coords(x00, y00, x10, y10, x11, y11, x01, y01, qx, qy, s, t, tol, maxit):
    # damped Newton on the bilinear cell map; returns (s, t, converged)
    fx, fy = _residual(x00, y00, x10, y10, x11, y11, x01, y01, qx, qy, s, t)
    r0 = fx * fx + fy * fy
    for _ in range(maxit):
        dxds = (1 - t) * (x10 - x00) + t * (x11 - x01)
        dyds = (1 - t) * (y10 - y00) + t * (y11 - y01)
        dxdt = (1 - s) * (x01 - x00) + s * (x11 - x10)
        dydt = (1 - s) * (y01 - y00) + s * (y11 - y10)
        det = dxds * dydt - dxdt * dyds
        if det == 0.0 or not np.isfinite(det):
            return s, t, False
        ds = (fx * dydt - fy * dxdt) / det
        dt = (dxds * fy - dyds * fx) / det
        lam = 1.0
        for _ in range(12):
            sn = s - lam * ds
            tn = t - lam * dt
            gx, gy = _residual(x00, y00, x10, y10, x11, y11, x01, y01, qx, qy, sn, tn)
            r1 = gx * gx + gy * gy
            if r1 <= r0 or r1 == 0.0:
                break
            lam *= 0.5
        s = sn
        t = tn
        fx = gx
        fy = gy
        r0 = r1
        if abs(ds) < tol and abs(dt) < tol:
            return s, t, True
    return s, t, False


@njit(cache=True, nogil=True, error_model="numpy")
def locate_2d(X, Y, qx, qy, ci, cj, tol, maxit):
    """Locate query points inside a deformed structured grid.

    ``X``, ``Y`` have shape (K, ny, nx); ``ci``, ``cj`` hold the starting
    cell per query and are updated in place, so each step is seeded with
    the cell found at the previous step. Returns fractional index
    coordinates (xi, eta) of shape (K, Q) and a status array.
    """
    nk, ny, nx = X.shape
    nq = qx.size
    xi = np.empty((nk, nq))
    eta = np.empty((nk, nq))
    status = np.zeros((nk, nq), dtype=np.int64)
    max_walk = 2 * (nx + ny) + 8
    eps = 1e-10
    s_prev = np.full(nq, 0.5)
    t_prev = np.full(nq, 0.5)
    for k in range(nk):
        for q in range(nq):
            i = ci[q]
            j = cj[q]
            px = qx[q]
            py = qy[q]
            st = NO_CONVERGENCE
            # warm start from the previous step's local coordinates
            s = s_prev[q]
            t = t_prev[q]
            for _ in range(max_walk):
                s, t, ok = _local_coords(
                    X[k, j, i], Y[k, j, i], X[k, j, i + 1], Y[k, j, i + 1],
                    X[k, j + 1, i + 1], Y[k, j + 1, i + 1], X[k, j + 1, i], Y[k, j + 1, i],
                    px, py, s, t, tol, maxit,
                )
                if not (np.isfinite(s) and np.isfinite(t)):
                    s = 0.5
                    t = 0.5
                    break
                for r in range(5):
                    if ok:
                        break
                    s, t, ok = _local_coords(
                        X[k, j, i], Y[k, j, i], X[k, j, i + 1], Y[k, j, i + 1],
                        X[k, j + 1, i + 1], Y[k, j + 1, i + 1], X[k, j + 1, i], Y[k, j + 1, i],
                        px, py, _STARTS[r, 0], _STARTS[r, 1], tol, maxit,
                    )
                di = 0
                dj = 0
                if s < -eps:
                    di = -1
                elif s > 1 + eps:
                    di = 1
                if t < -eps:
                    dj = -1
                elif t > 1 + eps:
                    dj = 1
                if di == 0 and dj == 0:
                    st = FOUND if ok else NO_CONVERGENCE
                    break
                ni = min(max(i + di, 0), nx - 2)
                nj = min(max(j + dj, 0), ny - 2)
                if ni == i and nj == j:
                    # wants to leave the grid: outside the deformed domain
                    st = OUTSIDE
                    break
                i = ni
                j = nj
            if st == OUTSIDE:
                s = min(max(s, 0.0), 1.0)
                t = min(max(t, 0.0), 1.0)
            ci[q] = i
            cj[q] = j
            s_prev[q] = min(max(s, 0.0), 1.0)
            t_prev[q] = min(max(t, 0.0), 1.0)
            xi[k, q] = i + s
            eta[k, q] = j + t
            status[k, q] = st
    return xi, eta, status


@njit(cache=True, nogil=True, error_model="numpy")
def gather_index_2d(vals, xi, eta, degree):
    """Interpolate node fields ``vals`` (K, ny, nx) at fractional index
    coordinates (K, Q)."""
    nk, ny, nx = vals.shape
    nq = xi.shape[1]
    npx = min(degree + 1, nx)
    npy = min(degree + 1, ny)
    wx = np.empty(npx)
    wy = np.empty(npy)
    out = np.empty((nk, nq))
    if degree == 1:
        for k in range(nk):
            for q in range(nq):
                i = min(max(int(xi[k, q]), 0), nx - 2)
                j = min(max(int(eta[k, q]), 0), ny - 2)
                s = xi[k, q] - i
                t = eta[k, q] - j
                out[k, q] = ((1 - t) * ((1 - s) * vals[k, j, i] + s * vals[k, j, i + 1])
                             + t * ((1 - s) * vals[k, j + 1, i] + s * vals[k, j + 1, i + 1]))
        return out
    for k in range(nk):
        for q in range(nq):
            bx = _index_weights(xi[k, q], nx, npx, wx)
            by = _index_weights(eta[k, q], ny, npy, wy)
            acc = 0.0
            for jy in range(npy):
                row = 0.0
                for jx in range(npx):
                    row += wx[jx] * vals[k, by + jy, bx + jx]
                acc += wy[jy] * row
            out[k, q] = acc
    return out
