"""Registration objective and training loop.

The objective for a moving grid is::

    ||M - G^-1(UV)|| + ||Gamma1 U_x|| + ||V_x Gamma2^T|| + penalty

with ``UV`` the rank-``k_r`` truncation of ``G(M)`` and every norm the
(unsquared) Frobenius norm. The penalty is ``rho * sum(max(0, v_min - v)^2)``
over all cell volumes; grids with a non-positive cell cannot be
interpolated and evaluate as a numerical failure.
"""
from __future__ import annotations

import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq

from .errors import Infeasible, InvalidArgument, NumericalFailure, RgrError
from .grid import (MovingGrid, ReferenceGrid, VolumeReport, init_from_reference,
                   validate_diffeomorphism, volumes)
from .lowrank import LowRankFactors, as_snapshots, reconstruct, truncated_svd
from .mapping import InterpConfig, map_forward, map_inverse, second_difference

log = logging.getLogger(__name__)


@dataclass(eq=False)
class RegistrationProblem:
    """Everything needed to learn a low-rank grid for one snapshot matrix.

    ``control_shape`` (control nodes per spatial axis) and ``control_steps``
    default to the full grid, i.e. no down-sampling. ``penalty_weight``
    defaults to ``||M||_F / v_min**2``.
    """

    snapshots: np.ndarray
    reference: ReferenceGrid
    grid_rank: int
    latent_rank: int
    gamma1: float = 0.0
    gamma2: float = 0.0
    v_min: float = 0.0
    boundary_pinned: bool = True
    control_shape: tuple | None = None
    control_steps: int | None = None
    interp: InterpConfig = field(default_factory=InterpConfig)
    upsample_degree: int = 3
    max_iters: int = 100
    perturb_scale: float = 1e-3
    seed: int = 0
    penalty_weight: float | None = None
    squared: bool = False
    fd_step: float | None = None
    tol: float = 1e-6
    patience: int = 5
    threads: int = 1

    def __post_init__(self):
        self.snapshots = as_snapshots(self.snapshots, "snapshots")
        n, k = self.snapshots.shape
        if n != self.reference.size:
            raise InvalidArgument(
                f"snapshots have {n} rows but the reference grid has {self.reference.size} nodes"
            )
        if self.control_shape is None:
            self.control_shape = self.reference.shape
        self.control_shape = tuple(int(c) for c in self.control_shape)
        if len(self.control_shape) != self.reference.dim:
            raise InvalidArgument("control_shape needs one entry per spatial axis")
        if self.control_steps is None:
            self.control_steps = k
        nc = int(np.prod(self.control_shape))
        if not 1 <= self.latent_rank <= min(n, k):
            raise InvalidArgument(f"latent rank {self.latent_rank} out of range [1, {min(n, k)}]")
        if not 1 <= self.grid_rank <= min(nc, self.control_steps):
            raise InvalidArgument(
                f"grid rank {self.grid_rank} out of range [1, {min(nc, self.control_steps)}]"
            )
        if self.v_min < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise InvalidArgument("v_min, gamma1 and gamma2 must be non-negative")
        if min(self.control_shape) < 3 or self.control_steps < 3:
            raise InvalidArgument("need at least 3 control nodes per axis and 3 control steps")
        if self.max_iters < 0:
            raise InvalidArgument("max_iters must be non-negative")

    @property
    def n_steps(self) -> int:
        return self.snapshots.shape[1]

    @property
    def rho0(self) -> float:
        if self.penalty_weight is not None:
            return float(self.penalty_weight)
        if self.v_min == 0:
            return 0.0
        return float(np.linalg.norm(self.snapshots)) / self.v_min ** 2

    @property
    def h(self) -> float:
        if self.fd_step is not None:
            return float(self.fd_step)
        return 1e-6 * float(self.reference.extent.max())

    def initial_grid(self) -> MovingGrid:
        return init_from_reference(
            self.reference, self.grid_rank, self.n_steps,
            perturb_scale=self.perturb_scale, seed=self.seed,
            control_shape=self.control_shape, control_steps=self.control_steps,
            upsample_degree=self.upsample_degree, pinned=self.boundary_pinned,
        )


class ObjectiveParts(NamedTuple):
    data: float
    reg1: float
    reg2: float
    penalty: float
    min_volume: float


def _space_smoothness(p: RegistrationProblem, u: np.ndarray) -> np.ndarray:
    """Second differences of control-node fields along every spatial axis."""
    shape = p.control_shape
    if len(shape) == 1:
        return second_difference(shape[0], p.gamma1).matrix @ u
    nx, ny = shape
    f = u.reshape(ny, nx, -1)
    dx = second_difference(nx, p.gamma1).apply(f, axis=1)
    dy = second_difference(ny, p.gamma1).apply(f, axis=0)
    return np.concatenate([dx.ravel(), dy.ravel()])


def regularization(p: RegistrationProblem, g: MovingGrid) -> tuple[float, float]:
    """``(||Gamma1 U_x||_F, ||V_x Gamma2^T||_F)`` over all coordinate axes."""
    g2 = second_difference(g.n_control_steps, p.gamma2).matrix
    r1 = math.sqrt(sum(float(np.sum(_space_smoothness(p, u) ** 2)) for u in g.basis))
    r2 = math.sqrt(sum(float(np.sum((v @ g2.T) ** 2)) for v in g.coeffs))
    return r1, r2


def autoencode(m, g: MovingGrid, k: int, cfg: InterpConfig = InterpConfig(), positions=None,
               validate: bool = True):
    """Encode/decode snapshots through a moving grid.

    Returns ``(mapped, factors, decoded)``: ``G(M)``, its rank-``k``
    factors, and ``G^-1(UV)`` on the reference grid.
    """
    pos = g.positions() if positions is None else positions
    mapped = map_forward(m, g, cfg, validate=validate, positions=pos)
    f = truncated_svd(mapped, k)
    decoded = map_inverse(reconstruct(f), g, cfg, validate=False, positions=pos)
    return mapped, f, decoded


def evaluate_objective(p: RegistrationProblem, g: MovingGrid, rho: float | None = None):
    """Total objective and its parts for grid ``g``.

    Raises
    ------
    NumericalFailure
        If a cell volume is non-positive (the maps are undefined there) or
        the result is not finite; ``step`` names the first offending step.
    """
    rho = p.rho0 if rho is None else rho
    pos = g.positions()
    vol = volumes(pos, g.reference.shape)
    step_min = vol.min(axis=0)
    if step_min.min() <= 0:
        step = int(np.argmax(step_min <= 0))
        raise NumericalFailure(f"non-positive cell volume at step {step}", step=step)
    _, _, decoded = autoencode(p.snapshots, g, p.latent_rank, p.interp,
                               positions=pos, validate=False)
    data = float(np.linalg.norm(p.snapshots - decoded))
    reg1, reg2 = regularization(p, g)
    penalty = 0.0
    if rho > 0 and p.v_min > 0:
        penalty = rho * float(np.sum(np.clip(p.v_min - vol, 0.0, None) ** 2))
    if p.squared:
        total = data ** 2 + reg1 ** 2 + reg2 ** 2 + penalty
    else:
        total = data + reg1 + reg2 + penalty
    if not math.isfinite(total):
        raise NumericalFailure("objective is not finite")
    return total, ObjectiveParts(data, reg1, reg2, penalty, float(step_min.min()))


def _resolve_threads(n: int) -> int:
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def gradient_fd(p: RegistrationProblem, g: MovingGrid, h: float | None = None,
                scheme: str = "central", rho: float | None = None,
                threads: int | None = None) -> np.ndarray:
    """Finite-difference gradient of the total objective with respect to
    every free factor entry (ordering of :meth:`MovingGrid.parameters`).

    ``scheme`` is ``"central"`` or ``"forward"``.
    """
    h = p.h if h is None else h
    if h <= 0:
        raise InvalidArgument("finite-difference step must be positive")
    if scheme not in ("central", "forward"):
        raise InvalidArgument(f"unknown scheme {scheme!r}")
    theta = g.parameters()
    n = theta.size

    def probe(args):
        i, sign = args
        t = theta.copy()
        t[i] += sign * h
        try:
            return evaluate_objective(p, g.with_parameters(t), rho)[0]
        except RgrError as exc:
            raise NumericalFailure(f"objective failed when probing parameter {i}: {exc}",
                                   parameter=i) from exc

    if scheme == "central":
        jobs = [(i, s) for i in range(n) for s in (1.0, -1.0)]
    else:
        jobs = [(i, 1.0) for i in range(n)]
    nthreads = _resolve_threads(p.threads if threads is None else threads)
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            vals = np.array(list(pool.map(probe, jobs)))
    else:
        vals = np.array([probe(j) for j in jobs])
    if scheme == "central":
        vals = vals.reshape(n, 2)
        return (vals[:, 0] - vals[:, 1]) / (2 * h)
    f0 = evaluate_objective(p, g, rho)[0]
    return (vals - f0) / h


@dataclass(eq=False)
class RegistrationResult:
    grid: MovingGrid
    latent: LowRankFactors
    objective_trace: np.ndarray
    data_error: float
    data_error_rel: float
    volume_report: VolumeReport
    iterations: int
    converged: bool
    parts: ObjectiveParts
    records: list = field(default_factory=list)


def _two_loop(grad, pairs):
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


class _NormTerm:
    """A regularizer ``||A theta + c||`` restricted to the parameters it
    touches. The norm is non-differentiable where ``A theta + c = 0``; the
    optimizer treats that set explicitly."""

    def __init__(self, a: np.ndarray, c: np.ndarray):
        self.cols = np.flatnonzero(np.any(a != 0, axis=0))
        self.a = a[:, self.cols]
        self.c = c
        w, sig, qt = np.linalg.svd(self.a, full_matrices=False)
        keep = sig > 1e-12 * sig[0] if sig.size and sig[0] > 0 else np.zeros(sig.size, bool)
        self.w, self.sig, self.q = w[:, keep], sig[keep], qt[keep].T
        self.scale = float(self.sig[0]) if self.sig.size else 0.0

    def residual(self, x):
        return self.a @ x[self.cols] + self.c

    def at_kink(self, x) -> bool:
        r = np.linalg.norm(self.residual(x))
        return r <= 1e-10 * self.scale * max(1.0, float(np.linalg.norm(x[self.cols])))

    def null_project(self, v):
        return v - self.q @ (self.q.T @ v)

    def snap(self, x):
        """Nearest point (in the touched parameters) where the term vanishes."""
        r = self.residual(x)
        y = x.copy()
        y[self.cols] -= self.q @ ((self.w.T @ r) / self.sig)
        return y

    def min_norm_subgradient(self, g):
        """Smallest element of ``g + A^T z`` over ``||z|| <= 1``.

        Returns the block and whether the kink holds (interior solution).
        """
        gb = g[self.cols]
        b = self.q.T @ gb
        # unconstrained minimizer cancels the range component exactly
        if np.linalg.norm(b / self.sig) <= 1.0:
            return self.null_project(gb), True

        def znorm(mu):
            return np.linalg.norm(self.sig * b / (self.sig ** 2 + mu)) - 1.0

        hi = max(1.0, float(np.max(self.sig * np.abs(b))))
        while znorm(hi) > 0:
            hi *= 2.0
        mu = brentq(znorm, 0.0, hi, xtol=1e-14 * hi)
        return gb - self.q @ (self.sig ** 2 / (self.sig ** 2 + mu) * b), False


def _norm_terms(p: RegistrationProblem, g0: MovingGrid) -> list:
    """Affine maps of both regularizers over the parameter vector."""
    if p.squared:
        return []
    theta = g0.parameters()
    g2 = second_difference(g0.n_control_steps, p.gamma2).matrix

    def vec1(t):
        g = g0.with_parameters(t)
        return np.concatenate([_space_smoothness(p, u).ravel() for u in g.basis])

    def vec2(t):
        g = g0.with_parameters(t)
        return np.concatenate([(v @ g2.T).ravel() for v in g.coeffs])

    terms = []
    for gamma, vec in ((p.gamma1, vec1), (p.gamma2, vec2)):
        if gamma <= 0:
            continue
        zero = np.zeros_like(theta)
        c = vec(zero)
        a = np.empty((c.size, theta.size))
        for i in range(theta.size):
            zero[i] = 1.0
            a[:, i] = vec(zero) - c
            zero[i] = 0.0
        terms.append(_NormTerm(a, c))
    return terms


def _lbfgs(fun, grad, x0, f0, max_iters, first_step, tol, patience, on_accept, terms=(),
           memory=10, c1=1e-4, shrink=0.5, max_backtracks=40):
    """Minimize ``fun`` by L-BFGS with Armijo backtracking.

    ``fun`` returns ``inf`` where the objective is undefined and only steps
    that decrease it are accepted. For each norm term sitting at its kink
    the search uses the minimum-norm subgradient and moves within the
    term's null space while that subgradient keeps it there; after each
    step, projecting a term onto its zero set is tried and kept when it
    lowers the objective. Returns ``(x, f, iterations, converged)``.
    """

    def try_snaps(x, fx):
        for t in terms:
            if not t.at_kink(x):
                y = t.snap(x)
                fy = fun(y)
                if fy < fx:
                    x, fx = y, fy
        return x, fx

    def pseudo(x, g):
        pg = g.copy()
        held = []
        for t in terms:
            if t.at_kink(x):
                pg[t.cols], keep = t.min_norm_subgradient(g)
                if keep:
                    held.append(t)
        return pg, held

    x, fx = try_snaps(x0, f0)
    if fx < f0:
        on_accept(0, x, fx)
    gx = grad(x)
    pairs = deque(maxlen=memory)
    stalled = 0
    it = 0
    while it < max_iters:
        pg, held = pseudo(x, gx)
        if not np.all(np.isfinite(pg)) or not np.any(pg):
            return x, fx, it, True
        d = _two_loop(pg, pairs) if pairs else -pg
        for t in held:
            d[t.cols] = t.null_project(d[t.cols])
        if pg @ d >= 0:
            pairs.clear()
            d = -pg
        alpha = 1.0 if pairs else first_step / np.max(np.abs(d))
        slope = pg @ d
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + alpha * d
            f_new = fun(x_new)
            if f_new <= fx + c1 * alpha * slope and f_new < fx:
                x_new, f_new = try_snaps(x_new, f_new)
                try:
                    g_new = grad(x_new)
                except NumericalFailure:
                    # a probe left the valid set; treat the step as too long
                    alpha *= shrink
                    continue
                accepted = True
                break
            alpha *= shrink
        if not accepted:
            if pairs:
                pairs.clear()
                continue
            # no descent along the steepest pseudo-descent direction either
            return x, fx, it, True
        it += 1
        s, y = x_new - x, g_new - gx
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        rel = (fx - f_new) / max(abs(fx), 1e-300)
        x, fx, gx = x_new, f_new, g_new
        on_accept(it, x, fx)
        stalled = stalled + 1 if rel < tol else 0
        if stalled >= patience:
            return x, fx, it, True
    return x, fx, it, False


def train(p: RegistrationProblem, callback: Callable | None = None) -> RegistrationResult:
    """Learn the low-rank grid by penalized L-BFGS on finite-difference
    gradients.

    The first penalty phase runs for up to ``max_iters`` iterations. While
    its end point violates the volume bound the penalty weight is raised
    tenfold (at most five times), each further phase getting
    ``max(5, max_iters // 5)`` iterations. The returned grid is the feasible
    iterate with the lowest objective over all phases; ``objective_trace``
    holds the objective along its phase up to that iterate and is
    non-increasing. ``records`` keeps one dict per accepted iterate across
    all phases.

    Raises
    ------
    Infeasible
        If no iterate satisfies the volume bound.
    """
    g0 = p.initial_grid()
    theta = g0.parameters()
    rho = p.rho0
    records: list[dict] = []
    h = p.h
    first_step = 0.25 * g0.reference.min_spacing()
    iters_used = 0
    converged = False
    extra_budget = max(5, p.max_iters // 5)
    # best feasible iterate: (objective, parameters, trace up to it, converged)
    best = None

    terms = _norm_terms(p, g0)

    def fun(t):
        try:
            return evaluate_objective(p, g0.with_parameters(t), rho)[0]
        except RgrError:
            return math.inf

    def grad(t):
        return gradient_fd(p, g0.with_parameters(t), h=h, rho=rho)

    def feasible(parts: ObjectiveParts) -> bool:
        return parts.min_volume >= p.v_min and parts.min_volume > 0

    for phase in range(6):
        try:
            f_start, parts = evaluate_objective(p, g0.with_parameters(theta), rho)
        except NumericalFailure as exc:
            raise Infeasible(f"initial grid is not a valid grid: {exc}") from exc
        trace = [f_start]
        if feasible(parts) and (best is None or f_start < best[0]):
            best = (f_start, theta.copy(), list(trace), False)

        def on_accept(it, t, ft, phase=phase, trace=trace):
            nonlocal best
            _, pt = evaluate_objective(p, g0.with_parameters(t), rho)
            trace.append(ft)
            rec = {"iteration": iters_used + it, "phase": phase, "rho": rho, "total": ft,
                   **pt._asdict()}
            records.append(rec)
            if feasible(pt) and (best is None or ft < best[0]):
                best = (ft, t.copy(), list(trace), False)
            log.debug("iter %d total %.6e data %.6e", rec["iteration"], ft, pt.data)
            if callback is not None:
                callback(rec)

        if not records:
            records.append({"iteration": 0, "phase": phase, "rho": rho, "total": f_start,
                            **parts._asdict()})
        budget = p.max_iters if phase == 0 else extra_budget
        theta, f_end, n_it, converged = _lbfgs(
            fun, grad, theta, f_start, budget, first_step, p.tol, p.patience, on_accept, terms,
        )
        iters_used += n_it
        _, parts = evaluate_objective(p, g0.with_parameters(theta), rho)
        if feasible(parts):
            best = (*best[:3], converged and best[0] == f_end)
            break
        if rho == 0:
            rho = float(np.linalg.norm(p.snapshots)) / max(p.v_min, 1e-300) ** 2
        else:
            rho *= 10.0
        log.info("volume bound violated (min %.3e); penalty weight -> %.3e",
                 parts.min_volume, rho)
    if best is None:
        raise Infeasible(f"no feasible grid found; min cell volume {parts.min_volume:.3e} "
                         f"< v_min {p.v_min:.3e}")

    _, theta, trace, converged = best
    g = g0.with_parameters(theta)
    # feasible iterates carry no penalty, so the weight does not matter here
    total, parts = evaluate_objective(p, g, rho)
    _, factors, decoded = autoencode(p.snapshots, g, p.latent_rank, p.interp)
    err = float(np.linalg.norm(p.snapshots - decoded))
    norm = float(np.linalg.norm(p.snapshots))
    return RegistrationResult(
        grid=g,
        latent=factors,
        objective_trace=np.asarray(trace),
        data_error=err,
        data_error_rel=err / norm if norm > 0 else 0.0,
        volume_report=validate_diffeomorphism(g, p.v_min),
        iterations=iters_used,
        converged=converged,
        parts=parts,
        records=records,
    )
