"""Forecasting beyond the training window.

The moving grid is extended by linear extrapolation of its step factor,
latent coordinates are advanced by a ridge-regularized vector
autoregressive model, and predicted fields are decoded through the
extended grid. A plain POD pipeline with the same latent model serves as
the baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import IllConditioned, InfeasibleExtension, InvalidArgument
from .grid import MovingGrid, validate_diffeomorphism
from .lowrank import as_snapshots, reconstruct, truncated_svd
from .mapping import InterpConfig, map_inverse


@dataclass(frozen=True, eq=False)
class LatentSeries:
    """Latent coordinates ``coords`` (k, K) at steps ``start_step + n``,
    uniformly spaced by ``dt`` in time."""

    coords: np.ndarray
    dt: float = 1.0
    start_step: int = 0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        if c.ndim != 2:
            raise InvalidArgument("coords must be a (k, K) matrix")
        if not self.dt > 0:
            raise InvalidArgument("dt must be positive")
        object.__setattr__(self, "coords", c)

    @property
    def rank(self) -> int:
        return self.coords.shape[0]

    def __len__(self) -> int:
        return self.coords.shape[1]

    @property
    def steps(self) -> np.ndarray:
        return self.start_step + np.arange(len(self))

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.dt


@dataclass(frozen=True, eq=False)
class ArModel:
    """``z_n = sum_i A[i-1] @ z_{n-i} + bias``; ``residual`` is the RMS fit
    residual per entry."""

    coefs: np.ndarray
    bias: np.ndarray
    residual: float
    ridge: float = 0.0

    @property
    def order(self) -> int:
        return self.coefs.shape[0]

    def step(self, history: np.ndarray) -> np.ndarray:
        """One-step prediction from the most recent ``order`` columns."""
        z = self.bias.copy()
        for i in range(self.order):
            z += self.coefs[i] @ history[:, -1 - i]
        return z


def extend_grid(g: MovingGrid, extra_steps: int, v_min: float = 0.0) -> MovingGrid:
    """Append ``extra_steps`` fine steps by extrapolating every step-factor
    row linearly from its last two control columns.

    Raises
    ------
    InfeasibleExtension
        If a cell of the extended grid falls below ``v_min`` (or is
        non-positive); ``step`` is the first violating fine step.
    """
    if extra_steps < 0:
        raise InvalidArgument("extra_steps must be non-negative")
    if g.n_control_steps < 2:
        raise InvalidArgument("need at least two control steps to extrapolate")
    if extra_steps == 0:
        return g
    add = math.ceil(extra_steps / g.step_spacing - 1e-9)
    j = np.arange(1, add + 1)
    coeffs = []
    for v in g.coeffs:
        slope = v[:, -1] - v[:, -2]
        coeffs.append(np.hstack([v, v[:, -1:] + slope[:, None] * j[None, :]]))
    ext = replace(g, coeffs=tuple(coeffs), n_steps=g.n_steps + extra_steps)
    rep = validate_diffeomorphism(ext, v_min)
    if not rep.passed:
        step = int(rep.violations[0, 0])
        raise InfeasibleExtension(
            f"extended grid violates the volume bound at step {step} "
            f"(min volume {rep.step_min[step]:.3e})", step=step)
    return ext


def fit_ar(series: LatentSeries, order: int = 2, ridge: float = 1e-8) -> ArModel:
    """Least-squares vector AR fit with ridge penalty on the lag matrices
    (the bias is not penalized)."""
    z = series.coords
    k, n = z.shape
    if order < 1:
        raise InvalidArgument("order must be >= 1")
    if ridge < 0:
        raise InvalidArgument("ridge must be non-negative")
    if n <= order + k:
        raise InvalidArgument(f"series of length {n} too short for order {order} with rank {k}")
    rows = n - order
    x = np.empty((rows, order * k + 1))
    for i in range(order):
        x[:, i * k:(i + 1) * k] = z[:, order - 1 - i:n - 1 - i].T
    x[:, -1] = 1.0
    y = z[:, order:].T
    if ridge > 0:
        pen = np.zeros((order * k, order * k + 1))
        pen[:, :-1] = math.sqrt(ridge) * np.eye(order * k)
        xa = np.vstack([x, pen])
        ya = np.vstack([y, np.zeros((order * k, k))])
    else:
        if np.linalg.matrix_rank(x) < x.shape[1]:
            raise IllConditioned("AR normal equations are rank deficient; use ridge > 0")
        xa, ya = x, y
    beta, *_ = np.linalg.lstsq(xa, ya, rcond=None)
    coefs = np.stack([beta[i * k:(i + 1) * k].T for i in range(order)])
    res = y - x @ beta
    return ArModel(coefs=coefs, bias=beta[-1].copy(),
                   residual=float(np.sqrt(np.mean(res ** 2))), ridge=float(ridge))


def predict(model: ArModel, series: LatentSeries, horizon: int) -> LatentSeries:
    """Closed-loop rollout for ``horizon`` steps after the end of ``series``."""
    if len(series) < model.order:
        raise InvalidArgument("series shorter than the model order")
    if horizon < 0:
        raise InvalidArgument("horizon must be non-negative")
    hist = series.coords[:, -model.order:].copy()
    out = np.empty((series.rank, horizon))
    for h in range(horizon):
        z = model.step(hist)
        out[:, h] = z
        hist = np.hstack([hist[:, 1:], z[:, None]])
    return LatentSeries(out, series.dt, series.start_step + len(series))


def reconstruct_prediction(g_ext: MovingGrid, u: np.ndarray, pred: LatentSeries,
                           cfg: InterpConfig = InterpConfig()) -> np.ndarray:
    """Decode latent coordinates through the (extended) moving grid."""
    steps = pred.steps
    if len(pred) == 0:
        return np.zeros((g_ext.reference.size, 0))
    if steps[-1] >= g_ext.n_steps:
        raise InvalidArgument(f"grid covers {g_ext.n_steps} steps, prediction needs {steps[-1] + 1}")
    return map_inverse(np.asarray(u) @ pred.coords, g_ext, cfg, steps=steps)


@dataclass(eq=False)
class ForecastReport:
    """Train/test errors of one forecasting pipeline.

    MSE is the mean of squared entry-wise differences.
    """

    split: int
    train_mse: float
    test_mse: float
    per_step_mse: np.ndarray
    prediction: np.ndarray
    train_reconstruction: np.ndarray
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "split": self.split,
            "train_mse": self.train_mse,
            "test_mse": self.test_mse,
            "per_step_mse": [float(e) for e in self.per_step_mse],
            "mse_definition": "mean over all entries",
        }


def split_index(n_steps: int, fraction: float) -> int:
    if not 0 < fraction < 1:
        raise InvalidArgument("split fraction must be in (0, 1)")
    k = int(math.floor(fraction * n_steps + 1e-9))
    if k < 3 or k >= n_steps:
        raise InvalidArgument(f"split {fraction} of {n_steps} steps leaves an empty window")
    return k


def _report(m, k, recon, pred) -> ForecastReport:
    test = m[:, k:]
    per_step = np.mean((test - pred) ** 2, axis=0)
    return ForecastReport(
        split=k,
        train_mse=float(np.mean((m[:, :k] - recon) ** 2)),
        test_mse=float(np.mean((test - pred) ** 2)) if test.size else 0.0,
        per_step_mse=per_step,
        prediction=pred,
        train_reconstruction=recon,
    )


def pod_forecast(m, k_r: int, split: float = 0.6, order: int = 2, ridge: float = 1e-8,
                 dt: float = 1.0) -> ForecastReport:
    """Baseline: POD latents of the training window, AR rollout, linear decode."""
    m = as_snapshots(m)
    k = split_index(m.shape[1], split)
    f = truncated_svd(m[:, :k], k_r)
    series = LatentSeries(f.right, dt)
    model = fit_ar(series, order, ridge)
    pred = predict(model, series, m.shape[1] - k)
    rep = _report(m, k, reconstruct(f), f.left @ pred.coords)
    rep.extra["ar_residual"] = model.residual
    return rep


def physics_aware_forecast(problem_for, m, split: float = 0.6, order: int = 2,
                           ridge: float = 1e-8, dt: float = 1.0):
    """Train a moving grid on the first window, extend it, roll the latent
    AR model forward and decode.

    ``problem_for`` maps the training snapshots to a
    :class:`~rgr.registration.RegistrationProblem`. Returns
    ``(report, registration_result, extended_grid)``.
    """
    from .registration import train

    m = as_snapshots(m)
    k = split_index(m.shape[1], split)
    p = problem_for(m[:, :k])
    res = train(p)
    series = LatentSeries(res.latent.right, dt)
    model = fit_ar(series, order, ridge)
    horizon = m.shape[1] - k
    pred = predict(model, series, horizon)
    g_ext = extend_grid(res.grid, horizon, p.v_min)
    fields = reconstruct_prediction(g_ext, res.latent.left, pred, p.interp)
    recon = reconstruct_prediction(res.grid, res.latent.left, series, p.interp)
    rep = _report(m, k, recon, fields)
    rep.extra["ar_residual"] = model.residual
    return rep, res, g_ext
