"""Command-line experiment harness.

Usage::

    rgr run --config configs/burgers.json --out out/burgers
    rgr export-csv out/burgers/snapshots.rgr

Exit codes: 0 success, 2 invalid configuration, 3 infeasible training,
4 numerical failure (including unreadable matrix files).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, forecast
from .errors import Infeasible, InvalidData, NumericalFailure, RgrError
from .grid import MovingGrid, ReferenceGrid, validate_diffeomorphism
from .io import format_csv, read_matrix, write_matrix, write_table
from .lowrank import LowRankFactors, energy_fraction, pod_error, singular_values
from .mapping import InterpConfig, map_forward
from .registration import RegistrationProblem, autoencode, train

log = logging.getLogger("rgr")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(Exception):
    """Invalid experiment configuration; ``line`` points into the file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)


# ------------------------------------------------------------------ config

_GENERATORS = {
    "rotated_glyph": {"size": (int, 50), "total_degrees": (float, 90.0),
                      "increment": (float, 3.0), "glyph": (str, "A")},
    "burgers": {"bounds": (list, [0.0, 2.5]), "final_time": (float, 1.0), "dx": (float, None),
                "dt": (float, None), "reynolds": (float, 1000.0), "stride": (int, 1),
                "ic": (str, "default"), "ic_params": (dict, {})},
    "wave": {"bounds": (list, [0.0, 1.0]), "final_time": (float, 1.0), "dx": (float, None),
             "dt": (float, None), "stride": (int, 1), "ic": (str, "default"),
             "ic_params": (dict, {})},
    "advecting_gaussian": {"bounds": (list, [0.0, 2.5]), "final_time": (float, 2.0),
                           "dx": (float, None), "dt": (float, None), "stride": (int, 1),
                           "speed": (float, None), "ic_params": (dict, {})},
    "file": {"path": (str, None), "bounds": (list, None), "counts": (list, None)},
}

_REGISTRATION = {
    "grid_rank": (int, None), "latent_rank": (int, None), "gamma1": (float, 0.0),
    "gamma2": (float, 0.0), "v_min": (float, 0.0), "boundary_pinned": (bool, True),
    "control_shape": (list, None), "control_steps": (int, None), "interp_degree": (int, 1),
    "upsample_degree": (int, 3), "max_iters": (int, 100), "perturb_scale": (float, 1e-3),
    "penalty_weight": (float, None), "squared": (bool, False), "fd_step": (float, None),
    "seed": (int, 0),
}

_FORECAST = {"split": (float, 0.6), "order": (int, 2), "ridge": (float, 1e-8)}

_TOP = {"name", "dataset", "registration", "forecast", "output"}


def _line_of(text: str, key: str, after: int = 0) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text[after:])
    if m is None:
        return None
    return text.count("\n", 0, after + m.start()) + 1


def _block(raw: dict, spec: dict, block: str, text: str, path) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{block}: expected an object", _line_of(text, block), path)
    start = text.find(f'"{block}"')
    anchor = max(start, 0)
    out = {}
    unknown = set(raw) - set(spec) - {"generator"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{block}: unknown field '{key}'", _line_of(text, key, anchor), path)
    for key, (typ, default) in spec.items():
        if key not in raw or raw[key] is None:
            if default is None and key not in ("penalty_weight", "control_shape",
                                               "control_steps", "fd_step"):
                raise ConfigError(f"{block}: missing required field '{key}'",
                                  _line_of(text, block), path)
            out[key] = default
            continue
        val = raw[key]
        ok = isinstance(val, typ) and not (typ is not bool and isinstance(val, bool))
        if typ is float and isinstance(val, int) and not isinstance(val, bool):
            val, ok = float(val), True
        if not ok:
            raise ConfigError(f"{block}: field '{key}' must be of type {typ.__name__}",
                              _line_of(text, key, anchor), path)
        out[key] = val
    return out


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    registration: dict
    forecast: dict | None = None
    output: str | None = None
    source: str = ""
    path: str | None = None
    extra: dict = field(default_factory=dict)


def load_config(path) -> ExperimentConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, path) from exc
    return parse_config(raw, text, path)


def parse_config(raw, text: str = "", path=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1, path)
    unknown = set(raw) - _TOP
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown top-level field '{key}'", _line_of(text, key), path)
    for key in ("dataset", "registration"):
        if key not in raw:
            raise ConfigError(f"missing required block '{key}'", 1, path)
    ds = raw["dataset"]
    gen = ds.get("generator") if isinstance(ds, dict) else None
    if gen not in _GENERATORS:
        raise ConfigError(f"dataset: 'generator' must be one of {sorted(_GENERATORS)}",
                          _line_of(text, "generator") or _line_of(text, "dataset"), path)
    dataset = _block(ds, _GENERATORS[gen], "dataset", text, path)
    dataset["generator"] = gen
    reg = _block(raw["registration"], _REGISTRATION, "registration", text, path)
    fc = None
    if raw.get("forecast") is not None:
        fc = _block(raw["forecast"], _FORECAST, "forecast", text, path)
    name = raw.get("name", Path(path).stem if path else "experiment")
    cfg = ExperimentConfig(name=str(name), dataset=dataset, registration=reg, forecast=fc,
                           output=raw.get("output"), source=text, path=path)
    # surface module-level precondition failures as config errors
    try:
        if gen in ("burgers", "wave", "advecting_gaussian"):
            _pde_config(dataset)
    except RgrError as exc:
        raise ConfigError(f"dataset: {exc}", _line_of(text, "dataset"), path) from exc
    return cfg


def _pde_config(d: dict) -> datagen.PdeRunConfig:
    b = d["bounds"]
    if len(b) != 2:
        raise ConfigError("dataset: 'bounds' must be [x_a, x_b]")
    return datagen.PdeRunConfig(
        bounds=(float(b[0]), float(b[1])), final_time=d["final_time"], dx=d["dx"], dt=d["dt"],
        ic=d.get("ic", "default"), ic_params=dict(d.get("ic_params") or {}),
        reynolds=d.get("reynolds", 1000.0), stride=d.get("stride", 1),
    )


# ------------------------------------------------------------------ pipeline

def build_dataset(cfg: ExperimentConfig):
    """Return ``(M, reference, dt, extra)`` for the configured generator."""
    d = cfg.dataset
    gen = d["generator"]
    if gen == "rotated_glyph":
        m, ref = datagen.rotated_glyph(d["size"], d["total_degrees"], d["increment"], d["glyph"])
        return m, ref, d["increment"], {}
    if gen == "file":
        m = read_matrix(d["path"])
        ref = ReferenceGrid.uniform([tuple(b) for b in d["bounds"]], d["counts"])
        return m, ref, 1.0, {}
    pde = _pde_config(d)
    dt = pde.dt * pde.stride
    if gen == "burgers":
        m, ref = datagen.burgers_solve(pde)
        return m, ref, dt, {}
    if gen == "wave":
        m, ref = datagen.wave_solve(pde)
        return m, ref, dt, {}
    m, ref, gt = datagen.advecting_gaussian(d["speed"], pde)
    return m, ref, dt, {"ground_truth": gt}


def make_problem(cfg: ExperimentConfig, m, ref, threads: int = 1,
                 control_steps: int | None = None) -> RegistrationProblem:
    r = cfg.registration
    try:
        return RegistrationProblem(
            snapshots=m, reference=ref, grid_rank=r["grid_rank"], latent_rank=r["latent_rank"],
            gamma1=r["gamma1"], gamma2=r["gamma2"], v_min=r["v_min"],
            boundary_pinned=r["boundary_pinned"],
            control_shape=tuple(r["control_shape"]) if r["control_shape"] else None,
            control_steps=control_steps or r["control_steps"],
            interp=InterpConfig(degree=r["interp_degree"]),
            upsample_degree=r["upsample_degree"], max_iters=r["max_iters"],
            perturb_scale=r["perturb_scale"], seed=r["seed"],
            penalty_weight=r["penalty_weight"], squared=r["squared"], fd_step=r["fd_step"],
            threads=threads,
        )
    except RgrError as exc:
        raise ConfigError(f"registration: {exc}", _line_of(cfg.source, "registration"),
                          cfg.path) from exc


def _scaled_control_steps(r: dict, k_total: int, k_train: int):
    # keep the control-step spacing when training on a window
    kc = r["control_steps"]
    if kc is None:
        return None
    if kc >= k_total:
        return k_train
    spacing = (k_total - 1) / (kc - 1)
    return max(3, int(np.ceil((k_train - 1) / spacing)) + 1)


def save_grid(out: Path, g: MovingGrid) -> None:
    meta = {
        "axes": [a.tolist() for a in g.reference.axes],
        "control_shape": list(g.control_shape),
        "n_steps": g.n_steps,
        "step_spacing": g.step_spacing,
        "upsample_degree": g.upsample_degree,
        "pinned": g.pinned,
        "rank": g.rank,
    }
    (out / "grid.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for a, (u, v) in enumerate(zip(g.basis, g.coeffs)):
        write_matrix(out / f"grid_basis_{a}.rgr", u)
        write_matrix(out / f"grid_coeffs_{a}.rgr", v)


def load_grid(out: Path) -> MovingGrid:
    meta = json.loads((out / "grid.json").read_text())
    ref = ReferenceGrid(tuple(np.array(a) for a in meta["axes"]))
    basis = tuple(read_matrix(out / f"grid_basis_{a}.rgr") for a in range(ref.dim))
    coeffs = tuple(read_matrix(out / f"grid_coeffs_{a}.rgr") for a in range(ref.dim))
    return MovingGrid(ref, basis, coeffs, tuple(meta["control_shape"]), meta["n_steps"],
                      meta["step_spacing"], meta["upsample_degree"], meta["pinned"])


def _control_trajectories(g: MovingGrid):
    from .grid import _step_upsample
    st = _step_upsample(g.n_steps, g.n_control_steps, g.step_spacing)
    return [g.control_product(a) @ st.T for a in range(g.dim)]


def cmd_generate(cfg, out: Path, args) -> dict:
    m, ref, dt, extra = build_dataset(cfg)
    write_matrix(out / "snapshots.rgr", m)
    meta = {"axes": [a.tolist() for a in ref.axes], "dt": dt, "shape": list(m.shape)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if "ground_truth" in extra:
        gdir = out / "ground_truth"
        gdir.mkdir(exist_ok=True)
        save_grid(gdir, extra["ground_truth"])
    log.info("generated %s snapshot matrix %dx%d", cfg.dataset["generator"], *m.shape)
    return {"shape": list(m.shape)}


def _load_dataset(cfg, out: Path):
    if (out / "snapshots.rgr").exists() and (out / "dataset.json").exists():
        meta = json.loads((out / "dataset.json").read_text())
        ref = ReferenceGrid(tuple(np.array(a) for a in meta["axes"]))
        return read_matrix(out / "snapshots.rgr"), ref, meta["dt"]
    m, ref, dt, _ = build_dataset(cfg)
    return m, ref, dt


def cmd_train(cfg, out: Path, args) -> dict:
    m, ref, _ = _load_dataset(cfg, out)
    p = make_problem(cfg, m, ref, args.threads)
    res = train(p)
    save_grid(out, res.grid)
    write_matrix(out / "latent_left.rgr", res.latent.left)
    write_matrix(out / "latent_right.rgr", res.latent.right)
    write_matrix(out / "latent_sigma.rgr", res.latent.singular_values[None, :])
    keys = ["iteration", "phase", "rho", "total", "data", "reg1", "reg2", "penalty",
            "min_volume"]
    write_table(out / "trace.csv", keys, [[rec[k] for rec in res.records] for k in keys])
    summary = {
        "iterations": res.iterations,
        "converged": res.converged,
        "objective_initial": float(res.objective_trace[0]),
        "objective_final": float(res.objective_trace[-1]),
        "objective_parts": {k: float(v) for k, v in res.parts._asdict().items()},
    }
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("trained: %d iterations, data error %.4e (rel %.4e)", res.iterations,
             res.data_error, res.data_error_rel)
    return summary


def cmd_evaluate(cfg, out: Path, args) -> dict:
    m, ref, _ = _load_dataset(cfg, out)
    g = load_grid(out)
    r = cfg.registration
    k = r["latent_rank"]
    interp = InterpConfig(degree=r["interp_degree"])
    mapped, f, decoded = autoencode(m, g, k, interp)
    err = float(np.linalg.norm(m - decoded))
    norm = float(np.linalg.norm(m))
    pod_abs = pod_error(m, k)
    s_m = singular_values(m)
    s_g = singular_values(mapped)
    rep = validate_diffeomorphism(g, r["v_min"])
    metrics = {
        "experiment": cfg.name,
        "seed": r["seed"],
        "shape": list(m.shape),
        "grid_rank": g.rank,
        "latent_rank": k,
        "data_error_abs": err,
        "data_error_rel": err / norm if norm else 0.0,
        "pod_error_abs": pod_abs,
        "pod_error_rel": pod_abs / norm if norm else 0.0,
        "improvement_factor": pod_abs / err if err > 0 else None,
        "singular_values_snapshots": s_m.tolist(),
        "singular_values_mapped": s_g.tolist(),
        "energy_snapshots": energy_fraction(s_m, k),
        "energy_mapped": energy_fraction(s_g, k),
        "min_volume": rep.global_min,
        "v_min": r["v_min"],
        "feasible": bool(rep.passed),
    }
    if (out / "train.json").exists():
        metrics.update(json.loads((out / "train.json").read_text()))
    n = max(s_m.size, s_g.size)
    pad = lambda s: np.concatenate([s, np.full(n - s.size, np.nan)])  # noqa: E731
    write_table(out / "spectra.csv", ["index", "sigma_snapshots", "sigma_mapped"],
                [np.arange(1, n + 1), pad(s_m), pad(s_g)])
    traj = _control_trajectories(g)
    header = ["step", "node"] + [f"coord_{a}" for a in range(g.dim)]
    steps, nodes = np.meshgrid(np.arange(g.n_steps), np.arange(g.n_control), indexing="ij")
    write_table(out / "trajectories.csv", header,
                [steps.ravel(), nodes.ravel()] + [t.T.ravel() for t in traj])
    write_matrix(out / "reconstruction.rgr", decoded)
    return metrics


def cmd_forecast(cfg, out: Path, args) -> dict:
    fc = cfg.forecast or dict((k, v[1]) for k, v in _FORECAST.items())
    m, ref, dt = _load_dataset(cfg, out)
    r = cfg.registration
    k_train = forecast.split_index(m.shape[1], fc["split"])
    kc = _scaled_control_steps(r, m.shape[1], k_train)

    def problem_for(mt):
        return make_problem(cfg, mt, ref, args.threads, control_steps=kc)

    phys, res, g_ext = forecast.physics_aware_forecast(problem_for, m, fc["split"], fc["order"],
                                                       fc["ridge"], dt)
    pod = forecast.pod_forecast(m, r["latent_rank"], fc["split"], fc["order"], fc["ridge"], dt)
    write_matrix(out / "prediction.rgr", phys.prediction)
    write_matrix(out / "prediction_pod.rgr", pod.prediction)
    steps = np.arange(phys.split, m.shape[1])
    write_table(out / "forecast_error.csv", ["step", "mse_physics_aware", "mse_pod"],
                [steps, phys.per_step_mse, pod.per_step_mse])
    summary = {
        "split_step": phys.split,
        "order": fc["order"],
        "ridge": fc["ridge"],
        "latent_rank": r["latent_rank"],
        "physics_aware": phys.summary(),
        "pod": pod.summary(),
        "mse_definition": "mean of squared differences over all entries",
    }
    (out / "forecast.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_metrics(out: Path, metrics: dict, wall: float) -> None:
    metrics = dict(metrics)
    metrics["wall_time_s"] = wall
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ entry

def _threads(n: int | None) -> int:
    if n is None:
        env = os.environ.get("RGR_THREADS")
        n = int(env) if env and env.strip().lstrip("-").isdigit() else 1
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgr", description="Low-rank moving-grid registration experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "forecast", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--quiet", action="store_true")
    sp = sub.add_parser("export-csv")
    sp.add_argument("matrix_file")
    sp.add_argument("--quiet", action="store_true")
    return ap


def _run(args) -> int:
    if args.command == "export-csv":
        sys.stdout.write(format_csv(read_matrix(args.matrix_file)))
        return EXIT_OK
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg.registration["seed"] = args.seed
    args.threads = _threads(args.threads)
    out = Path(args.out or cfg.output or Path("out") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if args.command == "generate":
        cmd_generate(cfg, out, args)
    elif args.command == "train":
        cmd_train(cfg, out, args)
    elif args.command == "evaluate":
        _write_metrics(out, cmd_evaluate(cfg, out, args), time.perf_counter() - t0)
    elif args.command == "forecast":
        cmd_forecast(cfg, out, args)
    else:
        cmd_generate(cfg, out, args)
        cmd_train(cfg, out, args)
        metrics = cmd_evaluate(cfg, out, args)
        if cfg.forecast is not None:
            s = cmd_forecast(cfg, out, args)
            metrics["forecast"] = {"physics_aware_test_mse": s["physics_aware"]["test_mse"],
                                   "pod_test_mse": s["pod"]["test_mse"]}
        _write_metrics(out, metrics, time.perf_counter() - t0)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalFailure, InvalidData) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RgrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
