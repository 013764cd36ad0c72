"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long-running criteria train on the bundled configurations in
``configs/`` so the numbers here match ``rgr run`` on those files.
"""
import json
import subprocess
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from rgr.cli import build_dataset, cmd_forecast, load_config, make_problem
from rgr.datagen import PdeRunConfig, advecting_gaussian
from rgr.grid import MovingGrid, ReferenceGrid, init_from_reference
from rgr.io import format_csv, parse_csv, read_matrix, write_matrix
from rgr.lowrank import energy_fraction, frobenius_error, pod_error, reconstruct, truncated_svd
from rgr.lowrank import singular_values
from rgr.mapping import InterpConfig, map_forward, map_inverse
from rgr.registration import RegistrationProblem, evaluate_objective, gradient_fd, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def _problem(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    m, ref, _, _ = build_dataset(cfg)
    return cfg, m, make_problem(cfg, m, ref)


def _monotone(trace):
    return bool(np.all(np.diff(trace) <= 0))


def test_eckart_young_suite(verdict):
    t0 = time.perf_counter()
    worst_formula, violations = 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((100, 40))
        s = np.linalg.svd(m, compute_uv=False)
        for k in (1, 4, 8):
            err = frobenius_error(m, reconstruct(truncated_svd(m, k)))
            tail = np.sqrt(np.sum(s[k:] ** 2))
            worst_formula = max(worst_formula, abs(err - tail) / tail)
            for _ in range(100):
                a = rng.standard_normal((100, k))
                b = rng.standard_normal((k, 40))
                # least-squares optimal right factor for the random left factor
                b_ls = np.linalg.lstsq(a, m, rcond=None)[0]
                comp = min(np.linalg.norm(m - a @ b), np.linalg.norm(m - a @ b_ls))
                violations += comp < err
    wall = time.perf_counter() - t0
    ok = worst_formula < 1e-9 and violations == 0 and wall < 10
    verdict(1, "Eckart-Young suite", ok,
            f"max rel dev {worst_formula:.1e}, beaten {violations}x, {wall:.1f}s")
    assert ok


def _roundtrip_error(dx):
    ref = ReferenceGrid.uniform([(0.0, 1.0)], [int(round(1 / dx)) + 1])
    x = ref.axes[0]
    u = np.stack([x, np.sin(np.pi * x) / np.pi], axis=1)
    v = np.array([[1.0, 1.0], [0.0, 0.1]])
    g = MovingGrid(ref, (u,), (v,), ref.shape, 2, pinned=False)
    f = np.sin(2 * np.pi * x) + 0.5 * np.cos(3 * x)
    m = np.repeat(f[:, None], 2, axis=1)
    cfg = InterpConfig(1)
    return np.abs(map_inverse(map_forward(m, g, cfg), g, cfg) - m).max()


def test_map_identity_and_round_trip(verdict):
    t0 = time.perf_counter()
    worst_identity = 0.0
    for shape in ([101], [12, 9], [50, 50]):
        bounds = [(0.0, 1.0)] * len(shape)
        ref = ReferenceGrid.uniform(bounds, shape)
        g = init_from_reference(ref, 2, 6, perturb_scale=0.0)
        m = np.random.default_rng(len(shape)).uniform(size=(ref.size, 6))
        for degree in (1, 3):
            cfg = InterpConfig(degree)
            worst_identity = max(worst_identity,
                                 np.linalg.norm(map_inverse(map_forward(m, g, cfg), g, cfg) - m))
    e1, e2 = _roundtrip_error(1e-2), _roundtrip_error(5e-3)
    order = np.log2(e1 / e2)
    wall = time.perf_counter() - t0
    ok = worst_identity <= 1e-12 and abs(order - 2) / 2 <= 0.3 and wall < 10
    verdict(2, "map identity and round-trip order", ok,
            f"identity {worst_identity:.1e}, order {order:.3f}, {wall:.1f}s")
    assert ok


def test_objective_bridge(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    cases = []
    cfg = load_config(CONFIGS / "burgers.json")
    m, ref, _, _ = build_dataset(cfg)
    cases.append((m, ref, 4, (51,)))
    cfg = load_config(CONFIGS / "rotated_a.json")
    m, ref, _, _ = build_dataset(cfg)
    cases.append((m, ref, 1, (7, 7)))
    for m, ref, k, cs in cases:
        p = RegistrationProblem(m, ref, 2, k, perturb_scale=0.0, control_shape=cs,
                                boundary_pinned=len(cs) == 1)
        total, _ = evaluate_objective(p, p.initial_grid())
        worst = max(worst, abs(total - pod_error(m, k)) / pod_error(m, k))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-10 and wall < 5
    verdict(3, "objective bridge to POD", ok, f"max rel dev {worst:.1e}, {wall:.1f}s")
    assert ok


def test_advection_oracle(verdict):
    t0 = time.perf_counter()
    cfg, m, p = _problem("advecting_gaussian")
    pde = PdeRunConfig(tuple(cfg.dataset["bounds"]), cfg.dataset["final_time"],
                       cfg.dataset["dx"], cfg.dataset["dt"],
                       ic_params=cfg.dataset["ic_params"])
    c = cfg.dataset["speed"]
    _, ref, gt = advecting_gaussian(c, pde)
    gt_problem = RegistrationProblem(m, ref, 2, 1, boundary_pinned=False)
    gt_data = evaluate_objective(gt_problem, gt)[1].data
    res = train(p)
    pod = pod_error(m, 1, relative=True)
    factor = pod / res.data_error_rel
    pos = res.grid.positions()[0]
    t = pde.times
    design = np.stack([np.ones_like(t), t], axis=1)
    coef = np.linalg.lstsq(design, pos.T, rcond=None)[0]
    affine_dev = np.abs(pos.T - design @ coef).max() / (c * t[-1])
    wall = time.perf_counter() - t0
    ok = gt_data < 1e-8 and factor >= 5 and affine_dev <= 0.02 and wall < 180
    verdict(4, "advection oracle", ok,
            f"ground truth {gt_data:.1e}, rel {res.data_error_rel:.4f} vs POD {pod:.4f} "
            f"({factor:.0f}x), affine dev {100 * affine_dev:.2f}%, {wall:.0f}s")
    assert ok


def test_rotated_glyph(verdict):
    t0 = time.perf_counter()
    _, m, p = _problem("rotated_a")
    res = train(p)
    pod = pod_error(m, 1, relative=True)
    factor = pod / res.data_error_rel
    wall = time.perf_counter() - t0
    ok = res.data_error_rel < pod and factor >= 2 and wall < 600
    verdict(5, "rotated glyph beats POD", ok,
            f"rel {res.data_error_rel:.4f} vs POD {pod:.4f} ({factor:.1f}x), {wall:.0f}s")
    assert ok


def test_burgers_energy(verdict):
    t0 = time.perf_counter()
    _, m, p = _problem("burgers")
    res = train(p)
    e_m = energy_fraction(singular_values(m), 4)
    e_g = energy_fraction(singular_values(map_forward(m, res.grid, p.interp)), 4)
    vmin = res.volume_report.global_min
    mono = _monotone(res.objective_trace)
    wall = time.perf_counter() - t0
    ok = e_g > e_m and vmin >= 1e-3 and mono and wall < 600
    verdict(6, "Burgers energy concentration", ok,
            f"energy {e_g:.6f} vs {e_m:.6f}, min volume {vmin:.2e}, monotone {mono}, "
            f"{wall:.0f}s")
    assert ok


def test_wave(verdict):
    t0 = time.perf_counter()
    _, m, p = _problem("wave")
    res = train(p)
    pod = pod_error(m, 2)
    feasible = res.volume_report.global_min >= 1e-3
    mono = _monotone(res.objective_trace)
    wall = time.perf_counter() - t0
    ok = feasible and mono and res.data_error <= pod and wall < 600
    verdict(7, "wave feasible and no worse than POD", ok,
            f"error {res.data_error:.3f} vs POD {pod:.3f}, min volume "
            f"{res.volume_report.global_min:.2e}, monotone {mono}, {wall:.0f}s")
    assert ok


def test_burgers_extrapolation(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "burgers.json")
    s = cmd_forecast(cfg, tmp_path, SimpleNamespace(threads=1))
    phys, pod = s["physics_aware"]["test_mse"], s["pod"]["test_mse"]
    wall = time.perf_counter() - t0
    ok = phys <= pod and wall < 300
    verdict(8, "Burgers extrapolation", ok,
            f"test MSE {phys:.3e} vs POD {pod:.3e}, {wall:.0f}s")
    assert ok


def test_gradient_sanity(verdict):
    t0 = time.perf_counter()
    _, _, p = _problem("burgers")
    g = p.initial_grid()
    central = gradient_fd(p, g)
    forward = gradient_fd(p, g, scheme="forward")
    rel = np.abs(forward - central) / np.abs(central)
    n_u = g.parameters().size - g.coeffs[0].size
    wall = time.perf_counter() - t0
    ok = bool(np.all(rel <= 1e-3)) and wall < 120
    verdict(9, "forward vs central gradient", ok,
            f"max rel dev U block {rel[:n_u].max():.1e}, V block {rel[n_u:].max():.1e}, "
            f"h {p.h:.1e}, {wall:.1f}s")
    assert ok


def _tiny_config(tmp_path):
    cfg = {
        "name": "tiny",
        "dataset": {"generator": "advecting_gaussian", "bounds": [0.0, 2.5], "final_time": 1.0,
                    "dx": 0.05, "dt": 0.1, "speed": 0.5,
                    "ic_params": {"center": 0.6, "width": 0.15}},
        "registration": {"grid_rank": 2, "latent_rank": 1, "gamma1": 1.0, "gamma2": 1.0,
                         "boundary_pinned": False, "control_shape": [11],
                         "control_steps": 6, "max_iters": 10, "seed": 3},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_determinism_and_formats(verdict, tmp_path):
    t0 = time.perf_counter()
    config = _tiny_config(tmp_path)
    metrics = []
    for name in ("first", "second"):
        out = tmp_path / name
        r = subprocess.run([sys.executable, "-m", "rgr.cli", "run", "--config", str(config),
                            "--out", str(out), "--quiet"], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        d = json.loads((out / "metrics.json").read_text())
        d.pop("wall_time_s")
        metrics.append(json.dumps(d, indent=2, sort_keys=True))
    same_metrics = metrics[0] == metrics[1]

    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)) * 10.0 ** rng.integers(-300, 300, (7, 5))
    a[0, :3] = [-0.0, 5e-324, np.inf]
    write_matrix(tmp_path / "a.rgr", a)
    matrix_ok = read_matrix(tmp_path / "a.rgr").tobytes() == a.tobytes()
    csv_ok = parse_csv(format_csv(a)).tobytes() == a.tobytes()
    wall = time.perf_counter() - t0
    ok = same_metrics and matrix_ok and csv_ok and wall < 60
    verdict(10, "determinism and formats", ok,
            f"metrics identical {same_metrics}, matrix bit-exact {matrix_ok}, "
            f"csv bit-exact {csv_ok}, {wall:.1f}s")
    assert ok
