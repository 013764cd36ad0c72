import numpy as np
import pytest

from rgr.datagen import PdeRunConfig, advecting_gaussian
from rgr.errors import Infeasible, InvalidArgument, NumericalFailure
from rgr.grid import MovingGrid, ReferenceGrid, control_coordinates
from rgr.lowrank import pod_error
from rgr.mapping import second_difference
from rgr.registration import (RegistrationProblem, evaluate_objective, gradient_fd,
                              regularization, train)


def smooth_data(n=41, k=12):
    x = np.linspace(0, 1, n)
    t = np.linspace(0, 1, k)
    m = np.exp(-((x[:, None] - 0.3 - 0.3 * t[None, :]) / 0.12) ** 2)
    return m, ReferenceGrid((x,))


def test_lossless_identity_pipeline():
    m, ref = smooth_data()
    p = RegistrationProblem(m, ref, 1, 12, perturb_scale=0.0)
    total, parts = evaluate_objective(p, p.initial_grid())
    assert total < 1e-12 and parts.reg1 == 0 and parts.reg2 == 0


@pytest.mark.parametrize("k", [1, 3])
def test_identity_reduces_to_pod(k):
    m, ref = smooth_data()
    p = RegistrationProblem(m, ref, 2, k, perturb_scale=0.0, control_shape=(11,),
                            control_steps=4)
    total, _ = evaluate_objective(p, p.initial_grid())
    assert total == pytest.approx(pod_error(m, k), rel=1e-10)


def test_identity_reduces_to_pod_2d():
    rng = np.random.default_rng(0)
    ref = ReferenceGrid.uniform([(0, 1), (0, 1)], [10, 8])
    m = rng.uniform(size=(80, 6))
    p = RegistrationProblem(m, ref, 2, 1, perturb_scale=0.0, control_shape=(5, 4))
    assert evaluate_objective(p, p.initial_grid())[0] == pytest.approx(pod_error(m, 1), rel=1e-10)


def test_ground_truth_translation_grid():
    cfg = PdeRunConfig((0.0, 2.5), 2.0, 1e-2, 2e-2, ic_params={"center": 0.5})
    m, ref, gt = advecting_gaussian(0.5, cfg)
    p = RegistrationProblem(m, ref, 2, 1, boundary_pinned=False)
    _, parts = evaluate_objective(p, gt)
    assert parts.data < 1e-8


def test_regularizer_values():
    m, ref = smooth_data(21, 5)
    p = RegistrationProblem(m, ref, 1, 1, gamma1=2.0, gamma2=3.0, control_shape=(21,))
    x = ref.axes[0]
    u = (x ** 2)[:, None]
    v = np.array([[1.0, 2.0, 4.0, 8.0, 16.0]])
    g = MovingGrid(ref, (u,), (v,), (21,), 5, pinned=False)
    r1, r2 = regularization(p, g)
    assert r1 == pytest.approx(2.0 * np.linalg.norm(second_difference(21).matrix @ u)
                               * np.linalg.norm(v) / np.linalg.norm(v), rel=1e-12)
    assert r2 == pytest.approx(3.0 * np.linalg.norm(v @ second_difference(5).matrix.T), rel=1e-12)


def test_invalid_grid_is_numerical_failure():
    m, ref = smooth_data(11, 3)
    p = RegistrationProblem(m, ref, 1, 1, control_shape=(11,))
    u = control_coordinates(ref, (11,))
    g = MovingGrid(ref, (u,), (np.array([[1.0, 0.5, -1.0]]),), (11,), 3, pinned=False)
    with pytest.raises(NumericalFailure) as exc:
        evaluate_objective(p, g)
    assert exc.value.step == 2


def test_problem_invariants():
    m, ref = smooth_data(11, 4)
    with pytest.raises(InvalidArgument):
        RegistrationProblem(m, ref, 1, 5)
    with pytest.raises(InvalidArgument):
        RegistrationProblem(m, ref, 5, 1, control_steps=4, control_shape=(4,))
    with pytest.raises(InvalidArgument):
        RegistrationProblem(m, ref, 1, 1, v_min=-1.0)
    with pytest.raises(InvalidArgument):
        RegistrationProblem(m[:-1], ref, 1, 1)


def _zero_data_problem(squared=True):
    ref = ReferenceGrid.uniform([(0.0, 1.0)], [21])
    return RegistrationProblem(np.zeros((21, 6)), ref, 2, 1, gamma1=0.5, gamma2=2.0,
                               control_shape=(7,), control_steps=6, squared=squared,
                               perturb_scale=0.01, boundary_pinned=False)


def test_fd_gradient_matches_quadratic():
    # with zero data the squared objective is a quadratic form in the factors
    p = _zero_data_problem()
    g = p.initial_grid()
    grad = gradient_fd(p, g, h=1e-5)
    u, v = g.basis[0], g.coeffs[0]
    d1 = second_difference(7, 0.5).matrix
    d2 = second_difference(6, 2.0).matrix
    gu = 2 * d1.T @ d1 @ u
    gv = 2 * v @ d2.T @ d2
    expect = np.concatenate([gu.ravel(), gv.ravel()])
    np.testing.assert_allclose(grad, expect, rtol=1e-6, atol=1e-9 * np.abs(expect).max())


def test_fd_gradient_vanishes_at_minimum():
    p = _zero_data_problem()
    ref = p.reference
    u = np.stack([control_coordinates(ref, (7,))[:, 0], np.ones(7)], axis=1)
    v = np.array([np.ones(6), np.linspace(0, 0.1, 6)])
    g = MovingGrid(ref, (u,), (v,), (7,), 6, upsample_degree=3, pinned=False)
    h = 1e-4
    assert np.abs(gradient_fd(p, g, h=h)).max() < 10 * h ** 2


def test_fd_forward_scheme_and_threads():
    m, ref = smooth_data(21, 6)
    # squared norms keep the comparison away from the cone at zero regularization
    p = RegistrationProblem(m, ref, 1, 1, gamma1=0.1, gamma2=0.1, control_shape=(7,),
                            squared=True)
    g = p.initial_grid()
    central = gradient_fd(p, g)
    np.testing.assert_array_equal(central, gradient_fd(p, g, threads=2))
    fwd = gradient_fd(p, g, scheme="forward")
    assert np.abs(fwd - central).max() < 1e-3 * np.abs(central).max()
    assert central.size == 5 * 1 + 6
    with pytest.raises(InvalidArgument):
        gradient_fd(p, g, h=0.0)


def test_fd_probe_failure_names_parameter():
    m, ref = smooth_data(11, 3)
    p = RegistrationProblem(m, ref, 1, 1, control_shape=(11,), boundary_pinned=False)
    u = control_coordinates(ref, (11,))
    g = MovingGrid(ref, (u,), (np.array([[1.0, 1.0, 1e-7]]),), (11,), 3, pinned=False)
    with pytest.raises(NumericalFailure) as exc:
        gradient_fd(p, g, h=1e-6)
    assert exc.value.parameter is not None


def test_train_keeps_exact_low_rank_data():
    x = np.linspace(0, 1, 31)
    m = np.outer(np.sin(np.pi * x), np.linspace(1, 2, 8))
    ref = ReferenceGrid((x,))
    p = RegistrationProblem(m, ref, 1, 1, gamma1=1.0, gamma2=1.0, control_shape=(8,),
                            perturb_scale=0.0, max_iters=10)
    res = train(p)
    assert res.objective_trace[-1] <= res.objective_trace[0]
    assert res.data_error <= 1e-8


def test_train_monotone_feasible_and_deterministic():
    m, ref = smooth_data(41, 12)
    kw = dict(gamma1=0.1, gamma2=0.1, v_min=1e-3, control_shape=(9,), control_steps=6,
              max_iters=15, seed=4)
    a = train(RegistrationProblem(m, ref, 2, 1, **kw))
    b = train(RegistrationProblem(m, ref, 2, 1, **kw))
    assert np.all(np.diff(a.objective_trace) <= 0)
    np.testing.assert_array_equal(a.objective_trace, b.objective_trace)
    assert a.volume_report.global_min >= 1e-3
    pos = a.grid.positions()[0]
    assert np.abs(pos[[0, -1]] - np.array([[0.0], [1.0]])).max() <= 1e-12
    assert a.data_error < pod_error(m, 1)
    assert set(a.records[0]) >= {"iteration", "total", "data", "reg1", "reg2", "penalty",
                                 "min_volume"}


def test_train_infeasible_volume_bound():
    m, ref = smooth_data(11, 4)
    # pinned ends leave total length 1 for 10 cells; 0.2 each is impossible
    p = RegistrationProblem(m, ref, 1, 1, v_min=0.2, control_shape=(6,), max_iters=5)
    with pytest.raises(Infeasible):
        train(p)
