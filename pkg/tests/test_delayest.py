import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpilot.delayest import (
    BOConfig,
    DelayEstimator,
    DelayModel,
    DelayObjective,
    _acquire,
    bo_minimize,
    delay_objective,
    recompute_command_time,
    write_bo_trace_csv,
)
from mcpilot.gpmodel import GaussianProcess, ThrowDynamicsModel, initial_hyper
from mcpilot.kinematics import plan_throw
from mcpilot.world import execute_throws

A0 = 0.025


@pytest.fixture(scope="module")
def planted(ideal_cfg):
    """Drag-free records thrown with a constant planted delay, and a model fitted on them."""
    arm = ideal_cfg.arm()
    world = ideal_cfg.updated(delay_lo=A0, delay_hi=A0).world()
    gammas, speeds = [-0.3, 0.0, 0.2, 0.4, -0.1], [1.5, 2.0, 2.5, 3.0, 3.4]
    plans = [plan_throw(g, v, arm) for g, v in zip(gammas, speeds)]
    recs = execute_throws(plans, np.zeros((5, 3)), world, arm, rng=0)
    model = ThrowDynamicsModel(n_iter=100).fit(recs)
    return recs, model, arm


def test_command_time_examples():
    assert recompute_command_time(0.48, 0.0) == 0.48
    assert recompute_command_time(0.48, 0.24) == pytest.approx(0.24)
    assert DelayModel(0.02, 0.01).command_time(0.48) == pytest.approx(0.46)
    with pytest.raises(ValueError):
        recompute_command_time(0.48, 0.5)


def test_delay_model_rejects_negative_width():
    with pytest.raises(ValueError):
        DelayModel(0.0, -0.01)


def test_bo_config_validation():
    with pytest.raises(ValueError):
        BOConfig(n_init=1)
    with pytest.raises(ValueError):
        BOConfig(M_d=0)
    with pytest.raises(ValueError):
        BOConfig(a_bounds=(0.3, -0.3))
    with pytest.raises(ValueError):
        BOConfig(b_bounds=(-0.01, 0.01))


def test_objective_nonnegative_and_deterministic(planted):
    recs, model, arm = planted
    f1 = delay_objective(0.01, 0.005, recs, model, arm, rng=3)
    f2 = delay_objective(0.01, 0.005, recs, model, arm, rng=3)
    assert f1 >= 0 and f1 == f2


def test_planted_delay_is_grid_minimum(planted):
    recs, model, arm = planted
    obj = DelayObjective(recs, model, arm, rng=0)
    grid = np.linspace(-0.3, 0.3, 25)
    assert np.any(np.isclose(grid, A0))
    F = {a: obj(a, 0.0) for a in grid}
    assert all(F[min(grid, key=lambda g: abs(g - A0))] <= f for f in F.values())


def test_width_increases_objective_without_spread(planted):
    recs, model, arm = planted
    obj = DelayObjective(recs, model, arm, rng=0)
    assert obj(A0, 0.01) > obj(A0, 0.0)


def test_rmse_smaller_at_planted_delay(planted):
    recs, model, arm = planted
    obj = DelayObjective(recs, model, arm, rng=0)
    assert obj.rmse(A0, 0.0) < obj.rmse(0.0, 0.0)


def test_bo_finds_quadratic_minimum():
    cfg = BOConfig(b_bounds=(0.0, 0.0), n_init=10, n_iter=30)
    res = bo_minimize(lambda a, b: (a - 0.015) ** 2, cfg, rng=0)
    assert abs(res.a - 0.015) <= 0.002
    assert res.b == 0.0
    assert len(res.history) == 40


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_bo_within_bounds_and_monotone(seed):
    cfg = BOConfig(n_init=4, n_iter=6, n_starts=4, surrogate_iters=20)
    res = bo_minimize(lambda a, b: np.sin(20 * a) + 50 * b, cfg, rng=seed)
    hist = np.array(res.history)
    assert np.all((hist[:, 1] >= -0.3) & (hist[:, 1] <= 0.3))
    assert np.all((hist[:, 2] >= 0) & (hist[:, 2] <= 0.01))
    best = np.minimum.accumulate(hist[:, 3])
    assert np.all(np.diff(best) <= 0)
    assert res.F == hist[:, 3].min()


def test_zero_sigma_exploits_posterior_mean(rng):
    Z = rng.random((8, 2))
    F = np.sin(4 * Z[:, 0]) + Z[:, 1] ** 2
    cfg = BOConfig(sigma_ucb=0.0, n_starts=16)
    z = _acquire(Z, F, np.array([True, True]), rng.random((16, 2)), cfg)
    y = (F - F.mean()) / F.std()
    gp = GaussianProcess(hyper=initial_hyper(Z, y), n_iter=cfg.surrogate_iters).fit(Z, y)
    g = np.stack(np.meshgrid(np.linspace(0, 1, 101), np.linspace(0, 1, 101)), -1).reshape(-1, 2)
    assert gp.predict(z[None, :])[0] <= gp.predict(g).min() + 1e-6


def test_surrogate_failure_falls_back(monkeypatch):
    import mcpilot.delayest as de

    def broken(*args, **kwargs):
        raise de.GPFactorizationError("boom")

    monkeypatch.setattr(de, "_acquire", broken)
    with pytest.warns(RuntimeWarning, match="surrogate failed"):
        res = bo_minimize(lambda a, b: a * a, BOConfig(n_init=3, n_iter=4), rng=0)
    assert res.fallbacks == 4 and len(res.history) == 7


def test_trace_csv(tmp_path):
    write_bo_trace_csv(tmp_path / "bo.csv", [(0, 0.01, 0.0, 0.5)])
    assert (tmp_path / "bo.csv").read_text() == "iter,a,b,F\n0,0.01,0,0.5\n"


def test_estimator_recovers_planted_offset(planted):
    recs, model, arm = planted
    est = DelayEstimator(BOConfig(b_bounds=(0.0, 0.0), n_iter=30), random_state=0).fit(recs, model, arm)
    assert abs(est.a_ - A0) <= 0.01
    assert est.delay_model_ == DelayModel(est.a_, est.b_)


def test_compensated_command_recovers_zero_delay_landing(ideal_cfg):
    arm = ideal_cfg.arm()
    nominal = execute_throws([plan_throw(0.1, 2.8, arm)], np.zeros((1, 3)), ideal_cfg.world(), arm, 0)[0]
    t_cmd = recompute_command_time(ideal_cfg.t_release, A0)
    delayed = ideal_cfg.updated(delay_lo=A0, delay_hi=A0).world()
    comp = execute_throws([plan_throw(0.1, 2.8, arm, t_command=t_cmd)], np.zeros((1, 3)), delayed, arm, 0)[0]
    assert np.linalg.norm(comp.landing[:2] - nominal.landing[:2]) <= 0.02
