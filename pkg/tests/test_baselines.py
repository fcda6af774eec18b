import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpilot.baselines import (
    BallisticPolicy,
    InfeasibleTargetError,
    MLPThrowPolicy,
    RegressionSet,
    ballistic_policy,
    mlp_policy,
    random_throws,
    train_mlp,
)
from mcpilot.core import ReleaseGeometry, TargetDomain
from mcpilot.kinematics import plan_throw
from mcpilot.world import execute_throw

FLAT = ReleaseGeometry(l_r=0.07, z_rel=1.5, alpha=0.0)


def test_closed_form_example():
    v = ballistic_policy([1.5, 0.0, 0.0], FLAT)
    assert v == pytest.approx(math.sqrt(9.81 * 1.43**2 / 3), rel=1e-12)
    assert v == pytest.approx(2.586, abs=1e-3)


def test_target_on_release_vertical():
    assert ballistic_policy([0.07, 0.0, 0.0], FLAT) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.8, 2.4), st.floats(0.0, math.pi / 6))
def test_bearing_symmetry(ell, gamma):
    a = ballistic_policy([ell * math.cos(gamma), ell * math.sin(gamma), 0.0], FLAT)
    b = ballistic_policy([ell * math.cos(gamma), -ell * math.sin(gamma), 0.0], FLAT)
    assert a == pytest.approx(b, rel=1e-12)


def test_unreachable_targets():
    with pytest.raises(InfeasibleTargetError):
        ballistic_policy([1.0, 0.0, 2.0], FLAT)
    with pytest.raises(InfeasibleTargetError):
        ballistic_policy([2.4, 0.0, 0.0], ReleaseGeometry(0.07, 0.1, 0.0), u_M=1.0)


def test_simulated_landing_matches_inversion(ideal_cfg):
    arm = ideal_cfg.arm()
    geom = arm.release_geometry()
    P = np.array([1.5, 0.3, 0.0])
    v = ballistic_policy(P, geom)
    rec = execute_throw(plan_throw(math.atan2(P[1], P[0]), v, arm), ideal_cfg.world(), arm, 0, target=P)
    assert rec.error <= 1e-3


def test_ballistic_thrower_clamps():
    pol = BallisticPolicy(FLAT, u_M=2.0)
    v, clamped = pol.speed([2.4, 0.0, 0.0])
    assert v == 2.0 and clamped
    out = pol(np.array([[1.0, 0, 0], [2.4, 0, 0]]))
    assert out.shape == (2,) and out[1] == 2.0


def test_zero_weight_network_outputs_half_range():
    m = MLPThrowPolicy(epochs=0, random_state=0).fit(np.zeros((2, 3)), np.ones(2))
    for p in m.net_.parameters():
        p.data.zero_()
    assert mlp_policy(m, [1.0, 0.0, 0.0]) == 1.75


def test_overfit_single_example():
    m = train_mlp(RegressionSet([[1.2, 0.1, 0.0]], [2.3]), N_h=2, epochs=500, rng=0, lr=1e-2)
    assert m([1.2, 0.1, 0.0]) == pytest.approx(2.3, abs=1e-2)


def test_training_loss_decreases(rng):
    X = rng.uniform([0.75, -1, 0], [2.4, 1, 0], size=(40, 3))
    data = RegressionSet(X, 1.0 + np.hypot(X[:, 0], X[:, 1]))
    m = train_mlp(data, N_h=1, epochs=300, rng=1, width=50)
    assert m.loss_curve_[-1] <= m.loss_curve_[0]
    assert m.final_loss_ == m.loss_curve_[-1]


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_outputs_within_cap(P):
    m = MLPThrowPolicy(n_hidden_layers=1, width=10, epochs=5, random_state=0).fit(np.eye(3), [1.0, 2.0, 3.0])
    v = m(np.asarray(P))
    assert 0.0 <= v <= 3.5


def test_prediction_is_deterministic(rng):
    X = rng.normal(size=(10, 3))
    a = MLPThrowPolicy(width=20, epochs=20, random_state=3).fit(X, np.ones(10))
    b = MLPThrowPolicy(width=20, epochs=20, random_state=3).fit(X, np.ones(10))
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    np.testing.assert_array_equal(a.predict(X), a.predict(X))


def test_depth_validation():
    with pytest.raises(ValueError):
        MLPThrowPolicy(n_hidden_layers=4).fit(np.eye(3), np.ones(3))


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        train_mlp(RegressionSet(np.zeros((0, 3)), np.zeros(0)))


def test_regression_set_roundtrip(tmp_path, rng):
    data = RegressionSet(rng.normal(size=(4, 3)), rng.uniform(0, 3, 4))
    data.save(tmp_path / "r.csv")
    back = RegressionSet.load(tmp_path / "r.csv")
    np.testing.assert_allclose(back.X, data.X, rtol=1e-8)
    assert len(data + back) == 8


def test_random_throws_in_range(rng):
    g, v = random_throws(TargetDomain(0.75, 2.4, math.pi / 6, 0.0), 100, 3.5, rng)
    assert np.all(np.abs(g) <= math.pi / 6) and np.all((v >= 0) & (v <= 3.5))
