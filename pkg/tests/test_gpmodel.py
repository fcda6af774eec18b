import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpilot.core import CartesianState
from mcpilot.gpmodel import (
    GaussianProcess,
    GPDataset,
    GPHyper,
    ThrowDynamicsModel,
    augment_trajectory,
    build_dataset,
    cholesky_with_jitter,
    fit_hyperparameters,
    initial_hyper,
    kernel,
    kernel_matrix,
    log_marginal_likelihood,
)
from mcpilot.kinematics import plan_throw
from mcpilot.world import Trajectory, execute_throws

G, TS = 9.81, 0.01


def _free_fall(v0, n=40, p0=(0, 0, 2.0)):
    t = np.arange(n) * TS
    v0 = np.asarray(v0, float)
    V = np.tile(v0, (n, 1))
    V[:, 2] -= G * t
    P = np.asarray(p0) + v0 * t[:, None]
    P[:, 2] -= 0.5 * G * t**2
    return Trajectory(t, P, V)


# --------------------------------------------------------------------------- #
# kernel


def test_kernel_at_zero_distance():
    h = GPHyper(1.7, np.array([0.3, 2.0]), 0.1)
    assert kernel([0.5, 1.0], [0.5, 1.0], h) == pytest.approx(1.7**2)


def test_kernel_unit_case():
    h = GPHyper(1.0, np.ones(2), 0.1)
    assert kernel([0.0, 0.0], [1.0, 0.0], h) == pytest.approx(math.exp(-1))


def test_kernel_matrix_matches_scalar_kernel(rng):
    h = GPHyper(0.8, np.array([0.5, 1.5, 1.0]), 0.1)
    X = rng.normal(size=(6, 3))
    K = kernel_matrix(X, X, h)
    for i in range(6):
        for j in range(6):
            assert K[i, j] == pytest.approx(kernel(X[i], X[j], h), rel=1e-12)


def test_gram_matrix_psd(rng):
    X = rng.normal(size=(50, 3))
    K = kernel_matrix(X, X, GPHyper(1.0, np.ones(3), 0.1))
    np.testing.assert_allclose(K, K.T, atol=0)
    assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel([0.0], [0.0, 1.0], GPHyper(1.0, np.ones(1), 0.1))


def test_hyper_must_be_positive():
    with pytest.raises(ValueError):
        GPHyper(1.0, np.array([1.0, 0.0]), 0.1)


def test_jitter_only_when_needed():
    _, j = cholesky_with_jitter(np.eye(3))
    assert j == 0.0
    _, j = cholesky_with_jitter(np.ones((3, 3)))
    assert 0 < j <= 1e-6 * 1.0001


# --------------------------------------------------------------------------- #
# likelihood and hyperparameters


def test_lml_gradient_matches_finite_differences(rng):
    X = rng.normal(size=(15, 2))
    y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=15)
    h = GPHyper(0.9, np.array([0.7, 1.3]), 0.05)
    _, g = log_marginal_likelihood(X, y, h, gradient=True)
    th = h.to_log()
    for k in range(len(th)):
        e = np.zeros_like(th)
        e[k] = 1e-6
        fd = (log_marginal_likelihood(X, y, GPHyper.from_log(th + e))
              - log_marginal_likelihood(X, y, GPHyper.from_log(th - e))) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_zero_iterations_keep_init(rng):
    X = rng.normal(size=(10, 1))
    init = GPHyper(1.0, np.ones(1), 0.1)
    assert fit_hyperparameters(X, X[:, 0], init, iters=0) is init


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_fitting_never_lowers_likelihood(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(12, 2))
    y = r.normal(size=12)
    init = initial_hyper(X, y)
    fit = fit_hyperparameters(X, y, init, iters=50)
    assert log_marginal_likelihood(X, y, fit) >= log_marginal_likelihood(X, y, init) - 1e-12


def test_noise_recovered_from_known_gp():
    true = GPHyper(1.0, np.array([0.5]), 0.01)
    ratios = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        X = r.uniform(-2, 2, size=(60, 1))
        K = kernel_matrix(X, X, true) + true.noise * np.eye(60)
        y = np.linalg.cholesky(K) @ r.normal(size=60)
        ratios.append(fit_hyperparameters(X, y, initial_hyper(X, y), 200).noise / true.noise)
    assert 1 / 3 <= np.median(ratios) <= 3


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        fit_hyperparameters(np.zeros((1, 1)), np.zeros(1), GPHyper(1.0, np.ones(1), 0.1))


# --------------------------------------------------------------------------- #
# posterior


def test_single_point_closed_form():
    h = GPHyper(1.3, np.array([0.4]), 0.2)
    gp = GaussianProcess.from_hyper(np.array([[0.3]]), np.array([0.8]), h)
    m, v = gp.predict(np.array([[0.3]]), return_var=True)
    lam2 = 1.3**2
    assert m[0] == pytest.approx(lam2 * 0.8 / (lam2 + 0.2), rel=1e-12)
    assert v[0] == pytest.approx(lam2 - lam2**2 / (lam2 + 0.2), rel=1e-10)


def test_far_point_recovers_prior(rng):
    X = rng.normal(size=(20, 2))
    h = GPHyper(0.7, np.array([0.5, 0.5]), 0.01)
    gp = GaussianProcess.from_hyper(X, np.sin(X[:, 0]), h)
    m, v = gp.predict(np.array([[100.0, 100.0]]), return_var=True)
    assert abs(m[0]) < 1e-6
    assert v[0] == pytest.approx(0.49, abs=1e-6)


def test_posterior_matches_naive_inverse(rng):
    X = rng.uniform(-1, 1, size=(100, 3))
    y = np.sin(X @ [1.0, -2.0, 0.5]) + 0.05 * rng.normal(size=100)
    h = GPHyper(1.1, np.array([0.6, 0.9, 1.2]), 0.01)
    gp = GaussianProcess.from_hyper(X, y, h)
    Xs = rng.uniform(-1, 1, size=(30, 3))
    Ginv = np.linalg.inv(kernel_matrix(X, X, h) + h.noise * np.eye(100))
    Ks = kernel_matrix(Xs, X, h)
    m, v = gp.predict(Xs, return_var=True)
    np.testing.assert_allclose(m, Ks @ Ginv @ y, atol=1e-8)
    np.testing.assert_allclose(v, h.lam**2 - np.einsum("ij,jk,ik->i", Ks, Ginv, Ks), atol=1e-8)


def test_posterior_interpolates_within_noise(rng):
    X = rng.uniform(-2, 2, size=(40, 1))
    y = np.cos(2 * X[:, 0]) + 0.05 * rng.normal(size=40)
    gp = GaussianProcess(n_iter=100).fit(X, y)
    assert np.all(np.abs(gp.predict(X) - y) <= 3 * math.sqrt(gp.hyper_.noise) + 1e-9)
    _, var = gp.predict(rng.uniform(-3, 3, size=(200, 1)), return_var=True)
    assert np.all(var >= 0)


# --------------------------------------------------------------------------- #
# trajectory data


def test_augmentation_counts_and_invariants(rng):
    tr = _free_fall([1.0, 0.5, 0.2])
    assert len(augment_trajectory(tr, 0, rng)) == 1
    np.testing.assert_array_equal(augment_trajectory(tr, 0, rng)[0][0], tr.positions)
    out = augment_trajectory(tr, 2, rng)
    assert len(out) == 3
    for P, V in out[1:]:
        np.testing.assert_allclose(P[:, 2], tr.positions[:, 2], atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(V, axis=1), np.linalg.norm(tr.velocities, axis=1), atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), np.linalg.norm(tr.positions, axis=1), atol=1e-12)


def test_augmentation_rejects_negative(rng):
    with pytest.raises(ValueError):
        augment_trajectory(_free_fall([1, 0, 0]), -1, rng)


def test_two_sample_trajectory_gives_one_pair():
    ds = build_dataset([_free_fall([1, 0, 0], n=2)])
    assert len(ds) == 1


def test_gravity_only_outputs():
    ds = build_dataset([_free_fall([1, 0, 0]), _free_fall([0, 2, 1], n=25)])
    assert len(ds) == 39 + 24
    np.testing.assert_allclose(ds.Y, np.tile([0, 0, -G * TS], (len(ds), 1)), atol=1e-12)


def test_irregular_sampling_rejected():
    tr = _free_fall([1, 0, 0], n=5)
    bad = Trajectory(np.array([0, 0.01, 0.02, 0.04, 0.05]), tr.positions, tr.velocities)
    with pytest.raises(ValueError):
        build_dataset([bad])


def test_state_input_map():
    ds = build_dataset([_free_fall([1, 0, 0], n=5)], input_map="state")
    assert ds.X.shape == (4, 6)


def test_dataset_shape_validation():
    with pytest.raises(ValueError):
        GPDataset(np.zeros((3, 2)), np.zeros((4, 3)))


# --------------------------------------------------------------------------- #
# dynamics model


@pytest.fixture(scope="module")
def gravity_model():
    trajs = [_free_fall(v) for v in ([1, 0, 0], [0, 1, 0.5], [-1, 0.5, 1], [2, -1, 0])]
    return ThrowDynamicsModel(n_iter=50).fit(trajs)


def test_one_step_gravity(gravity_model):
    mu, _ = gravity_model.one_step(CartesianState(np.array([0, 0, 1.0]), np.zeros(3)))
    assert mu[2] == pytest.approx(1 - 0.5 * TS * G * TS, abs=1e-6)
    assert mu[5] == pytest.approx(-G * TS, abs=1e-6)


def test_one_step_zero_period(gravity_model):
    s = CartesianState(np.array([0, 0, 1.0]), np.array([1.0, 0, 0]))
    mu, S = gravity_model.one_step(s, T_s=0.0)
    np.testing.assert_array_equal(mu, s.as_vector())
    assert np.all(S == 0)


def test_one_step_covariance_blocks(gravity_model):
    mu, S = gravity_model.one_step(CartesianState(np.zeros(3), np.array([5.0, 5.0, 5.0])))
    _, var = gravity_model.predict_delta(np.array([[5.0, 5.0, 5.0]]))
    np.testing.assert_allclose(S[:3, 3:], TS / 2 * np.diag(var[0]), rtol=1e-12)
    np.testing.assert_allclose(S[3:, 3:], np.diag(var[0]), rtol=1e-12)
    np.testing.assert_allclose(S[:3, :3], TS**2 / 4 * np.diag(var[0]), rtol=1e-12)


def test_zero_variance_gives_zero_covariance():
    ds = GPDataset(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.zeros((2, 3)))
    h = GPHyper(1e-200, np.ones(3), 1e-10)  # lam**2 underflows to zero
    model = ThrowDynamicsModel.from_hyper(ds, [h] * 3)
    _, S = model.one_step(CartesianState(np.zeros(3), np.zeros(3)))
    assert np.all(S == 0)


def test_model_falls_back_to_mean_increment(gravity_model):
    m, _ = gravity_model.predict_delta(np.array([[50.0, 50.0, 50.0]]))
    np.testing.assert_allclose(m[0], [0, 0, -G * TS], atol=1e-9)


def test_uncentered_model_falls_back_to_zero():
    trajs = [_free_fall(v) for v in ([1, 0, 0], [0, 1, 0.5])]
    m, _ = ThrowDynamicsModel(n_iter=0, center=False).fit(trajs).predict_delta(np.array([[1e3, 1e3, 1e3]]))
    np.testing.assert_allclose(m[0], 0.0, atol=1e-9)


def test_torch_prediction_matches_numpy(cfg, arm, rng):
    plans = [plan_throw(g, v, arm) for g, v in ((0.1, 2.0), (-0.3, 3.0), (0.4, 2.6))]
    recs = execute_throws(plans, np.zeros((3, 3)), cfg.world(), arm, rng)
    model = ThrowDynamicsModel(n_iter=30).fit(recs)
    X = rng.normal(scale=2.0, size=(7, 3))
    m, v = model.predict_delta(X)
    mt, vt = model.predict_delta_torch(torch.as_tensor(X))
    np.testing.assert_allclose(mt.numpy(), m, atol=1e-10)
    np.testing.assert_allclose(vt.numpy(), v, atol=1e-10)


def test_max_points_subsamples(cfg, arm, rng):
    recs = execute_throws([plan_throw(0.0, 3.0, arm)], np.zeros((1, 3)), cfg.world(), arm, rng)
    model = ThrowDynamicsModel(n_iter=0, max_points=20).fit(recs)
    assert len(model.dataset_) == 20


def test_input_width_checked():
    with pytest.raises(ValueError):
        ThrowDynamicsModel(input_map="state").fit(np.zeros((5, 3)), np.zeros((5, 3)))


def test_save_load_roundtrip(gravity_model, tmp_path, rng):
    path = tmp_path / "model.txt"
    gravity_model.save(path)
    back = ThrowDynamicsModel.load(path)
    X = rng.normal(size=(5, 3))
    for a, b in zip(gravity_model.predict_delta(X), back.predict_delta(X)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    back.save(tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_text() == path.read_text()
