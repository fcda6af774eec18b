import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpilot.core import TargetDomain
from mcpilot.policy import RBFPolicy, apply_dropout, init_policy, policy_eval, policy_forward_torch

DOMAIN = TargetDomain(0.75, 2.4, np.pi / 6, 0.0)


def _policy(rng, n=5, u_M=3.5):
    return RBFPolicy(rng.normal(size=n), rng.uniform(0, 2, size=(n, 3)), rng.uniform(0.3, 2, size=3), u_M)


def test_zero_weights_give_half_range(rng):
    p = RBFPolicy(np.zeros(4), rng.normal(size=(4, 3)), np.full(3, 0.5), 3.5)
    assert policy_eval(p, [1.0, 0.2, 0.0]) == 1.75


def test_huge_weights_saturate():
    p = RBFPolicy(np.full(3, 1e6), np.array([[1.0, 0, 0]] * 3), np.full(3, 0.5), 3.5)
    assert policy_eval(p, [1.0, 0.1, 0.0]) == pytest.approx(3.5, abs=1e-6)


def test_batch_matches_single(rng):
    p = _policy(rng)
    P = rng.uniform(0, 2, size=(6, 3))
    np.testing.assert_allclose(policy_eval(p, P), [policy_eval(p, row) for row in P])


def test_torch_forward_matches_numpy(rng):
    p = _policy(rng)
    P = rng.uniform(0, 2, size=(6, 3))
    out = policy_forward_torch(torch.tensor(p.weights), torch.tensor(p.centers), torch.tensor(np.log(p.shape)),
                               p.u_M, torch.tensor(P))
    np.testing.assert_allclose(out.numpy(), policy_eval(p, P), rtol=1e-14)


def test_gradient_matches_finite_differences(rng):
    p = _policy(rng, n=4)
    w, A = torch.tensor(p.weights, requires_grad=True), torch.tensor(p.centers, requires_grad=True)
    s = torch.tensor(np.log(p.shape), requires_grad=True)
    P = rng.uniform(0, 2, size=(10, 3))
    for i in range(10):
        Pi = torch.tensor(P[i:i + 1])
        gw, gA, gs = torch.autograd.grad(policy_forward_torch(w, A, s, p.u_M, Pi)[0], (w, A, s))
        theta = np.concatenate([p.weights, p.centers.ravel(), np.log(p.shape)])
        analytic = np.concatenate([gw.numpy(), gA.numpy().ravel(), gs.numpy()])

        def f(th):
            n = p.n_basis
            q = RBFPolicy(th[:n], th[n:4 * n].reshape(n, 3), np.exp(th[4 * n:]), p.u_M)
            return policy_eval(q, P[i])

        for k in range(len(theta)):
            e = np.zeros_like(theta)
            e[k] = 1e-6
            fd = (f(theta + e) - f(theta - e)) / 2e-6
            assert analytic[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 1000))
def test_output_in_open_range(P, seed):
    p = _policy(np.random.default_rng(seed))
    v = policy_eval(p, np.asarray(P))
    assert 0.0 < v < 3.5


def test_permutation_invariance(rng):
    p = _policy(rng, n=6)
    perm = rng.permutation(6)
    q = RBFPolicy(p.weights[perm], p.centers[perm], p.shape, p.u_M)
    P = rng.uniform(0, 2, size=(5, 3))
    np.testing.assert_allclose(policy_eval(q, P), policy_eval(p, P), rtol=1e-14)


def test_init_policy_sim_defaults():
    p = init_policy(DOMAIN, 3.5, 250, rng=0)
    assert p.n_basis == 250
    (x0, x1), (y0, y1) = DOMAIN.superset_bounds()
    assert np.all((p.centers[:, 0] >= x0) & (p.centers[:, 0] <= x1))
    assert np.all((p.centers[:, 1] >= y0) & (p.centers[:, 1] <= y1))
    assert np.all(p.centers[:, 2] == 0.0)
    assert np.all(np.abs(p.weights) <= 3.5)
    np.testing.assert_array_equal(p.shape, 0.5)


def test_init_weight_scale(rng):
    p = init_policy(DOMAIN, 3.5, 400, rng, weight_scale=0.05)
    assert np.abs(p.weights).max() <= 0.05 * 3.5
    with pytest.raises(ValueError):
        init_policy(DOMAIN, 3.5, 10, rng, weight_scale=1.5)


def test_init_deterministic():
    a, b = init_policy(DOMAIN, 3.5, 30, rng=4), init_policy(DOMAIN, 3.5, 30, rng=4)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.centers, b.centers)


def test_dropout_identity(rng):
    p = _policy(rng)
    assert apply_dropout(p, 0.0, rng) is p


def test_dropout_unbiased():
    p = RBFPolicy(np.arange(1.0, 6.0), np.zeros((5, 3)), np.ones(3), 3.5)
    r = np.random.default_rng(0)
    draws = np.array([apply_dropout(p, 0.25, r).weights for _ in range(10_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - p.weights) <= 3 * se)


def test_dropout_rate_bound(rng):
    with pytest.raises(ValueError):
        apply_dropout(_policy(rng), 0.9999, rng)


def test_validation():
    with pytest.raises(ValueError):
        RBFPolicy(np.zeros(2), np.zeros((3, 3)), np.ones(3), 3.5)
    with pytest.raises(ValueError):
        RBFPolicy(np.zeros(2), np.zeros((2, 3)), np.array([1.0, -1.0, 1.0]), 3.5)
    with pytest.raises(ValueError):
        RBFPolicy(np.zeros(2), np.zeros((2, 3)), np.ones(3), 0.0)


def test_save_load_roundtrip(rng, tmp_path):
    p = _policy(rng)
    p.save(tmp_path / "p.txt")
    q = RBFPolicy.load(tmp_path / "p.txt")
    np.testing.assert_array_equal(q.weights, p.weights)
    np.testing.assert_array_equal(q.centers, p.centers)
    np.testing.assert_array_equal(q.shape, p.shape)
    assert q.u_M == p.u_M
