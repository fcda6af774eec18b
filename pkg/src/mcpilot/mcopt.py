"""Monte Carlo particle rollouts through the learned model and policy optimization.

Particles start from the release state reached along the planned joint
trajectory at a (possibly delayed) release instant, then propagate with the
speed-integration model.  Gaussian draws use the exact factor of the
one-step covariance: with ``Delta = E[Delta] + sqrt(Var[Delta]) * eps``,

    p' = p + T_s v + T_s / 2 * Delta,    v' = v + Delta,

which is the reparameterization of the rank-3 six-dimensional Gaussian.
A particle freezes at the first step whose height is at or below its target
plane.  All randomness is drawn up front with numpy, so the objective is a
deterministic, differentiable function of the policy parameters.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import CostParams, TargetDomain, as_generator, sample_targets
from .gpmodel import ThrowDynamicsModel
from .kinematics import ArmModel, ThrowTiming, release_states_torch
from .policy import MAX_DROPOUT, RBFPolicy, policy_forward_torch

__all__ = [
    "RolloutConfig",
    "RolloutNoise",
    "OptState",
    "OptResult",
    "draw_noise",
    "simulate_particles",
    "init_particles",
    "rollout",
    "objective",
    "policy_objective",
    "gradient",
    "optimize_policy",
    "write_trace_csv",
]

F64 = torch.float64


@dataclass(frozen=True)
class RolloutConfig:
    """Particle count, horizon and the delay model used inside the learned world.

    Release happens at ``t_command + U(a, a + b)`` when ``use_delay`` is set
    and exactly at the nominal release time otherwise.
    """

    M: int = 400
    T: float = 1.0
    T_s: float = 0.01
    a: float = 0.0
    b: float = 0.0
    use_delay: bool = True
    l_c: float = 0.1
    timing: ThrowTiming = field(default_factory=ThrowTiming)
    t_command: float | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.T <= 0 or self.T_s <= 0:
            raise ValueError("T and T_s must be positive")
        if self.b < 0:
            raise ValueError("delay width b must be nonnegative")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.T_s))

    @property
    def command_time(self) -> float:
        return self.timing.t_release if self.t_command is None else self.t_command


@dataclass(frozen=True)
class RolloutNoise:
    """Targets ``(M, 3)``, unit delay draws ``(M,)`` and Gaussian draws ``(steps, M, 3)``."""

    targets: np.ndarray
    delay_u: np.ndarray
    eps: np.ndarray

    def release_times(self, cfg: RolloutConfig) -> np.ndarray:
        if not cfg.use_delay:
            return np.full(len(self.delay_u), cfg.timing.t_release)
        return cfg.command_time + cfg.a + cfg.b * self.delay_u


def draw_noise(domain: TargetDomain, cfg: RolloutConfig, rng, targets=None) -> RolloutNoise:
    gen = as_generator(rng)
    if targets is None:
        targets = sample_targets(domain, cfg.M, gen)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    u = gen.random(len(targets))
    eps = gen.standard_normal((cfg.steps, len(targets), 3))
    return RolloutNoise(targets, u, eps)


def simulate_particles(gamma, speed, t_release, model: ThrowDynamicsModel, arm: ArmModel,
                       timing: ThrowTiming, eps, z_planes, T_s: float, history: bool = False):
    """Propagate particles from their release states; returns terminal ``(p, v)``.

    ``gamma``, ``speed``, ``t_release`` and ``z_planes`` have shape ``(M,)``,
    ``eps`` has shape ``(steps, M, 3)``.  With ``history`` the per-step
    positions are returned as a third value.
    """
    as_t = lambda x: x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=float), dtype=F64)
    gamma, speed, t_release, z_planes, eps = map(as_t, (gamma, speed, t_release, z_planes, eps))
    p, v = release_states_torch(gamma, speed, t_release, arm, timing)
    frozen = p[:, 2] <= z_planes
    traj = [p] if history else None
    state_input = model.input_map == "state"
    for k in range(eps.shape[0]):
        if not history and bool(frozen.all()):
            break
        inputs = torch.cat([p, v], 1) if state_input else v
        mean, var = model.predict_delta_torch(inputs)
        delta = mean + torch.sqrt(torch.clamp(var, min=1e-300)) * eps[k]
        p_new = p + T_s * v + (0.5 * T_s) * delta
        v_new = v + delta
        keep = frozen[:, None]
        p = torch.where(keep, p, p_new)
        v = torch.where(keep, v, v_new)
        frozen = frozen | (p[:, 2] <= z_planes)
        if history:
            traj.append(p)
    if history:
        return p, v, torch.stack(traj, 0)
    return p, v


def _policy_tensors(policy: RBFPolicy, requires_grad: bool = False):
    w = torch.tensor(policy.weights, dtype=F64, requires_grad=requires_grad)
    A = torch.tensor(policy.centers, dtype=F64, requires_grad=requires_grad)
    s = torch.tensor(np.log(policy.shape), dtype=F64, requires_grad=requires_grad)
    return w, A, s


def _terminal(w, A, log_s, u_M, model, arm, cfg: RolloutConfig, noise: RolloutNoise, mask=None,
              history=False):
    P = torch.as_tensor(noise.targets, dtype=F64)
    speed = policy_forward_torch(w, A, log_s, u_M, P, mask)
    gamma = torch.atan2(P[:, 1], P[:, 0])
    t_rel = noise.release_times(cfg)
    return simulate_particles(gamma, speed, t_rel, model, arm, cfg.timing, noise.eps, P[:, 2], cfg.T_s, history)


def _cost_torch(p, targets, l_c):
    P = torch.as_tensor(targets, dtype=F64)
    sq = ((p[:, :2] - P[:, :2]) ** 2).sum(1) / l_c
    return (1.0 - torch.exp(-sq)).mean()


def init_particles(policy: RBFPolicy, model, domain: TargetDomain, cfg: RolloutConfig, arm: ArmModel, rng):
    """Initial particle states ``(p, v)`` and their targets, as numpy arrays."""
    noise = draw_noise(domain, cfg, rng)
    w, A, s = _policy_tensors(policy)
    P = torch.as_tensor(noise.targets, dtype=F64)
    speed = policy_forward_torch(w, A, s, policy.u_M, P)
    gamma = torch.atan2(P[:, 1], P[:, 0])
    t_rel = torch.as_tensor(noise.release_times(cfg), dtype=F64)
    p, v = release_states_torch(gamma, speed, t_rel, arm, cfg.timing)
    return p.numpy(), v.numpy(), noise.targets


def rollout(policy: RBFPolicy, model: ThrowDynamicsModel, cfg: RolloutConfig, arm: ArmModel,
            noise: RolloutNoise, history: bool = False):
    """Terminal particle positions ``(M, 3)`` (and per-step positions with ``history``)."""
    with torch.no_grad():
        out = _terminal(*_policy_tensors(policy), policy.u_M, model, arm, cfg, noise, history=history)
    if history:
        return out[0].numpy(), out[2].numpy()
    return out[0].numpy()


def objective(terminal_positions, targets, params: CostParams | float = 0.1) -> float:
    """Mean saturated cost of the terminal particle positions."""
    l_c = params.l_c if isinstance(params, CostParams) else float(params)
    p = np.asarray(terminal_positions, dtype=float)
    P = np.asarray(targets, dtype=float)
    sq = ((p[:, :2] - P[:, :2]) ** 2).sum(1) / l_c
    return float(np.mean(1.0 - np.exp(-sq)))


def policy_objective(policy, model, cfg, arm, noise) -> float:
    return objective(rollout(policy, model, cfg, arm, noise), noise.targets, cfg.l_c)


def gradient(policy: RBFPolicy, model: ThrowDynamicsModel, cfg: RolloutConfig, arm: ArmModel,
             noise: RolloutNoise, mask=None):
    """Objective and its exact gradient under fixed draws.

    Returns ``(J, dJ/dw, dJ/dA, dJ/dshape)`` where ``shape`` is the diagonal
    of the policy's shape matrix.
    """
    w, A, s = _policy_tensors(policy, requires_grad=True)
    m = None if mask is None else torch.as_tensor(mask, dtype=F64)
    p, _ = _terminal(w, A, s, policy.u_M, model, arm, cfg, noise, m)
    J = _cost_torch(p, noise.targets, cfg.l_c)
    J.backward()
    grads = [w.grad.numpy(), A.grad.numpy(), s.grad.numpy() / policy.shape]
    for name, g in zip(("weights", "centers", "shape"), grads):
        bad = np.argwhere(~np.isfinite(g))
        if bad.size:
            raise FloatingPointError(f"non-finite gradient in {name} at index {tuple(bad[0])}")
    return float(J.detach()), grads[0], grads[1], grads[2]


# --------------------------------------------------------------------------- #
# optimizer


@dataclass
class OptState:
    """Adam state over the flat parameter vector ``(w, A, log shape)``."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.step)
        vhat = self.v / (1 - self.beta2**self.step)
        if not (np.all(np.isfinite(self.m)) and np.all(np.isfinite(self.v))):
            raise FloatingPointError("optimizer moments became non-finite")
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class OptResult:
    policy: RBFPolicy
    trace: list  # (step, J_hat, grad_norm, dropout_p)


def _flatten(policy: RBFPolicy) -> np.ndarray:
    return np.concatenate([policy.weights, policy.centers.ravel(), np.log(policy.shape)])


def _unflatten(theta: np.ndarray, template: RBFPolicy) -> RBFPolicy:
    n = template.n_basis
    return RBFPolicy(theta[:n], theta[n:4 * n].reshape(n, 3), np.exp(theta[4 * n:]), template.u_M)


SATURATED_COST = 0.999
STALL_STEPS = 100
MAX_RESTARTS = 3


def optimize_policy(policy: RBFPolicy, model: ThrowDynamicsModel, cfg: RolloutConfig, arm: ArmModel,
                    domain: TargetDomain, N_opt: int, rng, opt: OptState | None = None,
                    p_drop: float = 0.25, dropout_off: float = 0.25, trace_path=None,
                    log_every: int = 0) -> OptResult:
    """Stochastic gradient descent on the particle objective.

    Every step draws fresh targets, delays and Gaussian noise, and a dropout
    mask for the weights until the final ``dropout_off`` fraction of steps.
    If the cost stays saturated for ``STALL_STEPS`` steps, the parameters
    revert to the lowest-cost iterate and the learning rate halves, at most
    ``MAX_RESTARTS`` times.  Runs that never stall are unaffected.
    """
    if not (0.0 <= p_drop <= MAX_DROPOUT):
        raise ValueError(f"dropout probability must lie in [0, {MAX_DROPOUT}]")
    opt = OptState() if opt is None else opt
    gen = as_generator(rng)
    theta = _flatten(policy)
    n = policy.n_basis
    cut = int(math.floor(N_opt * (1.0 - dropout_off)))
    trace = []
    high = 0
    restarts = 0
    best_J, best_theta = np.inf, theta
    for step in range(N_opt):
        current = _unflatten(theta, policy)
        noise = draw_noise(domain, cfg, gen)
        p = p_drop if step < cut else 0.0
        mask = None
        if p > 0:
            mask = (gen.random(n) >= p) / (1.0 - p)
        J, gw, gA, gS = gradient(current, model, cfg, arm, noise, mask)
        # chain rule to the log-shape coordinates used by the optimizer
        grad = np.concatenate([gw, gA.ravel(), gS * current.shape])
        gnorm = float(np.linalg.norm(grad))
        if J < best_J:
            best_J, best_theta = J, theta
        theta = opt.update(theta, grad)
        trace.append((step, J, gnorm, p))
        high = high + 1 if J > SATURATED_COST else 0
        if high == STALL_STEPS:
            # an overshoot into the flat tail of the cost leaves no gradient to return by
            high = 0
            if restarts < MAX_RESTARTS and np.isfinite(best_J):
                restarts += 1
                theta = best_theta
                opt = replace(opt, lr=opt.lr * 0.5, step=0, m=None, v=None)
                warnings.warn(f"policy optimization stalled at cost > {SATURATED_COST}; restarting from the "
                              f"best parameters (J = {best_J:.3f}) with learning rate {opt.lr:g}",
                              RuntimeWarning, stacklevel=2)
            else:
                warnings.warn(f"policy optimization stalled at cost > {SATURATED_COST} for {STALL_STEPS} steps",
                              RuntimeWarning, stacklevel=2)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  J {J:.4f}  |g| {gnorm:.3g}  p_drop {p:.2f}", flush=True)
    result = OptResult(_unflatten(theta, policy), trace)
    if trace_path is not None:
        write_trace_csv(trace_path, trace)
    return result


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "J_hat", "grad_norm", "dropout_p"])
        for step, J, g, p in trace:
            w.writerow([step, format(J, ".9g"), format(g, ".9g"), format(p, ".9g")])
