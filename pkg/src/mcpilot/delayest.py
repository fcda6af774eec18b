"""Release-delay estimation by Bayesian optimization.

The delay is modeled as ``t_d ~ U(a, a + b)`` after the release command.
For a candidate ``(a, b)`` every recorded throw is replayed through the
learned model with a handful of particles; the objective ``F`` is the mean
horizontal distance between the particle landings and the recorded landing.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import as_generator
from .gpmodel import GaussianProcess, GPFactorizationError, initial_hyper
from .kinematics import ArmModel, ThrowTiming
from .mcopt import simulate_particles

__all__ = [
    "DelayModel",
    "BOConfig",
    "BOResult",
    "DelayObjective",
    "delay_objective",
    "bo_minimize",
    "recompute_command_time",
    "DelayEstimator",
    "write_bo_trace_csv",
]


@dataclass(frozen=True)
class DelayModel:
    """Uniform delay ``U(a, a + b)`` measured from the release command."""

    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("delay width b must be nonnegative")

    def command_time(self, t_release: float) -> float:
        return recompute_command_time(t_release, self.a)


def recompute_command_time(t_release: float, a_hat: float) -> float:
    """Issue the release command ``a_hat`` seconds early."""
    if a_hat > t_release:
        raise ValueError(f"delay offset {a_hat} exceeds the nominal release time {t_release}")
    return t_release - a_hat


@dataclass(frozen=True)
class BOConfig:
    a_bounds: tuple = (-0.3, 0.3)
    b_bounds: tuple = (0.0, 0.01)
    sigma_ucb: float = 2.0
    n_init: int = 10
    n_iter: int = 40
    n_starts: int = 32
    M_d: int = 10
    surrogate_iters: int = 200

    def __post_init__(self):
        if self.n_init < 2:
            raise ValueError("n_init must be at least 2")
        if self.M_d < 1:
            raise ValueError("M_d must be at least 1")
        for lo, hi in (self.a_bounds, self.b_bounds):
            if lo > hi:
                raise ValueError("lower bound above upper bound")
        if self.b_bounds[0] < 0:
            raise ValueError("delay width must be nonnegative")


@dataclass(frozen=True)
class BOResult:
    a: float
    b: float
    F: float
    history: list  # (iter, a, b, F)
    fallbacks: int = 0


# --------------------------------------------------------------------------- #
# objective


@dataclass
class DelayObjective:
    """Replays recorded throws with fixed random draws (common random numbers)."""

    records: list
    model: object
    arm: ArmModel
    timing: ThrowTiming = field(default_factory=ThrowTiming)
    M_d: int = 10
    T: float = 1.0
    T_s: float = 0.01
    rng: object = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("need at least one recorded throw")
        gen = as_generator(self.rng)
        n, m = len(self.records), self.M_d
        steps = int(round(self.T / self.T_s))
        self._u = gen.random((n, m)).ravel()
        self._eps = gen.standard_normal((steps, n * m, 3))
        rep = lambda vals: np.repeat(np.asarray(vals, dtype=float), m)
        self._gamma = rep([r.gamma for r in self.records])
        self._speed = rep([r.speed for r in self.records])
        self._t_cmd = rep([r.t_command for r in self.records])
        self._planes = rep([r.landing[2] for r in self.records])
        self._landing = np.repeat(np.array([r.landing[:2] for r in self.records]), m, axis=0)
        self.evaluations = 0

    def landings(self, a: float, b: float) -> np.ndarray:
        t_rel = self._t_cmd + a + b * self._u
        with torch.no_grad():
            p, _ = simulate_particles(self._gamma, self._speed, t_rel, self.model, self.arm, self.timing,
                                      self._eps, self._planes, self.T_s)
        return p.numpy()

    def __call__(self, a: float, b: float) -> float:
        self.evaluations += 1
        p = self.landings(a, b)
        dist = np.linalg.norm(p[:, :2] - self._landing, axis=1).reshape(len(self.records), self.M_d)
        return float(dist.mean(axis=1).mean())

    def rmse(self, a: float, b: float) -> float:
        """Root mean square horizontal error of the mean predicted landing per throw."""
        p = self.landings(a, b)[:, :2].reshape(len(self.records), self.M_d, 2).mean(axis=1)
        err = p - self._landing[:: self.M_d]
        return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def delay_objective(a, b, records, model, arm, timing=ThrowTiming(), M_d=10, rng=None, T=1.0, T_s=0.01):
    return DelayObjective(records, model, arm, timing, M_d, T, T_s, rng)(a, b)


# --------------------------------------------------------------------------- #
# Bayesian optimization


def bo_minimize(objective, cfg: BOConfig, rng, trace_path=None) -> BOResult:
    """Minimize ``objective(a, b)`` with a GP surrogate and a lower-confidence-bound rule.

    The returned pair is the best sampled point; ties go to the earliest sample.
    """
    gen = as_generator(rng)
    lo = np.array([cfg.a_bounds[0], cfg.b_bounds[0]], dtype=float)
    span = np.array([cfg.a_bounds[1], cfg.b_bounds[1]], dtype=float) - lo
    active = span > 0
    to_real = lambda z: lo + np.clip(z, 0.0, 1.0) * span

    Z, F, history = [], [], []
    fallbacks = 0

    def evaluate(z):
        a, b = to_real(z)
        f = float(objective(float(a), float(b)))
        Z.append(np.clip(z, 0.0, 1.0))
        F.append(f)
        history.append((len(history), float(a), float(b), f))

    for z in gen.random((cfg.n_init, 2)):
        evaluate(z)
    for _ in range(cfg.n_iter):
        starts = gen.random((cfg.n_starts, 2))
        try:
            z = _acquire(np.array(Z), np.array(F), active, starts, cfg)
        except (GPFactorizationError, np.linalg.LinAlgError, ValueError):
            fallbacks += 1
            z = starts[0]
        evaluate(z)
    if fallbacks:
        warnings.warn(f"surrogate failed {fallbacks} times; used uniform samples instead", RuntimeWarning,
                      stacklevel=2)
    best = int(np.argmin(F))
    result = BOResult(history[best][1], history[best][2], F[best], history, fallbacks)
    if trace_path is not None:
        write_bo_trace_csv(trace_path, history)
    return result


def _acquire(Z, F, active, starts, cfg: BOConfig) -> np.ndarray:
    X = Z[:, active]
    y = (F - F.mean()) / (F.std() if F.std() > 0 else 1.0)
    if X.shape[1] == 0:
        return starts[0]
    gp = GaussianProcess(hyper=initial_hyper(X, y), n_iter=cfg.surrogate_iters).fit(X, y)

    def acq(x):
        mean, var = gp.predict(x[None, :], return_var=True)
        return float(mean[0] - cfg.sigma_ucb * np.sqrt(var[0]))

    best_x, best_v = None, np.inf
    bounds = [(0.0, 1.0)] * X.shape[1]
    for s in starts[:, active]:
        res = scipy.optimize.minimize(acq, s, method="L-BFGS-B", bounds=bounds)
        if res.fun < best_v:
            best_x, best_v = res.x, res.fun
    z = np.zeros(2)
    z[active] = best_x
    return z


def write_bo_trace_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "a", "b", "F"])
        for it, a, b, f in history:
            w.writerow([it, format(a, ".9g"), format(b, ".9g"), format(f, ".9g")])


class DelayEstimator(BaseEstimator):
    """Estimate ``(a, b)`` of the release-delay law from recorded throws.

    Parameters
    ----------
    bo : BOConfig, optional
    T, T_s : float
        Particle horizon and step.
    random_state : int, optional
    """

    def __init__(self, bo: BOConfig | None = None, T: float = 1.0, T_s: float = 0.01, random_state=None):
        self.bo = bo
        self.T = T
        self.T_s = T_s
        self.random_state = random_state

    def fit(self, records, model, arm: ArmModel, timing: ThrowTiming = ThrowTiming(), trace_path=None):
        cfg = self.bo or BOConfig()
        gen = as_generator(self.random_state)
        obj = DelayObjective(list(records), model, arm, timing, cfg.M_d, self.T, self.T_s, gen)
        res = bo_minimize(obj, cfg, gen, trace_path)
        self.result_ = res
        self.a_, self.b_ = res.a, res.b
        self.objective_ = obj
        return self

    @property
    def delay_model_(self) -> DelayModel:
        check_is_fitted(self, "result_")
        return DelayModel(self.a_, self.b_)
