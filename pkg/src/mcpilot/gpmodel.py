"""Gaussian-process models of free-flight velocity changes.

Each component of the velocity increment ``Delta = v[t+1] - v[t]`` is an
independent zero-mean GP with a squared-exponential kernel

    k(x, x') = lam**2 * exp(-sum_k (x_k - x'_k)**2 / ell_k**2)

i.e. the lengthscale matrix is ``Lambda = diag(ell**2)`` and there is no
factor one half in the exponent.  Positions follow from the velocity
increment under a constant-acceleration assumption (speed integration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import CartesianState, as_generator

__all__ = [
    "GPHyper",
    "GPDataset",
    "GPFactorizationError",
    "kernel",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit_hyperparameters",
    "initial_hyper",
    "cholesky_with_jitter",
    "GaussianProcess",
    "ThrowDynamicsModel",
    "augment_trajectory",
    "build_dataset",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-6
NOISE_FLOOR = 1e-10


class GPFactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GPHyper:
    """Output scale ``lam``, per-dimension lengthscales and noise variance."""

    lam: float
    lengthscales: np.ndarray
    noise: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not (self.lam > 0 and np.all(ls > 0) and self.noise > 0):
            raise ValueError("GP hyperparameters must be strictly positive")

    def to_log(self) -> np.ndarray:
        return np.concatenate([[math.log(self.lam)], np.log(self.lengthscales), [math.log(self.noise)]])

    @classmethod
    def from_log(cls, theta) -> "GPHyper":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))


@dataclass(frozen=True)
class GPDataset:
    """Inputs ``X`` of shape ``(n, D)`` and outputs ``Y`` of shape ``(n, E)``."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"row counts disagree: {X.shape[0]} inputs, {Y.shape[0]} outputs")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return self.X.shape[0]


# --------------------------------------------------------------------------- #
# kernel and likelihood


def kernel_matrix(X1, X2, hyper: GPHyper) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float)) / hyper.lengthscales
    X2 = np.atleast_2d(np.asarray(X2, dtype=float)) / hyper.lengthscales
    sq = (X1**2).sum(1)[:, None] + (X2**2).sum(1)[None, :] - 2.0 * X1 @ X2.T
    return hyper.lam**2 * np.exp(-np.maximum(sq, 0.0))


def kernel(xi, xj, hyper: GPHyper) -> float:
    xi, xj = np.atleast_1d(np.asarray(xi, dtype=float)), np.atleast_1d(np.asarray(xj, dtype=float))
    if xi.shape != xj.shape:
        raise ValueError("kernel inputs must have the same dimension")
    d = (xi - xj) / hyper.lengthscales
    return float(hyper.lam**2 * math.exp(-float(d @ d)))


def cholesky_with_jitter(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding diagonal jitter only if needed."""
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(K.shape[0])), jitter * scale
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPFactorizationError(f"Gram matrix not positive definite even with jitter {JITTER_MAX:g}")


def log_marginal_likelihood(X, y, hyper: GPHyper, gradient: bool = False):
    """Log evidence of ``y`` under the GP; optionally its gradient in log-parameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    K = kernel_matrix(X, X, hyper)
    G = K + hyper.noise * np.eye(n)
    L, _ = cholesky_with_jitter(G)
    alpha = scipy.linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not gradient:
        return float(lml)
    W = np.outer(alpha, alpha) - scipy.linalg.cho_solve((L, True), np.eye(n))
    grad = np.empty(X.shape[1] + 2)
    grad[0] = 0.5 * np.sum(W * 2.0 * K)
    for k in range(X.shape[1]):
        d2 = (X[:, k, None] - X[None, :, k]) ** 2 / hyper.lengthscales[k] ** 2
        grad[1 + k] = 0.5 * np.sum(W * K * 2.0 * d2)
    grad[-1] = 0.5 * hyper.noise * np.trace(W)
    return float(lml), grad


def initial_hyper(X, y) -> GPHyper:
    """Lengthscales from input spread, output scale from output magnitude.

    The output scale uses the root mean square rather than the standard
    deviation because the GP has zero prior mean.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    ls = X.std(axis=0)
    ls = np.where(ls > 1e-8, ls, 1.0)
    rms = float(np.sqrt(np.mean(y**2)))
    lam = rms if rms > 1e-12 else 1.0
    noise = max(0.01 * float(np.var(y)), 1e-4 * lam**2, NOISE_FLOOR)
    return GPHyper(lam, ls, noise)


def fit_hyperparameters(X, y, init: GPHyper, iters: int = 500) -> GPHyper:
    """Maximize the marginal likelihood over log-parameters with L-BFGS-B.

    The result is accepted only if it improves on ``init``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two training points")
    if iters <= 0:
        return init
    base = log_marginal_likelihood(X, y, init)
    if not np.isfinite(base):
        raise ValueError("non-finite marginal likelihood at the initial hyperparameters")

    def neg(theta):
        try:
            lml, g = log_marginal_likelihood(X, y, GPHyper.from_log(theta), gradient=True)
        except (GPFactorizationError, ValueError, OverflowError, FloatingPointError):
            return 1e300, np.zeros_like(theta)
        if not np.isfinite(lml):
            return 1e300, np.zeros_like(theta)
        return -lml, -g

    theta0 = init.to_log()
    # wide box in log space; it only guards against overflow
    bounds = [(-30.0, 10.0)] + [(-10.0, 10.0)] * (len(theta0) - 2) + [(math.log(NOISE_FLOOR), 10.0)]
    theta0 = np.clip(theta0, [lo for lo, _ in bounds], [hi for _, hi in bounds])
    res = scipy.optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                                  options={"maxiter": int(iters)})
    best = GPHyper.from_log(res.x)
    try:
        if log_marginal_likelihood(X, y, best) > base:
            return best
    except GPFactorizationError:
        pass
    return init


# --------------------------------------------------------------------------- #
# single-output estimator


class GaussianProcess(RegressorMixin, BaseEstimator):
    """Exact GP regression with a squared-exponential kernel.

    Parameters
    ----------
    hyper : GPHyper, optional
        Starting hyperparameters; derived from the data when omitted.
    n_iter : int, default=500
        Marginal-likelihood iterations; 0 keeps the starting values.
    """

    def __init__(self, hyper: GPHyper | None = None, n_iter: int = 500):
        self.hyper = hyper
        self.n_iter = n_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        init = self.hyper if self.hyper is not None else initial_hyper(X, y)
        self.hyper_ = fit_hyperparameters(X, y, init, self.n_iter) if len(y) >= 2 else init
        self._factorize(X, y)
        return self

    def _factorize(self, X, y):
        self.X_train_ = X
        self.y_train_ = y
        G = kernel_matrix(X, X, self.hyper_) + self.hyper_.noise * np.eye(len(y))
        self.L_, self.jitter_ = cholesky_with_jitter(G)
        self.alpha_ = scipy.linalg.cho_solve((self.L_, True), y)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_hyper(cls, X, y, hyper: GPHyper) -> "GaussianProcess":
        """A fitted model with fixed hyperparameters (no likelihood search)."""
        gp = cls(hyper=hyper, n_iter=0)
        gp.hyper_ = hyper
        X, y = check_X_y(X, y, y_numeric=True)
        return gp._factorize(X, y)

    def predict(self, X, return_var: bool = False):
        check_is_fitted(self, "alpha_")
        X = check_array(X)
        Ks = kernel_matrix(X, self.X_train_, self.hyper_)
        mean = Ks @ self.alpha_
        if not return_var:
            return mean
        V = scipy.linalg.solve_triangular(self.L_, Ks.T, lower=True)
        var = self.hyper_.lam**2 - np.sum(V**2, axis=0)
        if np.any(var < -1e-10 * self.hyper_.lam**2):
            raise GPFactorizationError("posterior variance significantly negative; Gram matrix ill-conditioned")
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        check_is_fitted(self, "alpha_")
        return log_marginal_likelihood(self.X_train_, self.y_train_, self.hyper_)


# --------------------------------------------------------------------------- #
# trajectory data


def augment_trajectory(record, N_a: int, rng):
    """The original trajectory plus ``N_a`` copies rotated about the vertical axis.

    Returns a list of ``(positions, velocities)`` pairs.
    """
    if N_a < 0:
        raise ValueError("N_a must be nonnegative")
    tr = record.trajectory if hasattr(record, "trajectory") else record
    P, V = np.asarray(tr.positions), np.asarray(tr.velocities)
    out = [(P.copy(), V.copy())]
    gen = as_generator(rng)
    for phi in gen.uniform(-math.pi, math.pi, size=N_a):
        c, s = math.cos(phi), math.sin(phi)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        out.append((P @ R.T, V @ R.T))
    return out


def _trajectory_arrays(item):
    if isinstance(item, tuple):
        P, V = item
        return np.asarray(P, dtype=float), np.asarray(V, dtype=float), None
    tr = item.trajectory if hasattr(item, "trajectory") else item
    return np.asarray(tr.positions, dtype=float), np.asarray(tr.velocities, dtype=float), np.asarray(tr.times)


def _map_inputs(P, V, input_map: str):
    if input_map == "velocity":
        return V
    if input_map == "state":
        return np.concatenate([P, V], axis=-1)
    raise ValueError(f"unknown input map {input_map!r}")


def build_dataset(trajectories, input_map: str = "velocity", T_s: float | None = None) -> GPDataset:
    """Stack ``(input at t, v[t+1] - v[t])`` pairs from fixed-period trajectories.

    ``trajectories`` holds records, :class:`~mcpilot.world.Trajectory`
    objects or ``(positions, velocities)`` pairs.
    """
    Xs, Ys = [], []
    for item in trajectories:
        P, V, times = _trajectory_arrays(item)
        if times is not None and len(times) > 1:
            dt = np.diff(times)
            period = T_s if T_s is not None else dt[0]
            if np.any(np.abs(dt - period) > 1e-9):
                raise ValueError("trajectory is not sampled at a fixed period")
        if len(P) < 2:
            continue
        Xs.append(_map_inputs(P[:-1], V[:-1], input_map))
        Ys.append(V[1:] - V[:-1])
    if not Xs:
        raise ValueError("no trajectory with at least two samples")
    return GPDataset(np.concatenate(Xs), np.concatenate(Ys))


# --------------------------------------------------------------------------- #
# dynamics model


class ThrowDynamicsModel(BaseEstimator):
    """Three independent GPs over the velocity increment plus speed integration.

    Parameters
    ----------
    T_s : float, default=0.01
        Sampling period of the trajectories.
    input_map : {"velocity", "state"}, default="velocity"
        GP input: the velocity alone, or position and velocity.
    n_iter : int, default=500
        Marginal-likelihood iterations per output.
    max_points : int, default=0
        If positive, keep at most this many training rows (even stride).
    center : bool, default=True
        Use the sample mean of each output as a constant prior mean.  Away
        from the data the model then falls back to the average increment
        (gravity, mostly) instead of to zero.
    """

    def __init__(self, T_s: float = 0.01, input_map: str = "velocity", n_iter: int = 500,
                 max_points: int = 0, center: bool = True):
        self.T_s = T_s
        self.input_map = input_map
        self.n_iter = n_iter
        self.max_points = max_points
        self.center = center

    def fit(self, data, y=None):
        """Fit on a :class:`GPDataset`, a list of trajectories, or arrays ``(X, Y)``."""
        if isinstance(data, GPDataset):
            ds = data
        elif y is not None:
            ds = GPDataset(data, y)
        else:
            ds = build_dataset(data, self.input_map, self.T_s)
        X, Y = ds.X, ds.Y
        if Y.shape[1] != 3:
            raise ValueError("need three output columns (velocity increments)")
        expected = 3 if self.input_map == "velocity" else 6
        if X.shape[1] != expected:
            raise ValueError(f"input map {self.input_map!r} expects {expected} columns, got {X.shape[1]}")
        if self.max_points and len(X) > self.max_points:
            idx = np.unique(np.linspace(0, len(X) - 1, self.max_points).round().astype(int))
            X, Y = X[idx], Y[idx]
        self.prior_mean_ = Y.mean(axis=0) if self.center else np.zeros(3)
        Yc = Y - self.prior_mean_
        self.gps_ = [GaussianProcess(n_iter=self.n_iter).fit(X, Yc[:, k]) for k in range(3)]
        self.dataset_ = GPDataset(X, Y)
        self._torch_cache = None
        return self

    @classmethod
    def from_hyper(cls, dataset: GPDataset, hypers, T_s=0.01, input_map="velocity", center=True):
        model = cls(T_s=T_s, input_map=input_map, n_iter=0, center=center)
        model.prior_mean_ = dataset.Y.mean(axis=0) if center else np.zeros(3)
        Yc = dataset.Y - model.prior_mean_
        model.gps_ = [GaussianProcess.from_hyper(dataset.X, Yc[:, k], h) for k, h in enumerate(hypers)]
        model.dataset_ = dataset
        model._torch_cache = None
        return model

    @property
    def hypers(self):
        check_is_fitted(self, "gps_")
        return [gp.hyper_ for gp in self.gps_]

    def inputs_of(self, P, V):
        return _map_inputs(np.asarray(P, dtype=float), np.asarray(V, dtype=float), self.input_map)

    def predict_delta(self, X):
        """Mean and variance ``(n, 3)`` of the velocity increment at GP inputs ``X``."""
        check_is_fitted(self, "gps_")
        X = np.atleast_2d(X)
        out = [gp.predict(X, return_var=True) for gp in self.gps_]
        return np.column_stack([m for m, _ in out]) + self.prior_mean_, np.column_stack([v for _, v in out])

    def predict(self, X):
        return self.predict_delta(X)[0]

    def one_step(self, state: CartesianState, T_s: float | None = None):
        """Gaussian one-step prediction ``(mu, Sigma)`` of the 6-D state."""
        T = self.T_s if T_s is None else T_s
        if T == 0:
            return state.as_vector(), np.zeros((6, 6))
        m, s = self.predict_delta(self.inputs_of(state.p, state.v)[None, :])
        m, s = m[0], s[0]
        mu = np.concatenate([state.p + T * state.v + 0.5 * T * m, state.v + m])
        B = np.array([[T * T / 4.0, T / 2.0], [T / 2.0, 1.0]])
        return mu, np.kron(B, np.diag(s))

    # torch path used by the particle rollout --------------------------------

    def torch_cache(self):
        """Stacked per-output tensors: inverse lengthscales, scales, weights, inverse factors."""
        check_is_fitted(self, "gps_")
        if getattr(self, "_torch_cache", None) is None:
            f64 = torch.float64
            inv_ls = np.stack([1.0 / gp.hyper_.lengthscales for gp in self.gps_])
            lam2 = np.array([gp.hyper_.lam**2 for gp in self.gps_])
            alpha = np.stack([gp.alpha_ for gp in self.gps_])
            Linv = np.stack([
                scipy.linalg.solve_triangular(gp.L_, np.eye(len(gp.alpha_)), lower=True) for gp in self.gps_
            ])
            self._torch_cache = tuple(
                torch.as_tensor(a, dtype=f64)
                for a in (self.dataset_.X, inv_ls, lam2, alpha, Linv, self.prior_mean_)
            )
        return self._torch_cache

    def predict_delta_torch(self, inputs: torch.Tensor):
        """Differentiable mean and variance ``(M, 3)`` at GP inputs ``(M, D)``."""
        X, inv_ls, lam2, alpha, Linv, mu0 = self.torch_cache()
        A = inputs[None, :, :] * inv_ls[:, None, :]
        B = X[None, :, :] * inv_ls[:, None, :]
        sq = (A * A).sum(-1)[:, :, None] + (B * B).sum(-1)[:, None, :] - 2.0 * A @ B.transpose(1, 2)
        K = lam2[:, None, None] * torch.exp(-torch.clamp(sq, min=0.0))
        mean = (K @ alpha[:, :, None])[..., 0]
        V = K @ Linv.transpose(1, 2)
        var = torch.clamp(lam2[:, None] - (V * V).sum(-1), min=0.0)
        return mean.T + mu0, var.T

    # serialization -----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "gps_")
        ds = self.dataset_
        lines = [
            "# mcpilot dynamics model",
            f"T_s {self.T_s!r}",
            f"input_map {self.input_map}",
            f"n {len(ds)}",
            f"dim {ds.X.shape[1]}",
            f"center {int(self.center)}",
        ]
        for k, h in enumerate(self.hypers):
            vals = " ".join(repr(float(v)) for v in (h.lam, *h.lengthscales, h.noise))
            lines.append(f"hyper{k} {vals}")
        for x, yrow in zip(ds.X, ds.Y):
            lines.append("row " + " ".join(repr(float(v)) for v in (*x, *yrow)))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ThrowDynamicsModel":
        meta, hypers, rows = {}, {}, []
        with open(path) as fh:
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                key, *vals = line.split()
                if key == "row":
                    rows.append([float(v) for v in vals])
                elif key.startswith("hyper"):
                    v = [float(s) for s in vals]
                    hypers[int(key[5:])] = GPHyper(v[0], np.array(v[1:-1]), v[-1])
                else:
                    meta[key] = vals[0]
        dim = int(meta["dim"])
        arr = np.array(rows, dtype=float).reshape(int(meta["n"]), dim + 3)
        ds = GPDataset(arr[:, :dim], arr[:, dim:])
        return cls.from_hyper(ds, [hypers[k] for k in range(3)], float(meta["T_s"]), meta["input_map"],
                              meta.get("center", "1") == "1")
