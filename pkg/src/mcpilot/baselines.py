"""Comparison throwers: the closed-form ballistic policy and a feed-forward network."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import PhysicalConstants, ReleaseGeometry, TargetPoint, as_generator

__all__ = [
    "InfeasibleTargetError",
    "ballistic_policy",
    "BallisticPolicy",
    "RegressionSet",
    "MLPThrowPolicy",
    "train_mlp",
    "mlp_policy",
]


class InfeasibleTargetError(ValueError):
    pass


def ballistic_policy(P, geom: ReleaseGeometry, constants: PhysicalConstants = PhysicalConstants(),
                     u_M: float | None = None) -> float:
    """Drag-free release speed that lands on ``P`` from the nominal release point.

    Raises :class:`InfeasibleTargetError` when no speed reaches the target or
    when the speed exceeds ``u_M`` (if given).
    """
    P = P.as_array() if isinstance(P, TargetPoint) else np.asarray(P, dtype=float)
    ell = math.hypot(P[0], P[1])
    d = ell - geom.l_r
    if ell == 0.0:
        d = geom.l_r
    if abs(d) < 1e-15:
        return 0.0
    if d < 0:
        raise InfeasibleTargetError("target lies inside the release radius")
    ca = math.cos(geom.alpha)
    denom = 2.0 * ca * ca * (d * math.tan(geom.alpha) - P[2] + geom.z_rel)
    if denom <= 0:
        raise InfeasibleTargetError("target lies above every reachable parabola")
    v = math.sqrt(constants.g * d * d / denom)
    if u_M is not None and v > u_M:
        raise InfeasibleTargetError(f"required speed {v:.3f} m/s exceeds u_M = {u_M} m/s")
    return v


@dataclass(frozen=True)
class BallisticPolicy:
    """Callable ballistic thrower that clamps to ``u_M`` and counts clamped targets."""

    geom: ReleaseGeometry
    constants: PhysicalConstants = PhysicalConstants()
    u_M: float = 3.5

    def speed(self, P) -> tuple[float, bool]:
        v = ballistic_policy(P, self.geom, self.constants)
        return (self.u_M, True) if v > self.u_M else (v, False)

    def __call__(self, P):
        P = np.asarray(P.as_array() if isinstance(P, TargetPoint) else P, dtype=float)
        if P.ndim == 1:
            return self.speed(P)[0]
        return np.array([self.speed(row)[0] for row in P])


# --------------------------------------------------------------------------- #
# neural-network baseline


@dataclass(frozen=True)
class RegressionSet:
    """Landing points ``X`` of shape ``(n, 3)`` and applied speeds ``v``."""

    X: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, 3)
        v = np.asarray(self.v, dtype=float).ravel()
        if X.shape[0] != v.shape[0]:
            raise ValueError("one speed per landing point required")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "v", v)

    def __len__(self):
        return len(self.v)

    @classmethod
    def from_records(cls, records) -> "RegressionSet":
        return cls(np.array([r.landing for r in records]), np.array([r.speed for r in records]))

    def __add__(self, other: "RegressionSet") -> "RegressionSet":
        return RegressionSet(np.vstack([self.X, other.X]), np.concatenate([self.v, other.v]))

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "v"])
            for x, v in zip(self.X, self.v):
                w.writerow([format(c, ".9g") for c in (*x, v)])

    @classmethod
    def load(cls, path) -> "RegressionSet":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, :3], arr[:, 3])


class _Net(torch.nn.Module):
    def __init__(self, n_hidden_layers: int, width: int, u_M: float):
        super().__init__()
        layers, d = [], 3
        for _ in range(n_hidden_layers):
            layers += [torch.nn.Linear(d, width), torch.nn.ReLU()]
            d = width
        layers.append(torch.nn.Linear(d, 1))
        self.body = torch.nn.Sequential(*layers)
        self.u_M = u_M

    def forward(self, x):
        return 0.5 * self.u_M * (torch.tanh(self.body(x)[:, 0]) + 1.0)


class MLPThrowPolicy(RegressorMixin, BaseEstimator):
    """Landing point to release speed regression with ReLU hidden layers.

    Parameters
    ----------
    n_hidden_layers : int, default=2
        Number of hidden layers (1, 2 or 3).
    width : int, default=200
    u_M : float, default=3.5
        Output cap; outputs are squashed into ``(0, u_M)``.
    epochs : int, default=2000
        Full-batch Adam steps.
    lr : float, default=1e-3
    random_state : int, optional
    """

    def __init__(self, n_hidden_layers: int = 2, width: int = 200, u_M: float = 3.5, epochs: int = 2000,
                 lr: float = 1e-3, random_state: int | None = None):
        self.n_hidden_layers = n_hidden_layers
        self.width = width
        self.u_M = u_M
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_hidden_layers not in (1, 2, 3):
            raise ValueError("n_hidden_layers must be 1, 2 or 3")
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError("inputs must be 3-D landing points")
        seed = int(as_generator(self.random_state).integers(2**31))
        gen = torch.Generator().manual_seed(seed)
        net = _Net(self.n_hidden_layers, self.width, self.u_M).double()
        with torch.no_grad():
            for p in net.parameters():
                # default init, drawn from our own generator for reproducibility
                bound = 1.0 / math.sqrt(p.shape[-1]) if p.ndim > 1 else 0.1
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
        Xt = torch.as_tensor(X, dtype=torch.float64)
        yt = torch.as_tensor(y, dtype=torch.float64)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        losses = []
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = torch.mean((net(Xt) - yt) ** 2)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if not math.isfinite(losses[-1]):
                raise FloatingPointError("non-finite training loss")
        self.net_ = net
        self.loss_curve_ = losses
        self.n_features_in_ = 3
        return self

    @property
    def final_loss_(self) -> float:
        check_is_fitted(self, "net_")
        return self.loss_curve_[-1] if self.loss_curve_ else float("nan")

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        with torch.no_grad():
            return self.net_(torch.as_tensor(X, dtype=torch.float64)).numpy()

    def __call__(self, P):
        P = np.asarray(P.as_array() if isinstance(P, TargetPoint) else P, dtype=float)
        return float(self.predict(P[None, :])[0]) if P.ndim == 1 else self.predict(P)


def train_mlp(data: RegressionSet, N_h: int = 2, epochs: int = 2000, rng=None, lr: float = 1e-3,
              u_M: float = 3.5, width: int = 200) -> MLPThrowPolicy:
    if len(data) == 0:
        raise ValueError("empty regression set")
    seed = int(as_generator(rng).integers(2**31))
    return MLPThrowPolicy(N_h, width, u_M, epochs, lr, seed).fit(data.X, data.v)


def mlp_policy(model: MLPThrowPolicy, P) -> float:
    return model(P)


def random_throws(domain, n: int, u_M: float, rng):
    """Random bearings and speeds for collecting network training data."""
    gen = as_generator(rng)
    gamma = gen.uniform(-domain.gamma_max, domain.gamma_max, size=n)
    speed = gen.uniform(0.0, u_M, size=n)
    return gamma, speed
