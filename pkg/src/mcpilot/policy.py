"""Squashed radial-basis-function release-speed policy.

    v(P) = u_M / 2 * (tanh(sum_i w_i / u_M * exp(-(a_i - P)^T S (a_i - P))) + 1)

with ``S`` the diagonal shape matrix.  The output always lies in ``(0, u_M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .core import TargetDomain, TargetPoint, as_generator

__all__ = [
    "RBFPolicy",
    "init_policy",
    "policy_eval",
    "apply_dropout",
    "policy_forward_torch",
    "MAX_DROPOUT",
]

MAX_DROPOUT = 0.9


@dataclass(frozen=True)
class RBFPolicy:
    weights: np.ndarray
    centers: np.ndarray
    shape: np.ndarray
    u_M: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        A = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        S = np.asarray(self.shape, dtype=float).ravel()
        if A.shape[0] != w.shape[0]:
            raise ValueError("one center per weight required")
        if S.shape != (3,) or np.any(S <= 0):
            raise ValueError("shape must be a positive 3-vector (diagonal of the shape matrix)")
        if self.u_M <= 0:
            raise ValueError("u_M must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", A)
        object.__setattr__(self, "shape", S)

    @property
    def n_basis(self) -> int:
        return self.weights.shape[0]

    def __call__(self, P):
        return policy_eval(self, P)

    def save(self, path) -> None:
        lines = ["# mcpilot rbf policy", f"u_M {self.u_M!r}", "shape " + " ".join(repr(float(s)) for s in self.shape)]
        for w, a in zip(self.weights, self.centers):
            lines.append("basis " + " ".join(repr(float(v)) for v in (w, *a)))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RBFPolicy":
        u_M, shape, rows = None, None, []
        with open(path) as fh:
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                key, *vals = line.split()
                if key == "u_M":
                    u_M = float(vals[0])
                elif key == "shape":
                    shape = np.array([float(v) for v in vals])
                elif key == "basis":
                    rows.append([float(v) for v in vals])
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1:], shape, u_M)


def init_policy(domain: TargetDomain, u_M: float, N_b: int, rng, shape: float = 0.5,
                weight_scale: float = 1.0) -> RBFPolicy:
    """Random weights in ``weight_scale * [-u_M, u_M]`` and centers in the box enclosing the domain.

    With many wide bases the full range saturates the squashing at start;
    ``weight_scale = 1 / sqrt(N_b)`` keeps the initial activation near unit scale.
    """
    if N_b < 1:
        raise ValueError("N_b must be at least 1")
    if not (0.0 < weight_scale <= 1.0):
        raise ValueError("weight_scale must lie in (0, 1]")
    gen = as_generator(rng)
    (x0, x1), (y0, y1) = domain.superset_bounds()
    w = weight_scale * gen.uniform(-u_M, u_M, size=N_b)
    A = np.column_stack([gen.uniform(x0, x1, size=N_b), gen.uniform(y0, y1, size=N_b), np.full(N_b, domain.z_P)])
    return RBFPolicy(w, A, np.full(3, shape), u_M)


def policy_eval(policy: RBFPolicy, P):
    """Release speed for one target or an ``(n, 3)`` batch."""
    P = P.as_array() if isinstance(P, TargetPoint) else np.asarray(P, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    d = policy.centers[None, :, :] - P[:, None, :]
    phi = np.exp(-np.einsum("nbk,k,nbk->nb", d, policy.shape, d))
    v = 0.5 * policy.u_M * (np.tanh(phi @ policy.weights / policy.u_M) + 1.0)
    return float(v[0]) if single else v


def apply_dropout(policy: RBFPolicy, p_drop: float, rng) -> RBFPolicy:
    """Zero each weight with probability ``p_drop``; rescale the survivors."""
    if not (0.0 <= p_drop <= MAX_DROPOUT):
        raise ValueError(f"dropout probability must lie in [0, {MAX_DROPOUT}], got {p_drop}")
    if p_drop == 0.0:
        return policy
    mask = as_generator(rng).random(policy.n_basis) >= p_drop
    return replace(policy, weights=policy.weights * mask / (1.0 - p_drop))


def policy_forward_torch(w: torch.Tensor, A: torch.Tensor, log_shape: torch.Tensor, u_M: float,
                         P: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable batched policy; ``mask`` holds the dropout scaling per weight."""
    if mask is not None:
        w = w * mask
    d = A[None, :, :] - P[:, None, :]
    phi = torch.exp(-(d * d * torch.exp(log_shape)).sum(-1))
    return 0.5 * u_M * (torch.tanh(phi @ w / u_M) + 1.0)
