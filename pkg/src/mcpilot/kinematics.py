"""Serial-arm kinematics, throwing trajectories and the release-state map.

The arm is a 7-DoF manipulator described with modified (Craig) DH
parameters, one row ``(a_{i-1}, d_i, alpha_{i-1})`` per joint plus a fixed
flange row.  The world frame sits on the vertical base axis, at ground
level, yawed by ``base_yaw`` with respect to the first link frame.

Everything that feeds the particle optimizer has a batched torch
implementation so gradients flow from the commanded release speed to the
object's release state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import ReleaseGeometry

__all__ = [
    "ArmModel",
    "ThrowTiming",
    "ThrowPlan",
    "ReleaseState",
    "InfeasibleThrowError",
    "JointLimitError",
    "forward_kinematics",
    "analytical_jacobian",
    "release_joint_state",
    "plan_throw",
    "release_state_h",
    "release_states_torch",
    "quintic_coefficients",
    "quintic_evaluate",
    "max_release_speed",
]

# Manufacturer-published table of the Panda arm; last row is the flange.
PANDA_DH = np.array(
    [
        # a       d       alpha
        [0.0, 0.333, 0.0],
        [0.0, 0.0, -math.pi / 2],
        [0.0, 0.316, math.pi / 2],
        [0.0825, 0.0, math.pi / 2],
        [-0.0825, 0.384, -math.pi / 2],
        [0.0, 0.0, math.pi / 2],
        [0.088, 0.0, math.pi / 2],
        [0.0, 0.107, 0.0],
    ]
)

PANDA_LIMITS = {
    "q_min": (-2.8973, -1.7628, -2.8973, -3.0718, -2.8973, -0.0175, -2.8973),
    "q_max": (2.8973, 1.7628, 2.8973, -0.0698, 2.8973, 3.7525, 2.8973),
    "qd_max": (2.1750, 2.1750, 2.1750, 2.1750, 2.6100, 2.6100, 2.6100),
    "qdd_max": (15.0, 7.5, 10.0, 12.5, 15.0, 20.0, 20.0),
}

# Looser envelope for the simulated arm: the Panda's velocity limits cap the
# release speed below the 3.5 m/s used in simulation.
RELAXED_LIMITS = {
    "q_min": (-2.8973, -1.7837, -2.9007, -3.0718, -2.8973, -0.0175, -3.0159),
    "q_max": (2.8973, 1.7837, 2.9007, -0.0698, 2.8973, 4.5169, 3.0159),
    "qd_max": (2.62, 2.62, 2.62, 2.62, 5.26, 4.18, 5.26),
    "qdd_max": (15.0, 10.0, 10.0, 12.5, 15.0, 20.0, 20.0),
}

Q_RELEASE = (0.0, -25.0 / 180.0 * math.pi, 0.0, -math.pi / 4, 0.0, math.pi, 0.0)
QDOT_DIRECTION = (0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0)


class JointLimitError(ValueError):
    pass


class InfeasibleThrowError(ValueError):
    """A throw plan violates a joint limit; ``joint`` is 1-based."""

    def __init__(self, message: str, joint: int | None = None):
        super().__init__(message)
        self.joint = joint


@dataclass(frozen=True)
class ArmModel:
    dh: np.ndarray = field(default_factory=lambda: PANDA_DH.copy())
    tool_length: float = 0.0
    base_height: float = 0.0
    base_yaw: float = math.pi
    q_release: tuple = Q_RELEASE
    qdot_direction: tuple = QDOT_DIRECTION
    q_min: tuple = PANDA_LIMITS["q_min"]
    q_max: tuple = PANDA_LIMITS["q_max"]
    qd_max: tuple = PANDA_LIMITS["qd_max"]
    qdd_max: tuple = PANDA_LIMITS["qdd_max"]

    def __post_init__(self):
        dh = np.asarray(self.dh, dtype=float)
        if dh.shape != (8, 3):
            raise ValueError(f"DH table must be 8x3 (7 joints + flange), got {dh.shape}")
        object.__setattr__(self, "dh", dh)
        qs = np.asarray(self.qdot_direction, dtype=float)
        if np.any(qs[[0, 2, 4, 6]] != 0):
            raise ValueError("joints 1, 3, 5 and 7 must be motionless during the throw")

    def __hash__(self):
        return hash((self.dh.tobytes(), self.tool_length, self.base_height, self.base_yaw,
                     self.q_release, self.qdot_direction))

    def __eq__(self, other):
        return isinstance(other, ArmModel) and hash(self) == hash(other)

    @classmethod
    def calibrated(cls, l_r: float = 0.07, z_rel: float = 1.50, **kwargs) -> "ArmModel":
        """Solve tool length and mounting height so the release point is ``(l_r, 0, z_rel)``.

        The tool offset acts along the flange z-axis, so the radial position
        is affine in ``tool_length``; the height is then matched by the base.
        """
        arm = cls(tool_length=0.0, base_height=0.0, **kwargs)
        q = arm.release_configuration(0.0)
        p0 = forward_kinematics(q, arm, check_limits=False)
        p1 = forward_kinematics(q, replace(arm, tool_length=1.0), check_limits=False)
        slope = p1[0] - p0[0]
        if abs(slope) < 1e-9:
            raise ValueError("tool axis is vertical at the release configuration; cannot calibrate l_r")
        tool = (l_r - p0[0]) / slope
        arm = replace(arm, tool_length=float(tool))
        p = forward_kinematics(q, arm, check_limits=False)
        return replace(arm, base_height=float(z_rel - p[2]))

    def with_limits(self, limits: dict) -> "ArmModel":
        return replace(self, **{k: tuple(v) for k, v in limits.items()})

    def release_configuration(self, gamma: float) -> np.ndarray:
        q = np.array(self.q_release, dtype=float)
        q[0] = gamma
        return q

    def reference_velocity(self) -> np.ndarray:
        """``v* = J_a(q_rel) qdot*`` at bearing zero."""
        q = self.release_configuration(0.0)
        return analytical_jacobian(q, self, check_limits=False) @ np.asarray(self.qdot_direction)

    def release_geometry(self) -> ReleaseGeometry:
        """Release radius, height and the arm's intrinsic elevation angle."""
        p = forward_kinematics(self.release_configuration(0.0), self, check_limits=False)
        v = self.reference_velocity()
        alpha = math.atan2(v[2], math.hypot(v[0], v[1]))
        return ReleaseGeometry(l_r=float(math.hypot(p[0], p[1])), z_rel=float(p[2]), alpha=alpha)

    def check_limits(self, q, tol: float = 1e-9) -> None:
        q = np.asarray(q, dtype=float)
        lo = np.asarray(self.q_min) - tol
        hi = np.asarray(self.q_max) + tol
        bad = np.nonzero(np.any((q < lo) | (q > hi), axis=tuple(range(q.ndim - 1))))[0]
        if bad.size:
            j = int(bad[0])
            raise JointLimitError(
                f"joint {j + 1} outside [{self.q_min[j]}, {self.q_max[j]}]"
            )


# --------------------------------------------------------------------------- #
# forward kinematics


def _dh_transform(a, d, alpha, theta):
    """Batched modified-DH link transform, ``theta`` of shape ``(...)``."""
    ct, st = torch.cos(theta), torch.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    zero = torch.zeros_like(theta)
    one = torch.ones_like(theta)
    rows = [
        torch.stack([ct, -st, zero, zero + a], -1),
        torch.stack([st * ca, ct * ca, zero - sa, zero - d * sa], -1),
        torch.stack([st * sa, ct * sa, zero + ca, zero + d * ca], -1),
        torch.stack([zero, zero, zero, one], -1),
    ]
    return torch.stack(rows, -2)


def _frames_torch(q: torch.Tensor, arm: ArmModel):
    """Joint frames (origin, z-axis) in world coordinates and the tool point."""
    batch = q.shape[:-1]
    cy, sy = math.cos(arm.base_yaw), math.sin(arm.base_yaw)
    base = torch.tensor(
        [[cy, -sy, 0.0, 0.0], [sy, cy, 0.0, 0.0], [0.0, 0.0, 1.0, arm.base_height], [0.0, 0.0, 0.0, 1.0]],
        dtype=q.dtype,
    ).expand(*batch, 4, 4)
    M = base
    origins, axes = [], []
    for i in range(7):
        a, d, al = arm.dh[i]
        M = M @ _dh_transform(a, d, al, q[..., i])
        origins.append(M[..., :3, 3])
        axes.append(M[..., :3, 2])
    a, d, al = arm.dh[7]
    M = M @ _dh_transform(a, d + arm.tool_length, al, torch.zeros_like(q[..., 0]))
    return origins, axes, M[..., :3, 3]


def fk_torch(q: torch.Tensor, arm: ArmModel) -> torch.Tensor:
    return _frames_torch(q, arm)[2]


def fk_and_jacobian_torch(q: torch.Tensor, arm: ArmModel):
    """Tool position ``(..., 3)`` and position Jacobian ``(..., 3, 7)``."""
    origins, axes, tip = _frames_torch(q, arm)
    cols = [torch.linalg.cross(z, tip - o, dim=-1) for z, o in zip(axes, origins)]
    return tip, torch.stack(cols, -1)


def forward_kinematics(q, arm: ArmModel, check_limits: bool = True) -> np.ndarray:
    """Tool-tip position in the world frame for joint angles ``q``."""
    q = np.asarray(q, dtype=float)
    if check_limits:
        arm.check_limits(q)
    return fk_torch(torch.as_tensor(q, dtype=torch.float64), arm).numpy()


def analytical_jacobian(q, arm: ArmModel, check_limits: bool = True) -> np.ndarray:
    """``d f_kin / d q``, a ``3 x 7`` matrix (``(..., 3, 7)`` when batched)."""
    q = np.asarray(q, dtype=float)
    if check_limits:
        arm.check_limits(q)
    return fk_and_jacobian_torch(torch.as_tensor(q, dtype=torch.float64), arm)[1].numpy()


def max_release_speed(arm: ArmModel) -> float:
    """Largest release speed allowed by the joint velocity limits."""
    qs = np.abs(np.asarray(arm.qdot_direction))
    moving = qs > 0
    ratio = np.asarray(arm.qd_max)[moving] / qs[moving]
    return float(np.min(ratio) * np.linalg.norm(arm.reference_velocity()))


def release_joint_state(gamma: float, v: float, arm: ArmModel) -> tuple[np.ndarray, np.ndarray]:
    """Release configuration and joint velocities yielding speed ``v`` along the release direction."""
    if v < 0:
        raise ValueError("release speed must be nonnegative")
    vmax = max_release_speed(arm)
    if v > vmax * (1 + 1e-12):
        raise InfeasibleThrowError(f"speed {v:.4g} m/s exceeds the joint-velocity bound {vmax:.4g} m/s")
    q = arm.release_configuration(gamma)
    qs = np.asarray(arm.qdot_direction, dtype=float)
    return q, qs / np.linalg.norm(arm.reference_velocity()) * v


# --------------------------------------------------------------------------- #
# trajectories


def quintic_coefficients(p0, v0, a0, p1, v1, a1, T):
    """Coefficients ``c0..c5`` of the quintic meeting both boundary triples.

    Works elementwise on floats, numpy arrays or torch tensors.
    """
    h = p1 - p0
    T2, T3 = T * T, T * T * T
    c0, c1, c2 = p0, v0, a0 / 2.0
    c3 = (20.0 * h - (8.0 * v1 + 12.0 * v0) * T - (3.0 * a0 - a1) * T2) / (2.0 * T3)
    c4 = (-30.0 * h + (14.0 * v1 + 16.0 * v0) * T + (3.0 * a0 - 2.0 * a1) * T2) / (2.0 * T3 * T)
    c5 = (12.0 * h - 6.0 * (v1 + v0) * T + (a1 - a0) * T2) / (2.0 * T3 * T2)
    return c0, c1, c2, c3, c4, c5


def quintic_evaluate(coeffs, tau):
    """Position, velocity and acceleration at local time ``tau``."""
    c0, c1, c2, c3, c4, c5 = coeffs
    pos = c0 + tau * (c1 + tau * (c2 + tau * (c3 + tau * (c4 + tau * c5))))
    vel = c1 + tau * (2 * c2 + tau * (3 * c3 + tau * (4 * c4 + tau * 5 * c5)))
    acc = 2 * c2 + tau * (6 * c3 + tau * (12 * c4 + tau * 20 * c5))
    return pos, vel, acc


@dataclass(frozen=True)
class ThrowTiming:
    """Nominal release time and the braking duration after release."""

    t_release: float = 0.48
    t_brake: float = 0.40

    @property
    def duration(self) -> float:
        return self.t_release + self.t_brake


@dataclass(frozen=True)
class ReleaseState:
    position: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class ThrowPlan:
    gamma: float
    speed: float
    t_release: float
    t_command: float
    t_brake: float
    q_release: np.ndarray
    qd_release: np.ndarray
    accelerate: tuple  # quintic coefficients, each a length-7 array
    brake: tuple

    @property
    def duration(self) -> float:
        return self.t_release + self.t_brake

    def joint_state(self, t: float):
        """Joint position, velocity and acceleration at robot time ``t``."""
        if not (-1e-12 <= t <= self.duration + 1e-12):
            raise ValueError(f"t={t} outside the trajectory [0, {self.duration}]")
        if t <= self.t_release:
            return quintic_evaluate(self.accelerate, t)
        return quintic_evaluate(self.brake, t - self.t_release)


def _segment_boundaries(q_rel, qd_rel, timing: ThrowTiming):
    """Rest configurations before and after release.

    The rest offsets scale with the release joint velocity, which makes the
    accelerating profile a smoothstep in velocity: monotone, peaking at the
    release instant with zero acceleration there.
    """
    q_start = q_rel - qd_rel * (timing.t_release / 2.0)
    q_end = q_rel + qd_rel * (timing.t_brake / 2.0)
    return q_start, q_end


def _segments(q_rel, qd_rel, timing: ThrowTiming):
    q_start, q_end = _segment_boundaries(q_rel, qd_rel, timing)
    zero = q_rel * 0.0
    acc = quintic_coefficients(q_start, zero, zero, q_rel, qd_rel, zero, timing.t_release)
    brk = quintic_coefficients(q_rel, qd_rel, zero, q_end, zero, zero, timing.t_brake)
    return acc, brk


def plan_throw(gamma: float, v: float, arm: ArmModel, timing: ThrowTiming = ThrowTiming(),
               t_command: float | None = None, check: bool = True) -> ThrowPlan:
    """Two quintic segments per joint: accelerate to the release state, then brake to rest."""
    q_rel, qd_rel = release_joint_state(gamma, v, arm)
    acc, brk = _segments(q_rel, qd_rel, timing)
    t_cmd = timing.t_release if t_command is None else float(t_command)
    # a negative delay estimate moves the command after the nominal release
    if not (0.0 <= t_cmd <= timing.duration + 1e-12):
        raise ValueError(f"command time {t_cmd} outside the trajectory [0, {timing.duration}]")
    plan = ThrowPlan(
        gamma=float(gamma),
        speed=float(v),
        t_release=timing.t_release,
        t_command=t_cmd,
        t_brake=timing.t_brake,
        q_release=q_rel,
        qd_release=qd_rel,
        accelerate=tuple(np.asarray(c, dtype=float) for c in acc),
        brake=tuple(np.asarray(c, dtype=float) for c in brk),
    )
    if check:
        _check_plan(plan, arm)
    return plan


def _check_plan(plan: ThrowPlan, arm: ArmModel, n: int = 121) -> None:
    ts = np.linspace(0.0, plan.duration, n)
    states = [plan.joint_state(t) for t in ts]
    q = np.array([s[0] for s in states])
    qd = np.array([s[1] for s in states])
    qdd = np.array([s[2] for s in states])
    for name, arr, lo, hi in (
        ("position", q, np.asarray(arm.q_min), np.asarray(arm.q_max)),
        ("velocity", qd, -np.asarray(arm.qd_max), np.asarray(arm.qd_max)),
        ("acceleration", qdd, -np.asarray(arm.qdd_max), np.asarray(arm.qdd_max)),
    ):
        bad = np.nonzero(np.any((arr < lo - 1e-9) | (arr > hi + 1e-9), axis=0))[0]
        if bad.size:
            j = int(bad[0])
            raise InfeasibleThrowError(
                f"joint {j + 1} violates its {name} limit for v={plan.speed:.4g} m/s", joint=j + 1
            )


def release_state_h(plan: ThrowPlan, t: float, arm: ArmModel) -> ReleaseState:
    """Object state if released at robot time ``t`` along ``plan``."""
    if not (0.0 <= t <= plan.duration + 1e-12):
        raise ValueError(f"release time {t} outside [0, {plan.duration}]")
    q, qd, _ = plan.joint_state(min(t, plan.duration))
    p, J = fk_and_jacobian_torch(torch.as_tensor(q, dtype=torch.float64), arm)
    return ReleaseState(position=p.numpy(), velocity=J.numpy() @ qd)


def release_states_torch(gamma: torch.Tensor, speed: torch.Tensor, t: torch.Tensor,
                         arm: ArmModel, timing: ThrowTiming = ThrowTiming()):
    """Batched, differentiable release states ``(p, v)`` of shape ``(M, 3)``.

    ``gamma``, ``speed`` and ``t`` have shape ``(M,)``; ``t`` is clamped to
    the trajectory span.
    """
    dtype = speed.dtype
    q_tmpl = torch.tensor(arm.q_release, dtype=dtype)
    qs = torch.tensor(arm.qdot_direction, dtype=dtype) / float(np.linalg.norm(arm.reference_velocity()))
    q_rel = q_tmpl.expand(speed.shape[0], 7).clone()
    q_rel[:, 0] = gamma
    qd_rel = speed[:, None] * qs
    acc, brk = _segments(q_rel, qd_rel, timing)
    t = torch.clamp(t, 0.0, timing.duration)[:, None]
    q1, qd1, _ = quintic_evaluate(acc, torch.clamp(t, max=timing.t_release))
    q2, qd2, _ = quintic_evaluate(brk, torch.clamp(t - timing.t_release, min=0.0))
    before = t <= timing.t_release
    q = torch.where(before, q1, q2)
    qd = torch.where(before, qd1, qd2)
    p, J = fk_and_jacobian_torch(q, arm)
    return p, (J @ qd[..., None])[..., 0]
