"""Ground-truth throwing world: delayed gripper release and free flight with drag.

This module is the only place that knows the true release-delay law.
Learners see :class:`ThrowRecord` objects and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CartesianState, PhysicalConstants, TargetPoint, as_generator
from .kinematics import ArmModel, ThrowPlan, release_state_h

__all__ = [
    "DragModel",
    "WorldConfig",
    "Trajectory",
    "ThrowRecord",
    "WorldError",
    "sphere_drag_coefficient",
    "drag_acceleration",
    "execute_throw",
    "execute_throws",
    "landing_of",
    "write_throw_csv",
    "read_throw_csv",
]


class WorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class DragModel:
    """Drag on a sphere of radius ``radius`` and mass ``mass``.

    ``correlation`` is ``"almedeij"`` for the Reynolds-dependent sphere
    correlation or ``"constant"`` for a fixed ``cd_constant``.
    """

    radius: float = 0.0215
    mass: float = 0.02
    correlation: str = "almedeij"
    cd_constant: float = 0.47
    enabled: bool = True

    def __post_init__(self):
        if self.radius <= 0 or self.mass <= 0:
            raise ValueError("radius and mass must be positive")
        if self.correlation not in ("almedeij", "constant"):
            raise ValueError(f"unknown drag correlation {self.correlation!r}")

    @property
    def area(self) -> float:
        return math.pi * self.radius**2


@dataclass(frozen=True)
class WorldConfig:
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    drag: DragModel = field(default_factory=DragModel)
    delay_lo: float = 0.01
    delay_hi: float = 0.02
    dt: float = 0.001
    T_s: float = 0.01
    z_P: float = 0.0
    hit_radius: float = 0.1
    max_time: float = 5.0

    def __post_init__(self):
        if not (0 <= self.delay_lo <= self.delay_hi):
            raise ValueError("need 0 <= delay_lo <= delay_hi")
        if self.dt <= 0 or self.dt > self.T_s:
            raise ValueError("integrator step must be positive and no larger than T_s")
        ratio = self.T_s / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("T_s must be an integer multiple of the integrator step")


@dataclass(frozen=True)
class Trajectory:
    """Free-flight samples at a fixed period, release at ``times[0]``."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory samples must be strictly time-ordered")

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class ThrowRecord:
    """One executed throw as seen by the learner: command, trajectory and landing."""

    speed: float
    gamma: float
    target: TargetPoint
    t_command: float
    release: CartesianState
    trajectory: Trajectory
    landing: np.ndarray
    hit: bool
    seed: int | None = None

    @property
    def error(self) -> float:
        return float(math.hypot(self.landing[0] - self.target.x, self.landing[1] - self.target.y))


# --------------------------------------------------------------------------- #
# drag


def sphere_drag_coefficient(re):
    """Sphere drag coefficient over the full Reynolds range.

    Asymptotic-matching correlation of Almedeij (2008), valid from Stokes
    flow through the drag crisis.
    """
    re = np.asarray(re, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        phi1 = (24.0 / re) ** 10 + (21.0 / re**0.67) ** 10 + (4.0 / re**0.33) ** 10 + 0.4**10
        phi2 = 1.0 / ((0.148 * re**0.11) ** -10 + 0.5**-10)
        phi3 = (1.57e8 / re**1.625) ** 10
        phi4 = 1.0 / ((6e-17 * re**2.63) ** -10 + 0.2**-10)
        cd = (1.0 / (1.0 / (phi1 + phi2) + 1.0 / phi3) + phi4) ** 0.1
    return cd


def _drag_accel(vel: np.ndarray, drag: DragModel, constants: PhysicalConstants) -> np.ndarray:
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    if drag.correlation == "constant":
        cd = np.full_like(speed, drag.cd_constant)
    else:
        re = speed * 2.0 * drag.radius / constants.nu
        cd = np.where(re > 1e-12, sphere_drag_coefficient(np.maximum(re, 1e-12)), 0.0)
    return -0.5 * constants.rho * cd * drag.area * speed * vel / drag.mass


def drag_acceleration(state: CartesianState, drag: DragModel,
                      constants: PhysicalConstants = PhysicalConstants()) -> np.ndarray:
    """Drag force divided by mass, opposite to the velocity."""
    if not drag.enabled:
        return np.zeros(3)
    return _drag_accel(state.v[None, :], drag, constants)[0]


def _derivative(x: np.ndarray, world: WorldConfig) -> np.ndarray:
    vel = x[:, 3:]
    acc = np.zeros_like(vel)
    acc[:, 2] = -world.constants.g
    if world.drag.enabled:
        acc = acc + _drag_accel(vel, world.drag, world.constants)
    return np.concatenate([vel, acc], axis=1)


# --------------------------------------------------------------------------- #
# landing


def landing_of(times, positions, z_P: float, velocities=None):
    """First downward crossing of the plane ``z = z_P``, linearly interpolated.

    Returns ``(t, position)`` or ``(t, position, velocity)`` when velocities
    are given.
    """
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    z = positions[:, 2] - z_P
    idx = np.nonzero(z <= 0.0)[0]
    if idx.size == 0:
        raise WorldError("trajectory never reaches the landing plane")
    k = int(idx[0])
    if z[k] == 0.0 or k == 0:
        out = (times[k], positions[k].copy())
        return out if velocities is None else out + (np.asarray(velocities)[k].copy(),)
    w = z[k - 1] / (z[k - 1] - z[k])
    t = times[k - 1] + w * (times[k] - times[k - 1])
    p = positions[k - 1] + w * (positions[k] - positions[k - 1])
    if velocities is None:
        return t, p
    velocities = np.asarray(velocities)
    return t, p, velocities[k - 1] + w * (velocities[k] - velocities[k - 1])


# --------------------------------------------------------------------------- #
# execution


def _fly(x0: np.ndarray, z_planes: np.ndarray, world: WorldConfig):
    """Integrate a batch of free flights with fixed-step RK4 until each crosses its plane."""
    n = x0.shape[0]
    h = world.dt
    stride = int(round(world.T_s / h))
    max_steps = int(math.ceil(world.max_time / h))
    x = x0.copy()
    samples = [x.copy()]
    prev = x.copy()
    landed = np.zeros(n, dtype=bool)
    landing = np.full((n, 6), np.nan)
    landing_t = np.full(n, np.nan)
    below = x[:, 2] <= z_planes
    if np.any(below & (x[:, 2] < z_planes)):
        raise WorldError("release state below the landing plane")
    landing[below] = x[below]
    landing_t[below] = 0.0
    landed |= below
    # keep integrating until the first sample after landing is recorded too
    recorded = landed.copy()
    step = 0
    while not np.all(recorded):
        if step >= max_steps:
            raise WorldError(f"flight did not terminate within {world.max_time} s")
        k1 = _derivative(x, world)
        k2 = _derivative(x + 0.5 * h * k1, world)
        k3 = _derivative(x + 0.5 * h * k2, world)
        k4 = _derivative(x + h * k3, world)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        step += 1
        cross = (~landed) & (x[:, 2] <= z_planes)
        if np.any(cross):
            zp, zc = prev[cross, 2] - z_planes[cross], x[cross, 2] - z_planes[cross]
            w = np.where(zp - zc > 0, zp / np.where(zp - zc > 0, zp - zc, 1.0), 1.0)[:, None]
            landing[cross] = prev[cross] + w * (x[cross] - prev[cross])
            landing_t[cross] = (step - 1 + w[:, 0]) * h
            landed |= cross
        prev = x.copy()
        if step % stride == 0:
            samples.append(x.copy())
            recorded |= x[:, 2] <= z_planes
    return np.stack(samples, axis=1), landing_t, landing


def execute_throws(plans: list[ThrowPlan], targets, world: WorldConfig, arm: ArmModel, rng,
                   seed: int | None = None) -> list[ThrowRecord]:
    """Execute several throws; delays are drawn in plan order from ``rng``."""
    gen = as_generator(rng)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = len(plans)
    if targets.shape != (n, 3):
        raise ValueError("need one target per plan")
    delays = gen.uniform(world.delay_lo, world.delay_hi, size=n)
    x0 = np.zeros((n, 6))
    for i, (plan, d) in enumerate(zip(plans, delays)):
        t_rel = plan.t_command + d
        if t_rel > plan.duration:
            raise WorldError(f"release at t={t_rel:.3f} s after the trajectory ends")
        rs = release_state_h(plan, t_rel, arm)
        x0[i, :3], x0[i, 3:] = rs.position, rs.velocity
    samples, land_t, land = _fly(x0, targets[:, 2], world)
    records = []
    for i, plan in enumerate(plans):
        z = samples[i, :, 2] - targets[i, 2]
        below = np.nonzero(z <= 0.0)[0]
        # keep samples through the first one at or below the plane
        m = int(below[0]) + 1 if below.size else samples.shape[1]
        traj = Trajectory(
            times=np.arange(m) * world.T_s,
            positions=samples[i, :m, :3].copy(),
            velocities=samples[i, :m, 3:].copy(),
        )
        landing = land[i, :3].copy()
        err = math.hypot(landing[0] - targets[i, 0], landing[1] - targets[i, 1])
        records.append(
            ThrowRecord(
                speed=plan.speed,
                gamma=plan.gamma,
                target=TargetPoint.from_array(targets[i]),
                t_command=plan.t_command,
                release=CartesianState(x0[i, :3], x0[i, 3:]),
                trajectory=traj,
                landing=landing,
                hit=bool(err <= world.hit_radius),  # NaN compares False
                seed=seed,
            )
        )
    return records


def execute_throw(plan: ThrowPlan, world: WorldConfig, arm: ArmModel, rng, target=None,
                  seed: int | None = None) -> ThrowRecord:
    """Sample a release delay, release along ``plan`` and fly to the landing plane.

    Without ``target`` the record carries a NaN aim point on the world's
    ground plane and is never a hit.
    """
    if target is None:
        target = np.array([np.nan, np.nan, world.z_P])
    elif isinstance(target, TargetPoint):
        target = target.as_array()
    return execute_throws([plan], np.asarray(target, dtype=float)[None, :], world, arm, rng, seed)[0]


# --------------------------------------------------------------------------- #
# CSV


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def write_throw_csv(path, records: list[ThrowRecord]) -> None:
    """One block per throw: ``#`` metadata, samples, then the landing row."""
    lines = ["t,px,py,pz,vx,vy,vz,kind"]
    for i, rec in enumerate(records):
        tgt = rec.target
        lines.append(
            f"# throw={i} v={_fmt(rec.speed)} gamma={_fmt(rec.gamma)} target={_fmt(tgt.x)},{_fmt(tgt.y)},{_fmt(tgt.z)} "
            f"t_command={_fmt(rec.t_command)} seed={rec.seed} hit={int(rec.hit)}"
        )
        tr = rec.trajectory
        for t, p, v in zip(tr.times, tr.positions, tr.velocities):
            lines.append(",".join(_fmt(c) for c in (t, *p, *v)) + ",sample")
        lines.append(",".join(_fmt(c) for c in (float("nan"), *rec.landing, 0, 0, 0)) + ",landing")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_throw_csv(path, hit_radius: float = 0.1) -> list[ThrowRecord]:
    """Inverse of :func:`write_throw_csv` (values carry 9 significant digits)."""
    records = []
    meta, rows = None, []

    def flush(landing):
        tgt = np.array([float(c) for c in meta["target"].split(",")])
        arr = np.array(rows)
        traj = Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:7])
        err = math.hypot(landing[0] - tgt[0], landing[1] - tgt[1])
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        records.append(
            ThrowRecord(
                speed=float(meta["v"]),
                gamma=float(meta["gamma"]),
                target=TargetPoint.from_array(tgt),
                t_command=float(meta["t_command"]),
                release=CartesianState(arr[0, 1:4], arr[0, 4:7]),
                trajectory=traj,
                landing=landing,
                hit=bool(err <= hit_radius),
                seed=seed,
            )
        )

    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("t,px"):
            raise ValueError(f"{path}: not a throw CSV")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta = dict(tok.split("=", 1) for tok in line[1:].split())
                rows = []
                continue
            *vals, kind = line.split(",")
            if kind == "landing":
                flush(np.array([float(v) for v in vals[1:4]]))
            else:
                rows.append([float(v) for v in vals])
    return records
