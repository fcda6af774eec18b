"""Plain-text ``key = value`` configuration.

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected so
typos fail loudly.  Defaults reproduce the simulated setup; see the README
for the keys that differ from the published table.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields, replace
from functools import lru_cache

from .core import CostParams, PhysicalConstants, ReleaseGeometry, TargetDomain
from .kinematics import PANDA_LIMITS, RELAXED_LIMITS, ArmModel, ThrowTiming
from .world import DragModel, WorldConfig

__all__ = ["Config", "load_config", "parse_config", "dump_config"]


@dataclass(frozen=True)
class Config:
    # target domain
    l_m: float = 0.75
    l_M: float = 2.4
    gamma_M: float = math.pi / 6
    z_P: float = 0.0
    # release geometry; alpha = nan means "use the arm's intrinsic angle"
    l_r: float = 0.07
    z_rel: float = 3.0
    alpha: float = float("nan")
    # learning
    l_c: float = 0.1
    u_M: float = 3.5
    T_s: float = 0.01
    T: float = 1.0
    M: int = 400
    M_d: int = 10
    N_b: int = 250
    N_opt: int = 1500
    N_exp: int = 5
    N_a: int = 0
    N_test: int = 10
    N_trials: int = 1
    N_eval: int = 100
    seed: int = 0
    lr: float = 0.01
    p_drop: float = 0.25
    dropout_off: float = 0.25
    sigma_pi: float = 0.5
    # initial weight range as a fraction of u_M; nan means 1 / sqrt(N_b)
    w_init: float = float("nan")
    gp_iters: int = 500
    gp_input: str = "velocity"
    gp_max_points: int = 0
    use_delay: bool = True
    # delay estimation
    a_lo: float = -0.3
    a_hi: float = 0.3
    b_lo: float = 0.0
    b_hi: float = 0.01
    sigma_ucb: float = 2.0
    bo_init: int = 10
    bo_iter: int = 40
    bo_starts: int = 32
    # arm and trajectory
    t_release: float = 0.48
    t_brake: float = 0.40
    joint_limits: str = "relaxed"
    # simulator
    delay_lo: float = 0.01
    delay_hi: float = 0.02
    drag: bool = True
    drag_model: str = "almedeij"
    cd_constant: float = 0.47
    radius: float = 0.0215
    mass: float = 0.02
    g: float = 9.81
    rho: float = 1.204
    nu: float = 1.516e-5
    dt: float = 0.001
    hit_radius: float = 0.1
    max_time: float = 5.0
    # neural-network baseline
    N_h: int = 2
    mlp_hidden: int = 200
    mlp_epochs: int = 2000
    mlp_lr: float = 1e-3
    mlp_samples: int = 60

    def __post_init__(self):
        if self.joint_limits not in ("relaxed", "panda"):
            raise ValueError(f"joint_limits must be 'relaxed' or 'panda', got {self.joint_limits!r}")
        if self.gp_input not in ("velocity", "state"):
            raise ValueError(f"gp_input must be 'velocity' or 'state', got {self.gp_input!r}")
        for name in ("M", "M_d", "N_b", "N_exp", "N_eval", "bo_init"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("N_opt", "N_a", "N_test", "N_trials", "bo_iter", "gp_iters", "gp_max_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    # builders --------------------------------------------------------------

    def domain(self) -> TargetDomain:
        return TargetDomain(self.l_m, self.l_M, self.gamma_M, self.z_P)

    def cost(self) -> CostParams:
        return CostParams(self.l_c)

    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(self.g, self.rho, self.nu)

    def timing(self) -> ThrowTiming:
        return ThrowTiming(self.t_release, self.t_brake)

    def arm(self) -> ArmModel:
        return _calibrated_arm(self.l_r, self.z_rel, self.joint_limits)

    def release_geometry(self) -> ReleaseGeometry:
        """Geometry assumed by the ballistic baseline."""
        geom = self.arm().release_geometry()
        if math.isnan(self.alpha):
            return geom
        return replace(geom, alpha=self.alpha)

    def world(self) -> WorldConfig:
        return WorldConfig(
            constants=self.constants(),
            drag=DragModel(self.radius, self.mass, self.drag_model, self.cd_constant, self.drag),
            delay_lo=self.delay_lo,
            delay_hi=self.delay_hi,
            dt=self.dt,
            T_s=self.T_s,
            z_P=self.z_P,
            hit_radius=self.hit_radius,
            max_time=self.max_time,
        )

    def weight_scale(self) -> float:
        return 1.0 / math.sqrt(self.N_b) if math.isnan(self.w_init) else self.w_init

    def updated(self, **changes) -> "Config":
        return replace(self, **changes)


@lru_cache(maxsize=16)
def _calibrated_arm(l_r: float, z_rel: float, which: str) -> ArmModel:
    limits = RELAXED_LIMITS if which == "relaxed" else PANDA_LIMITS
    return ArmModel.calibrated(l_r, z_rel).with_limits(limits)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        if raw.lower() in ("auto", "nan"):
            return float("nan")
        return float(raw)
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines on top of ``base`` (defaults when omitted)."""
    types = {f.name: f.type for f in fields(Config)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, types[key], value)
    return replace(base or Config(), **changes)


def load_config(path=None, **overrides) -> Config:
    cfg = Config()
    if path is not None:
        with open(path) as fh:
            cfg = parse_config(fh.read(), cfg)
    return replace(cfg, **overrides) if overrides else cfg


def dump_config(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = "auto" if math.isnan(value) else repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
