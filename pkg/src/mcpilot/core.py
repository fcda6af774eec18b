"""Domain types, target geometry, cost and random streams shared by every module.

Units are SI throughout: meters, seconds, radians.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CartesianState",
    "TargetPoint",
    "ExtendedState",
    "TargetDomain",
    "ReleaseGeometry",
    "CostParams",
    "PhysicalConstants",
    "RngStream",
    "as_generator",
    "sample_target",
    "sample_targets",
    "polar_of_target",
    "saturated_cost",
    "velocity_direction",
]


@dataclass(frozen=True)
class CartesianState:
    """Object center-of-mass position ``p`` and velocity ``v``."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("CartesianState components must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True)
class TargetPoint:
    x: float
    y: float
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "TargetPoint":
        x, y, z = (float(c) for c in np.asarray(arr, dtype=float).reshape(3))
        return cls(x, y, z)


@dataclass(frozen=True)
class ExtendedState:
    state: CartesianState
    target: TargetPoint


@dataclass(frozen=True)
class TargetDomain:
    """Annular sector of targets at height ``z_P``.

    Targets are ``(l cos g, l sin g, z_P)`` with ``l`` in ``[l_min, l_max]``
    and ``|g| <= gamma_max``.
    """

    l_min: float = 0.75
    l_max: float = 2.4
    gamma_max: float = math.pi / 6
    z_P: float = 0.0

    def __post_init__(self):
        if not (0 < self.l_min <= self.l_max):
            raise ValueError(f"need 0 < l_min <= l_max, got {self.l_min}, {self.l_max}")
        if not (0 <= self.gamma_max <= math.pi):
            raise ValueError(f"gamma_max must lie in [0, pi], got {self.gamma_max}")

    def contains(self, P, tol: float = 1e-9) -> bool:
        P = _as_point_array(P)
        ell = math.hypot(P[0], P[1])
        if ell == 0.0:
            return False
        gamma = math.atan2(P[1], P[0])
        return (
            self.l_min - tol <= ell <= self.l_max + tol
            and abs(gamma) <= self.gamma_max + tol
            and abs(P[2] - self.z_P) <= tol
        )

    def superset_bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """(x, y) box enclosing the sector, used to scatter policy centers."""
        half = self.l_max * math.sin(self.gamma_max)
        return (0.0, self.l_max), (-half, half)

    def with_height(self, z_P: float) -> "TargetDomain":
        return TargetDomain(self.l_min, self.l_max, self.gamma_max, z_P)


@dataclass(frozen=True)
class ReleaseGeometry:
    """Nominal release point radius/height and vertical release angle."""

    l_r: float = 0.07
    z_rel: float = 1.50
    alpha: float = 0.0

    def __post_init__(self):
        if self.l_r < 0:
            raise ValueError("l_r must be nonnegative")

    def release_point(self, gamma: float) -> np.ndarray:
        return np.array([self.l_r * math.cos(gamma), self.l_r * math.sin(gamma), self.z_rel])


@dataclass(frozen=True)
class CostParams:
    l_c: float = 0.1

    def __post_init__(self):
        if self.l_c <= 0:
            raise ValueError("l_c must be positive")


@dataclass(frozen=True)
class PhysicalConstants:
    g: float = 9.81
    rho: float = 1.204  # air at 20 C, kg/m^3
    nu: float = 1.516e-5  # air at 20 C, m^2/s

    def __post_init__(self):
        if min(self.g, self.rho, self.nu) <= 0:
            raise ValueError("physical constants must be strictly positive")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams for different purposes are derived from one master seed with
    :meth:`derive`, so adding draws to one purpose never shifts another.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def derive(cls, seed: int, purpose: str, index: int = 0) -> "RngStream":
        # crc32 is stable across interpreter runs, unlike hash()
        sid = (zlib.crc32(purpose.encode()) << 16) + int(index)
        return cls(int(seed), sid)


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an :class:`RngStream`, an int seed or ``None``."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def _as_point_array(P) -> np.ndarray:
    if isinstance(P, TargetPoint):
        return P.as_array()
    return np.asarray(P, dtype=float)


def sample_targets(domain: TargetDomain, n: int, rng) -> np.ndarray:
    """Draw ``n`` targets, uniform in the polar parameters ``(l, gamma)``.

    Returns an ``(n, 3)`` array.
    """
    gen = as_generator(rng)
    ell = gen.uniform(domain.l_min, domain.l_max, size=n)
    gamma = gen.uniform(-domain.gamma_max, domain.gamma_max, size=n)
    return np.column_stack([ell * np.cos(gamma), ell * np.sin(gamma), np.full(n, domain.z_P)])


def sample_target(domain: TargetDomain, rng) -> TargetPoint:
    return TargetPoint.from_array(sample_targets(domain, 1, rng)[0])


def polar_of_target(P) -> tuple[float, float]:
    """Return ``(l, gamma)`` of a target's horizontal projection."""
    P = _as_point_array(P)
    if P[0] == 0.0 and P[1] == 0.0:
        raise ValueError("target at the origin has no bearing")
    return math.hypot(P[0], P[1]), math.atan2(P[1], P[0])


def saturated_cost(p, P, params: CostParams | float = 0.1):
    """``1 - exp(-|p - P|^2_Sigma_c)`` with ``Sigma_c = diag(1/l_c, 1/l_c, 0)``.

    Works on single points or on ``(..., 3)`` batches; the vertical offset
    never contributes.
    """
    l_c = params.l_c if isinstance(params, CostParams) else float(params)
    d = np.asarray(p, dtype=float) - _as_point_array(P)
    sq = (d[..., 0] ** 2 + d[..., 1] ** 2) / l_c
    return 1.0 - np.exp(-sq)


def velocity_direction(gamma, alpha):
    """Unit release direction for bearing ``gamma`` and elevation ``alpha``."""
    ca = np.cos(alpha)
    return np.stack(
        np.broadcast_arrays(ca * np.cos(gamma), ca * np.sin(gamma), np.sin(alpha)),
        axis=-1,
    )
