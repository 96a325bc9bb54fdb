"""SE(2) geometry, angle arithmetic, and the kinematic bicycle model.

Conventions:
    - A pose is (x, y, theta) with theta in (-pi, pi].
    - The vehicle footprint rectangle is centered on the pose.
    - compose(a, b) maps b, expressed in a's frame, into the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

STEER_MAX_DEFAULT = 0.6109  # rad, ~35 deg
ACCEL_LIMIT_DEFAULT = 2.0   # m/s^2


class DomainError(ValueError):
    """Raised when an operation's preconditions are violated."""


def angle_wrap(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(theta):
        raise DomainError(f"non-finite angle: {theta}")
    wrapped = math.remainder(theta, 2.0 * math.pi)
    # remainder() returns [-pi, pi]; move the open endpoint
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", angle_wrap(self.theta))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


IDENTITY = Pose2D(0.0, 0.0, 0.0)


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """SE(2) group product: b expressed in a's frame, mapped to world."""
    ca, sa = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        a.theta + b.theta,
    )


def inverse(p: Pose2D) -> Pose2D:
    """Group inverse: compose(p, inverse(p)) is the identity."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2D(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def to_frame(p: Pose2D, frame: Pose2D) -> Pose2D:
    """Express world pose p in the given frame (world -> ego transform)."""
    return compose(inverse(frame), p)


class Gear(Enum):
    Forward = 1
    Reverse = -1


@dataclass(frozen=True)
class ControlCommand:
    steer: float
    target_speed: float  # signed, m/s
    gear: Gear

    def __post_init__(self):
        if self.target_speed * self.gear.value < 0:
            raise DomainError(
                f"target_speed {self.target_speed} inconsistent with gear {self.gear}"
            )


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2D
    v: float = 0.0           # signed, negative = reversing
    wheelbase: float = 2.9   # m
    steer: float = 0.0       # rad

    def __post_init__(self):
        if self.wheelbase <= 0:
            raise DomainError(f"wheelbase must be positive: {self.wheelbase}")


def bicycle_step(
    s: VehicleState,
    u: ControlCommand,
    dt: float,
    steer_max: float = STEER_MAX_DEFAULT,
    accel_limit: float = ACCEL_LIMIT_DEFAULT,
) -> VehicleState:
    """One forward-Euler step of the kinematic bicycle model.

    Speed relaxes toward the commanded target at accel_limit; heading is
    wrapped after integration.
    """
    if not (0.0 < dt <= 0.1):
        raise DomainError(f"dt must be in (0, 0.1]: {dt}")
    steer = max(-steer_max, min(steer_max, u.steer))

    pose = s.pose
    x = pose.x + s.v * math.cos(pose.theta) * dt
    y = pose.y + s.v * math.sin(pose.theta) * dt
    theta = pose.theta + (s.v * math.tan(steer) / s.wheelbase) * dt

    dv = u.target_speed - s.v
    max_dv = accel_limit * dt
    v = s.v + max(-max_dv, min(max_dv, dv))

    return replace(s, pose=Pose2D(x, y, theta), v=v, steer=steer)
