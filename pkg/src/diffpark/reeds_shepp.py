"""Reeds-Shepp shortest paths for a forward/backward car with bounded curvature.

Standard 12-formula word enumeration with timeflip/reflect transforms
(Reeds & Shepp 1990, with the usual corrections). Curve parameters are arc
angles and straight parameters are distances in units of the turn radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .se2 import Gear, Pose2D, to_frame

LEFT, STRAIGHT, RIGHT = 1, 0, -1


@dataclass(frozen=True)
class Segment:
    param: float       # arc angle (curves) or distance / radius (straights)
    steering: int      # LEFT / STRAIGHT / RIGHT
    gear: Gear

    @staticmethod
    def create(param: float, steering: int, gear: Gear) -> "Segment":
        if param >= 0:
            return Segment(param, steering, gear)
        flipped = Gear.Reverse if gear is Gear.Forward else Gear.Forward
        return Segment(-param, steering, flipped)


def _wrap(theta: float) -> float:
    theta = theta % (2.0 * math.pi)
    if theta >= math.pi:
        theta -= 2.0 * math.pi
    return theta


def _polar(x: float, y: float) -> tuple[float, float]:
    return math.hypot(x, y), math.atan2(y, x)


def _acos(v: float) -> float:
    return math.acos(max(-1.0, min(1.0, v)))


def _asin(v: float) -> float:
    return math.asin(max(-1.0, min(1.0, v)))


def _timeflip(path):
    return [
        Segment(e.param, e.steering,
                Gear.Reverse if e.gear is Gear.Forward else Gear.Forward)
        for e in path
    ]


def _reflect(path):
    return [Segment(e.param, -e.steering, e.gear) for e in path]


def _path1(x, y, phi):
    # 8.1: CSC, same turns
    u, t = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    v = _wrap(phi - t)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, STRAIGHT, Gear.Forward),
        Segment.create(v, LEFT, Gear.Forward),
    ]


def _path2(x, y, phi):
    # 8.2: CSC, opposite turns
    phi = _wrap(phi)
    rho, t1 = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    if rho * rho < 4:
        return []
    u = math.sqrt(rho * rho - 4)
    t = _wrap(t1 + math.atan2(2, u))
    v = _wrap(t - phi)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, STRAIGHT, Gear.Forward),
        Segment.create(v, RIGHT, Gear.Forward),
    ]


def _path3(x, y, phi):
    # 8.3: C|C|C
    rho, theta = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    if rho > 4:
        return []
    a = _acos(rho / 4)
    t = _wrap(theta + math.pi / 2 + a)
    u = _wrap(math.pi - 2 * a)
    v = _wrap(phi - t - u)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, RIGHT, Gear.Reverse),
        Segment.create(v, LEFT, Gear.Forward),
    ]


def _path4(x, y, phi):
    # 8.4 (1): C|CC
    rho, theta = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    if rho > 4:
        return []
    a = _acos(rho / 4)
    t = _wrap(theta + math.pi / 2 + a)
    u = _wrap(math.pi - 2 * a)
    v = _wrap(t + u - phi)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, RIGHT, Gear.Reverse),
        Segment.create(v, LEFT, Gear.Reverse),
    ]


def _path5(x, y, phi):
    # 8.4 (2): CC|C
    rho, theta = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    if rho > 4:
        return []
    if rho < 1e-12:
        return []
    u = _acos(1 - rho * rho / 8)
    a = _asin(2 * math.sin(u) / rho)
    t = _wrap(theta + math.pi / 2 - a)
    v = _wrap(t - u - phi)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, RIGHT, Gear.Forward),
        Segment.create(v, LEFT, Gear.Reverse),
    ]


def _path6(x, y, phi):
    # 8.7: CCu|CuC
    rho, theta = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    if rho > 4:
        return []
    if rho <= 2:
        a = _acos((rho + 2) / 4)
        t = _wrap(theta + math.pi / 2 + a)
        u = _wrap(a)
    else:
        a = _acos((rho - 2) / 4)
        t = _wrap(theta + math.pi / 2 - a)
        u = _wrap(math.pi - a)
    v = _wrap(phi - t + 2 * u)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, RIGHT, Gear.Forward),
        Segment.create(u, LEFT, Gear.Reverse),
        Segment.create(v, RIGHT, Gear.Reverse),
    ]


def _path7(x, y, phi):
    # 8.8: C|CuCu|C
    rho, theta = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    u1 = (20 - rho * rho) / 16
    if rho > 6 or not 0 <= u1 <= 1:
        return []
    u = _acos(u1)
    if rho == 0:
        return []
    a = _asin(2 * math.sin(u) / rho)
    t = _wrap(theta + math.pi / 2 + a)
    v = _wrap(t - phi)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, RIGHT, Gear.Reverse),
        Segment.create(u, LEFT, Gear.Reverse),
        Segment.create(v, RIGHT, Gear.Forward),
    ]


def _path8(x, y, phi):
    # 8.9 (1): C|C[pi/2]SC
    rho, theta = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    if rho < 2:
        return []
    u = math.sqrt(rho * rho - 4) - 2
    a = math.atan2(2, u + 2)
    t = _wrap(theta + math.pi / 2 + a)
    v = _wrap(t - phi + math.pi / 2)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(math.pi / 2, RIGHT, Gear.Reverse),
        Segment.create(u, STRAIGHT, Gear.Reverse),
        Segment.create(v, LEFT, Gear.Reverse),
    ]


def _path9(x, y, phi):
    # 8.9 (2): CSC[pi/2]|C
    rho, theta = _polar(x - math.sin(phi), y - 1 + math.cos(phi))
    if rho < 2:
        return []
    u = math.sqrt(rho * rho - 4) - 2
    a = math.atan2(u + 2, 2)
    t = _wrap(theta + math.pi / 2 - a)
    v = _wrap(t - phi - math.pi / 2)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, STRAIGHT, Gear.Forward),
        Segment.create(math.pi / 2, RIGHT, Gear.Forward),
        Segment.create(v, LEFT, Gear.Reverse),
    ]


def _path10(x, y, phi):
    # 8.10 (1): C|C[pi/2]SC
    rho, theta = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    if rho < 2:
        return []
    t = _wrap(theta + math.pi / 2)
    u = rho - 2
    v = _wrap(phi - t - math.pi / 2)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(math.pi / 2, RIGHT, Gear.Reverse),
        Segment.create(u, STRAIGHT, Gear.Reverse),
        Segment.create(v, RIGHT, Gear.Reverse),
    ]


def _path11(x, y, phi):
    # 8.10 (2): CSC[pi/2]|C
    rho, theta = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    if rho < 2:
        return []
    t = _wrap(theta)
    u = rho - 2
    v = _wrap(phi - t - math.pi / 2)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(u, STRAIGHT, Gear.Forward),
        Segment.create(math.pi / 2, LEFT, Gear.Forward),
        Segment.create(v, RIGHT, Gear.Reverse),
    ]


def _path12(x, y, phi):
    # 8.11: C|C[pi/2]SC[pi/2]|C
    rho, theta = _polar(x + math.sin(phi), y - 1 - math.cos(phi))
    if rho < 4:
        return []
    u = math.sqrt(rho * rho - 4) - 4
    a = math.atan2(2, u + 4)
    t = _wrap(theta + math.pi / 2 + a)
    v = _wrap(t - phi)
    return [
        Segment.create(t, LEFT, Gear.Forward),
        Segment.create(math.pi / 2, RIGHT, Gear.Reverse),
        Segment.create(u, STRAIGHT, Gear.Reverse),
        Segment.create(math.pi / 2, LEFT, Gear.Reverse),
        Segment.create(v, RIGHT, Gear.Forward),
    ]


_PATH_FNS = [
    _path1, _path2, _path3, _path4, _path5, _path6,
    _path7, _path8, _path9, _path10, _path11, _path12,
]


def all_paths(start: Pose2D, goal: Pose2D, turn_radius: float) -> list[list[Segment]]:
    """All candidate normalized paths from start to goal, unfiltered."""
    if turn_radius <= 0:
        raise ValueError(f"turn_radius must be positive: {turn_radius}")
    rel = to_frame(goal, start)
    x, y, phi = rel.x / turn_radius, rel.y / turn_radius, rel.theta
    paths = []
    for fn in _PATH_FNS:
        for cand in (
            fn(x, y, phi),
            _timeflip(fn(-x, y, -phi)),
            _reflect(fn(x, -y, -phi)),
            _reflect(_timeflip(fn(-x, -y, phi))),
        ):
            cand = [e for e in cand if e.param > 1e-12]
            if cand:
                paths.append(cand)
    return paths


def path_length(segments: list[Segment], turn_radius: float = 1.0) -> float:
    return sum(e.param for e in segments) * turn_radius


def shortest_path(start: Pose2D, goal: Pose2D, turn_radius: float) -> list[Segment]:
    """Shortest Reeds-Shepp word; empty when start equals goal."""
    paths = all_paths(start, goal, turn_radius)
    if not paths:
        return []
    return min(paths, key=lambda p: path_length(p))


def _advance(pose: Pose2D, seg: Segment, turn_radius: float, frac_param: float) -> Pose2D:
    """Pose after traversing frac_param of the segment's normalized parameter."""
    g = float(seg.gear.value)
    if seg.steering == STRAIGHT:
        d = g * frac_param * turn_radius
        return Pose2D(
            pose.x + d * math.cos(pose.theta),
            pose.y + d * math.sin(pose.theta),
            pose.theta,
        )
    s = float(seg.steering)
    cx = pose.x - s * turn_radius * math.sin(pose.theta)
    cy = pose.y + s * turn_radius * math.cos(pose.theta)
    theta = pose.theta + s * g * frac_param
    return Pose2D(
        cx + s * turn_radius * math.sin(theta),
        cy - s * turn_radius * math.cos(theta),
        theta,
    )


def sample_path(
    start: Pose2D,
    segments: list[Segment],
    turn_radius: float,
    step: float = 0.1,
) -> list[tuple[Pose2D, Gear]]:
    """Densely sample a path at ~step meters of arc length.

    The start pose and every segment endpoint are included exactly.
    """
    out: list[tuple[Pose2D, Gear]] = []
    pose = start
    first = True
    for seg in segments:
        if first:
            out.append((pose, seg.gear))
            first = False
        arc = seg.param * turn_radius
        n = max(1, int(math.ceil(arc / step)))
        for k in range(1, n + 1):
            p = _advance(pose, seg, turn_radius, seg.param * k / n)
            out.append((p, seg.gear))
        pose = out[-1][0]
    return out


def path_endpoint(start: Pose2D, segments: list[Segment], turn_radius: float) -> Pose2D:
    pose = start
    for seg in segments:
        pose = _advance(pose, seg, turn_radius, seg.param)
    return pose


def reeds_shepp_path(
    start: Pose2D,
    goal: Pose2D,
    turn_radius: float,
    step: float = 0.1,
) -> list[tuple[Pose2D, Gear]]:
    """Shortest Reeds-Shepp path, densely sampled with gear annotations.

    Returns an empty list when start coincides with goal.
    """
    segments = shortest_path(start, goal, turn_radius)
    if not segments:
        return []
    return sample_path(start, segments, turn_radius, step)
