"""Stanley steering and longitudinal speed/gear management for plan tracking.

The tracker consumes a world-frame waypoint sequence (x, y, theta) ordered in
travel time. Gear is inferred per waypoint from the displacement direction
relative to the stored heading, so plans may contain direction changes
(cusps); the tracker ramps speed down into each cusp and the terminal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se2 import (
    STEER_MAX_DEFAULT,
    ControlCommand,
    DomainError,
    Gear,
    Pose2D,
    VehicleState,
    angle_wrap,
)

# Displacements below this are treated as stationary when inferring gear.
_MIN_SEG_DISP = 1e-4

# Tracking reference resolution: input polylines are resampled so consecutive
# waypoints are at most this far apart. Index-based lookahead on coarse plans
# (0.5 m spacing) puts the reference so far ahead that near-minimum-radius
# arcs are tracked at full lock and diverge.
_DENSIFY_STEP = 0.1


@dataclass(frozen=True)
class StanleyGains:
    k_e: float = 1.0
    k_y: float = 2.0
    lookahead_n: int = 3
    v_soft: float = 0.5

    def __post_init__(self):
        if self.k_e <= 0 or self.k_y <= 0 or self.v_soft <= 0:
            raise DomainError("gains and v_soft must be positive")
        if self.lookahead_n < 1:
            raise DomainError("lookahead_n must be >= 1")


@dataclass(frozen=True)
class SpeedLimits:
    v_cruise_fwd: float = 2.0
    v_cruise_rev: float = 1.0
    ramp_dist: float = 1.5   # linear ramp-down inside this distance of a stop
    arrive_dist: float = 0.2


@dataclass
class Reference:
    index: int
    theta_e: float
    dx: float
    dy: float
    e_y: float
    exhausted: bool


def stanley_steer(
    theta_e: float,
    dx: float,
    dy: float,
    v: float,
    gains: StanleyGains,
    steer_max: float = STEER_MAX_DEFAULT,
    reverse: bool = False,
) -> float:
    """Steering from heading error plus speed-scaled cross-track correction.

    (dx, dy) is the reference point in the travel-direction vehicle frame;
    the correction sign flips in reverse gear.
    """
    if dx == 0.0 and dy == 0.0:
        raise DomainError("zero displacement to reference waypoint")
    delta = gains.k_e * theta_e + (
        gains.k_y / (abs(v) + gains.v_soft)
    ) * math.atan2(dy, dx)
    if reverse:
        delta = -delta
    return max(-steer_max, min(steer_max, delta))


@dataclass
class TrackerState:
    """Plan-following state: world-frame waypoints plus progress bookkeeping."""

    waypoints: np.ndarray                 # (N, 3): x, y, theta
    gains: StanleyGains = field(default_factory=StanleyGains)
    limits: SpeedLimits = field(default_factory=SpeedLimits)
    wheelbase: float = 2.9
    steer_max: float = STEER_MAX_DEFAULT
    progress: int = 0
    segment: int = 0

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or len(w) == 0:
            raise DomainError("waypoints must be a nonempty (N, 3) array")
        w, self.source = _densify(w)
        self.waypoints = w
        self._segments = _split_gear_segments(w)
        self.segment = 0
        self.progress = self._segments[0][0]

    @property
    def source_progress(self) -> int:
        """Input-waypoint index corresponding to the current progress."""
        return int(self.source[min(self.progress, len(self.source) - 1)])

    @property
    def gear(self) -> Gear:
        return self._segments[self.segment][2]

    @property
    def n(self) -> int:
        return len(self.waypoints)

    def segment_end(self) -> int:
        return self._segments[self.segment][1]

    def on_last_segment(self) -> bool:
        return self.segment == len(self._segments) - 1


def _densify(w: np.ndarray, step: float = _DENSIFY_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Resample a waypoint polyline to at most `step` spacing.

    Positions are interpolated linearly and headings by shortest angular
    path; repeated poses (e.g. padded plan terminals) collapse to one point.
    Returns (dense waypoints, source index of each dense point).
    """
    pts = [w[0]]
    src = [0]
    for i in range(len(w) - 1):
        dx, dy = w[i + 1, 0] - w[i, 0], w[i + 1, 1] - w[i, 1]
        dist = math.hypot(dx, dy)
        if dist < _MIN_SEG_DISP:
            continue
        dth = angle_wrap(w[i + 1, 2] - w[i, 2])
        n_sub = max(1, int(math.ceil(dist / step)))
        for k in range(1, n_sub + 1):
            f = k / n_sub
            pts.append(np.array([w[i, 0] + f * dx, w[i, 1] + f * dy,
                                 angle_wrap(w[i, 2] + f * dth)]))
            src.append(i + 1)
    return np.array(pts), np.array(src)


def _split_gear_segments(w: np.ndarray) -> list[tuple[int, int, Gear]]:
    """Contiguous (start, end, gear) runs of constant travel direction.

    Gear comes from the sign of consecutive displacement projected on the
    stored heading; near-zero displacements inherit the surrounding gear.
    """
    n = len(w)
    if n == 1:
        return [(0, 0, Gear.Forward)]
    signs = np.zeros(n - 1)
    for i in range(n - 1):
        dx, dy = w[i + 1, 0] - w[i, 0], w[i + 1, 1] - w[i, 1]
        if math.hypot(dx, dy) < _MIN_SEG_DISP:
            continue
        proj = dx * math.cos(w[i, 2]) + dy * math.sin(w[i, 2])
        signs[i] = 1.0 if proj >= 0 else -1.0
    # fill stationary gaps with the nearest non-zero sign (forward default)
    last = 1.0
    for i in range(n - 1):
        if signs[i] == 0.0:
            signs[i] = last
        else:
            last = signs[i]

    segments = []
    start = 0
    for i in range(1, n - 1):
        if signs[i] != signs[i - 1]:
            gear = Gear.Forward if signs[i - 1] > 0 else Gear.Reverse
            segments.append((start, i, gear))
            start = i
    gear = Gear.Forward if signs[-1] > 0 else Gear.Reverse
    segments.append((start, n - 1, gear))
    return segments


def select_reference(state: VehicleState, tracker: TrackerState) -> Reference:
    """Advance progress and pick the lookahead reference waypoint.

    Progress is the nearest in-segment waypoint not behind the vehicle along
    the travel direction; reaching a segment end switches to the next gear
    segment. All errors are expressed in the travel-direction vehicle frame.
    """
    w = tracker.waypoints
    pose = state.pose
    limits = tracker.limits

    while True:
        gear = tracker.gear
        travel = pose.theta if gear is Gear.Forward else angle_wrap(pose.theta + math.pi)
        ct, st = math.cos(travel), math.sin(travel)
        seg_start, seg_end, _ = tracker._segments[tracker.segment]

        i = max(tracker.progress, seg_start)
        while i < seg_end:
            dx = w[i, 0] - pose.x
            dy = w[i, 1] - pose.y
            ahead = dx * ct + dy * st
            if ahead >= 0.0 and math.hypot(dx, dy) > 0.05:
                break
            i += 1
        tracker.progress = i

        end_dist = math.hypot(w[seg_end, 0] - pose.x, w[seg_end, 1] - pose.y)
        if i >= seg_end and not tracker.on_last_segment() and end_dist < 0.3:
            tracker.segment += 1
            tracker.progress = tracker._segments[tracker.segment][0]
            continue
        break

    exhausted = False
    if tracker.on_last_segment():
        ex, ey_ = w[-1, 0] - pose.x, w[-1, 1] - pose.y
        # arrived, or overshot the terminal (now behind the travel direction)
        exhausted = _remaining_distance(tracker, pose) < limits.arrive_dist or (
            tracker.progress >= tracker.n - 1 and ex * ct + ey_ * st < 0.0
        )

    ref_idx = min(tracker.progress + tracker.gains.lookahead_n, tracker.segment_end())
    ref = w[ref_idx]
    rx, ry = ref[0] - pose.x, ref[1] - pose.y
    dx = rx * ct + ry * st
    dy = -rx * st + ry * ct
    theta_e = angle_wrap(ref[2] - pose.theta)
    return Reference(ref_idx, theta_e, dx, dy, dy, exhausted)


def _remaining_distance(tracker: TrackerState, pose: Pose2D) -> float:
    """Polyline distance from the vehicle to the current segment's end."""
    w = tracker.waypoints
    seg_end = tracker.segment_end()
    i = min(tracker.progress, seg_end)
    d = math.hypot(w[i, 0] - pose.x, w[i, 1] - pose.y)
    d += float(
        np.sum(np.hypot(np.diff(w[i:seg_end + 1, 0]), np.diff(w[i:seg_end + 1, 1])))
    )
    return d


def longitudinal(state: VehicleState, tracker: TrackerState) -> tuple[float, Gear]:
    """Signed target speed and gear from the plan's local travel direction.

    Speed ramps down linearly inside ramp_dist of the current segment's end
    (cusp or terminal) and is zero on arrival.
    """
    gear = tracker.gear
    pose = state.pose
    d = _remaining_distance(tracker, pose)
    limits = tracker.limits
    cruise = limits.v_cruise_fwd if gear is Gear.Forward else limits.v_cruise_rev
    mag = cruise * min(1.0, d / limits.ramp_dist)
    if d < limits.arrive_dist and tracker.on_last_segment():
        mag = 0.0
    return (mag * gear.value, gear)


def _feedforward_steer(tracker: TrackerState, ref_idx: int, wheelbase: float) -> float:
    """Curvature feedforward from consecutive plan headings.

    tan(delta) = wheelbase * (dtheta/ds_travel) * sign(v); without this term
    pure Stanley lags badly on minimum-radius arcs.
    """
    w = tracker.waypoints
    seg_start, seg_end, gear = tracker._segments[tracker.segment]
    i = min(max(ref_idx, seg_start), seg_end - 1) if seg_end > seg_start else seg_start
    if seg_end == seg_start:
        return 0.0
    ds = math.hypot(w[i + 1, 0] - w[i, 0], w[i + 1, 1] - w[i, 1])
    if ds < _MIN_SEG_DISP:
        return 0.0
    kappa = angle_wrap(w[i + 1, 2] - w[i, 2]) / ds
    return math.atan(wheelbase * kappa * gear.value)


def track_step(state: VehicleState, tracker: TrackerState) -> tuple[ControlCommand, bool]:
    """One control step: returns the command and whether the plan is done."""
    ref = select_reference(state, tracker)
    speed, gear = longitudinal(state, tracker)
    if ref.exhausted or (ref.dx == 0.0 and ref.dy == 0.0):
        return (ControlCommand(0.0, 0.0, gear), True)
    delta_fb = stanley_steer(
        ref.theta_e, ref.dx, ref.dy, state.v, tracker.gains,
        steer_max=math.inf, reverse=gear is Gear.Reverse,
    )
    delta = delta_fb + _feedforward_steer(tracker, ref.index, tracker.wheelbase)
    delta = max(-tracker.steer_max, min(tracker.steer_max, delta))
    return (ControlCommand(delta, speed, gear), False)
