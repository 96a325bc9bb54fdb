"""Parking-lot world model: layout, BEV rasterization, collision, slot errors.

Layout is two facing rows of perpendicular slots separated by a single lane
running along +x. Slot indices 0..slots_per_side-1 are the bottom row
(y < 0, slot heading +pi/2, toward the lane), the rest are the top row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .se2 import DomainError, Pose2D, angle_wrap, to_frame


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LotConfig:
    slots_per_side: int = 16
    slot_length: float = 5.0
    slot_width: float = 2.8
    lane_width: float = 6.5
    occupancy_rate: float = 0.6
    vehicle_footprint: tuple[float, float] = (4.5, 1.9)  # (length, width)
    lane_margin: float = 10.0  # lead-in lane beyond the slot rows, each end
    wall_thickness: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        length, width = self.vehicle_footprint
        if self.slot_length <= length or self.slot_width <= width:
            raise ConfigError("slot dimensions must exceed the vehicle footprint")
        if not 0.0 <= self.occupancy_rate <= 1.0:
            raise ConfigError(f"occupancy_rate out of [0,1]: {self.occupancy_rate}")


@dataclass(frozen=True)
class Rect:
    """Oriented rectangle: center pose, length along heading, width across."""
    pose: Pose2D
    length: float
    width: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.pose.theta), math.sin(self.pose.theta)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.pose.x, self.pose.y])

    def to_json(self) -> dict:
        return {
            "pose": list(self.pose.as_tuple()),
            "length": self.length,
            "width": self.width,
        }

    @staticmethod
    def from_json(d: dict) -> "Rect":
        return Rect(Pose2D(*d["pose"]), d["length"], d["width"])


def rect_separation(a: Rect, b: Rect) -> float:
    """Signed separation between two oriented rectangles.

    Separating-axis test over both rectangles' edge normals. Positive means
    disjoint by at least that margin along some axis; negative means no axis
    separates them (overlap).
    """
    axes = []
    for rect in (a, b):
        c, s = math.cos(rect.pose.theta), math.sin(rect.pose.theta)
        axes.append((c, s))
        axes.append((-s, c))
    best = -math.inf
    dx = b.pose.x - a.pose.x
    dy = b.pose.y - a.pose.y
    for ax, ay in axes:
        ra = _projected_radius(a, ax, ay)
        rb = _projected_radius(b, ax, ay)
        gap = abs(dx * ax + dy * ay) - (ra + rb)
        best = max(best, gap)
    return best


def _projected_radius(r: Rect, ax: float, ay: float) -> float:
    c, s = math.cos(r.pose.theta), math.sin(r.pose.theta)
    return (
        0.5 * r.length * abs(ax * c + ay * s)
        + 0.5 * r.width * abs(-ax * s + ay * c)
    )


def rects_intersect(a: Rect, b: Rect) -> bool:
    return rect_separation(a, b) < 0.0


@dataclass
class World:
    slots: list[Rect]
    obstacles: list[Rect]          # parked vehicles + boundary walls
    target_index: int
    lane_x: tuple[float, float]    # drivable lane extent along x
    lane_y: tuple[float, float]
    footprint: tuple[float, float] = (4.5, 1.9)
    occupied_slots: list[int] = field(default_factory=list)

    @property
    def target_slot(self) -> Rect:
        return self.slots[self.target_index]

    def target_pose(self, reverse_in: bool = True) -> Pose2D:
        """Parked goal pose at the target slot center.

        reverse_in keeps the nose toward the lane (heading = slot heading).
        """
        p = self.target_slot.pose
        if reverse_in:
            return p
        return Pose2D(p.x, p.y, angle_wrap(p.theta + math.pi))

    def ego_rect(self, pose: Pose2D) -> Rect:
        return Rect(pose, self.footprint[0], self.footprint[1])

    def to_json(self) -> dict:
        return {
            "slots": [r.to_json() for r in self.slots],
            "obstacles": [r.to_json() for r in self.obstacles],
            "target_index": self.target_index,
            "lane_x": list(self.lane_x),
            "lane_y": list(self.lane_y),
            "footprint": list(self.footprint),
            "occupied_slots": self.occupied_slots,
        }

    @staticmethod
    def from_json(d: dict) -> "World":
        return World(
            slots=[Rect.from_json(r) for r in d["slots"]],
            obstacles=[Rect.from_json(r) for r in d["obstacles"]],
            target_index=d["target_index"],
            lane_x=tuple(d["lane_x"]),
            lane_y=tuple(d["lane_y"]),
            footprint=tuple(d["footprint"]),
            occupied_slots=list(d["occupied_slots"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @staticmethod
    def loads(s: str) -> "World":
        return World.from_json(json.loads(s))


def build_lot(cfg: LotConfig, target_index: int) -> World:
    """Build a deterministic two-row perpendicular parking lot.

    The target slot is always left unoccupied; the others are occupied
    independently with probability cfg.occupancy_rate.
    """
    n = cfg.slots_per_side
    if not 0 <= target_index < 2 * n:
        raise ConfigError(f"target_index {target_index} out of range [0, {2 * n})")

    half_lane = 0.5 * cfg.lane_width
    row_y = half_lane + 0.5 * cfg.slot_length
    slots = []
    for i in range(n):  # bottom row
        x = (i + 0.5) * cfg.slot_width
        slots.append(Rect(Pose2D(x, -row_y, math.pi / 2), cfg.slot_length, cfg.slot_width))
    for i in range(n):  # top row
        x = (i + 0.5) * cfg.slot_width
        slots.append(Rect(Pose2D(x, row_y, -math.pi / 2), cfg.slot_length, cfg.slot_width))

    rng = np.random.default_rng(cfg.rng_seed)
    draws = rng.random(2 * n)
    occupied = [
        i for i in range(2 * n)
        if i != target_index and draws[i] < cfg.occupancy_rate
    ]

    length, width = cfg.vehicle_footprint
    obstacles = [Rect(slots[i].pose, length, width) for i in occupied]

    x_lo = -cfg.lane_margin
    x_hi = n * cfg.slot_width + cfg.lane_margin
    y_out = row_y + 0.5 * cfg.slot_length
    t = cfg.wall_thickness
    span = x_hi - x_lo
    obstacles += [
        Rect(Pose2D(0.5 * (x_lo + x_hi), -(y_out + 0.5 * t), 0.0), span + 2 * t, t),
        Rect(Pose2D(0.5 * (x_lo + x_hi), y_out + 0.5 * t, 0.0), span + 2 * t, t),
        Rect(Pose2D(x_lo - 0.5 * t, 0.0, math.pi / 2), 2 * y_out + 2 * t, t),
        Rect(Pose2D(x_hi + 0.5 * t, 0.0, math.pi / 2), 2 * y_out + 2 * t, t),
    ]

    return World(
        slots=slots,
        obstacles=obstacles,
        target_index=target_index,
        lane_x=(x_lo, x_hi),
        lane_y=(-half_lane, half_lane),
        footprint=cfg.vehicle_footprint,
        occupied_slots=occupied,
    )


# Channel indices of the segmentation raster.
CH_FREE, CH_OCCUPIED, CH_TARGET = 0, 1, 2


@dataclass
class SegBev:
    """Ego-centric 3-channel segmentation raster (free, occupied, target).

    Ego sits at the grid center with heading along +x, which maps to the
    column axis; y maps to rows. Cell values are in [0, 1].
    """
    grid: np.ndarray         # H x W x 3, float32
    resolution: float = 0.1  # m / cell
    extent: float = 19.2     # m, full width of the square window

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def cell_centers_1d(self) -> np.ndarray:
        n = self.size
        return (np.arange(n) + 0.5) * self.resolution - 0.5 * self.extent

    def copy(self) -> "SegBev":
        return SegBev(self.grid.copy(), self.resolution, self.extent)


def empty_bev(resolution: float = 0.1, extent: float = 19.2) -> SegBev:
    n = int(round(extent / resolution))
    grid = np.zeros((n, n, 3), dtype=np.float32)
    grid[:, :, CH_FREE] = 1.0
    return SegBev(grid, resolution, extent)


def _paint_rect(bev: SegBev, channel: int, rect_ego: Rect) -> None:
    """Set channel to 1 on cells whose center lies inside the ego-frame rect."""
    coords = bev.cell_centers_1d()
    n = bev.size
    corners = rect_ego.corners()
    half = 0.5 * bev.extent
    res = bev.resolution

    x_lo, y_lo = corners.min(axis=0)
    x_hi, y_hi = corners.max(axis=0)
    c_lo = max(0, int(math.floor((x_lo + half) / res)))
    c_hi = min(n, int(math.ceil((x_hi + half) / res)) + 1)
    r_lo = max(0, int(math.floor((y_lo + half) / res)))
    r_hi = min(n, int(math.ceil((y_hi + half) / res)) + 1)
    if c_lo >= c_hi or r_lo >= r_hi:
        return

    xs = coords[c_lo:c_hi][None, :]
    ys = coords[r_lo:r_hi][:, None]
    c, s = math.cos(rect_ego.pose.theta), math.sin(rect_ego.pose.theta)
    dx = xs - rect_ego.pose.x
    dy = ys - rect_ego.pose.y
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (np.abs(u) <= 0.5 * rect_ego.length) & (np.abs(v) <= 0.5 * rect_ego.width)
    sub = bev.grid[r_lo:r_hi, c_lo:c_hi, channel]
    sub[inside] = 1.0


def rasterize_bev(
    world: World,
    ego: Pose2D,
    resolution: float = 0.1,
    extent: float = 19.2,
    include_target: bool = True,
) -> SegBev:
    """Render the ego-centric segmentation raster at the given pose."""
    bev = empty_bev(resolution, extent)
    reach = 0.5 * extent * math.sqrt(2.0)
    for rect in world.obstacles:
        r = math.hypot(rect.pose.x - ego.x, rect.pose.y - ego.y)
        if r > reach + 0.5 * math.hypot(rect.length, rect.width):
            continue
        ego_rect = Rect(to_frame(rect.pose, ego), rect.length, rect.width)
        _paint_rect(bev, CH_OCCUPIED, ego_rect)
    if include_target:
        tgt = world.target_slot
        ego_rect = Rect(to_frame(tgt.pose, ego), tgt.length, tgt.width)
        _paint_rect(bev, CH_TARGET, ego_rect)
        # occupied and target are disjoint on noise-free rasters
        bev.grid[:, :, CH_TARGET] *= 1.0 - bev.grid[:, :, CH_OCCUPIED]
    bev.grid[:, :, CH_FREE] = 1.0 - np.maximum(
        bev.grid[:, :, CH_OCCUPIED], bev.grid[:, :, CH_TARGET]
    )
    return bev


def clearance(world: World, pose: Pose2D) -> float:
    """Minimum SAT separation of the ego footprint from all obstacles.

    Negative means collision; magnitude near zero means grazing contact.
    """
    if not all(math.isfinite(v) for v in pose.as_tuple()):
        raise DomainError(f"non-finite pose: {pose}")
    ego = world.ego_rect(pose)
    reach = 0.5 * math.hypot(ego.length, ego.width)
    best = math.inf
    for rect in world.obstacles:
        r = math.hypot(rect.pose.x - pose.x, rect.pose.y - pose.y)
        quick = r - reach - 0.5 * math.hypot(rect.length, rect.width)
        if quick > best:
            continue
        best = min(best, rect_separation(ego, rect))
    return best


def check_collision(world: World, pose: Pose2D) -> bool:
    """True iff the ego footprint at pose intersects any obstacle."""
    return clearance(world, pose) < 0.0


def slot_error(
    world: World, pose: Pose2D
) -> tuple[float, float, bool, int | None]:
    """Slot-relative parking error at a pose.

    Returns (pos_err, ori_err, inside, slot_index). The nearest slot center
    is used; slot_index is None when the nearest center is farther than one
    slot length. Orientation error is folded to [0, pi/2] (front/back
    symmetric). inside requires the full footprint within the slot rectangle.
    """
    if not all(math.isfinite(v) for v in pose.as_tuple()):
        raise DomainError(f"non-finite pose: {pose}")
    centers = np.array([[s.pose.x, s.pose.y] for s in world.slots])
    d = np.hypot(centers[:, 0] - pose.x, centers[:, 1] - pose.y)
    idx = int(np.argmin(d))
    pos_err = float(d[idx])
    slot = world.slots[idx]
    if pos_err > slot.length:
        return (pos_err, math.nan, False, None)
    ori_err = abs(angle_wrap(pose.theta - slot.pose.theta))
    ori_err = min(ori_err, math.pi - ori_err)
    inside = _rect_contains(slot, world.ego_rect(pose))
    return (pos_err, ori_err, inside, idx)


def _rect_contains(outer: Rect, inner: Rect) -> bool:
    c, s = math.cos(outer.pose.theta), math.sin(outer.pose.theta)
    for px, py in inner.corners():
        dx, dy = px - outer.pose.x, py - outer.pose.y
        u = dx * c + dy * s
        v = -dx * s + dy * c
        if abs(u) > 0.5 * outer.length or abs(v) > 0.5 * outer.width:
            return False
    return True
