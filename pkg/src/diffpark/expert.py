"""Automated expert demonstrator: collision-free parking maneuvers.

Each episode plans a Reeds-Shepp approach to a slot-entry pose followed by a
straight reverse into the slot, then rolls the plan out in closed loop with
the Stanley tracker. Candidates are screened geometrically with a clearance
margin before rollout; failed rollouts fall back to the next candidate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import reeds_shepp as rs
from .control import SpeedLimits, StanleyGains, TrackerState, track_step
from .se2 import STEER_MAX_DEFAULT, Pose2D, VehicleState, bicycle_step
from .world import LotConfig, World, build_lot, check_collision, clearance, slot_error


class GenerationError(RuntimeError):
    """No collision-free expert maneuver found for an episode."""


@dataclass(frozen=True)
class ExpertConfig:
    dt: float = 0.05
    wheelbase: float = 2.9
    steer_max: float = STEER_MAX_DEFAULT
    turn_radius_margin: float = 1.2    # plan radius above the kinematic minimum
    entry_candidates: tuple[float, ...] = (3.0, 2.5, 3.5, 4.0)
    path_clearance: float = 0.18       # m, required along the geometric path
    sample_step: float = 0.1
    max_attempts: int = 20
    timeout: float = 60.0
    rest_frames: int = 5
    v_cruise_fwd: float = 2.0
    v_cruise_rev: float = 1.0
    arrive_dist: float = 0.08
    gains: StanleyGains = field(default_factory=StanleyGains)

    @property
    def turn_radius(self) -> float:
        return self.wheelbase / math.tan(self.steer_max) * self.turn_radius_margin


@dataclass
class ExpertEpisode:
    world: World
    init: Pose2D
    target: Pose2D
    trajectory: list[tuple[Pose2D, float]]  # (pose, signed speed) at dt spacing
    dt: float = 0.05
    plan_path: np.ndarray | None = None     # (M, 3) geometric plan waypoints

    def poses(self) -> np.ndarray:
        return np.array([[p.x, p.y, p.theta] for p, _ in self.trajectory])

    def to_json(self) -> dict:
        return {
            "world": self.world.to_json(),
            "init": list(self.init.as_tuple()),
            "target": list(self.target.as_tuple()),
            "dt": self.dt,
            "traj": [
                [round(p.x, 6), round(p.y, 6), round(p.theta, 6), round(v, 6)]
                for p, v in self.trajectory
            ],
            "plan_path": [
                [round(x, 6), round(y, 6), round(th, 6)]
                for x, y, th in (self.plan_path if self.plan_path is not None else [])
            ],
        }

    @staticmethod
    def from_json(d: dict) -> "ExpertEpisode":
        path = np.array(d["plan_path"]) if d.get("plan_path") else None
        return ExpertEpisode(
            world=World.from_json(d["world"]),
            init=Pose2D(*d["init"]),
            target=Pose2D(*d["target"]),
            trajectory=[(Pose2D(x, y, th), v) for x, y, th, v in d["traj"]],
            dt=d["dt"],
            plan_path=path,
        )


def canonical_init_poses(world: World, slot_index: int, lane_frac: float = 0.5) -> list[Pose2D]:
    """The 6 canonical initial poses for a slot: 3 longitudinal offsets x
    near/far lane lateral positions, heading along the lane (+x)."""
    slot = world.slots[slot_index]
    lane_half = world.lane_y[1]
    y_off = lane_frac * lane_half
    near = -y_off if slot.pose.y < 0 else y_off
    far = -near
    poses = []
    for dx in (-8.0, -5.0, -3.0):
        for y in (near, far):
            x = min(max(slot.pose.x + dx, world.lane_x[0] + 3.0), world.lane_x[1] - 3.0)
            poses.append(Pose2D(x, y, 0.0))
    return poses


def _entry_pose(target: Pose2D, d_entry: float) -> Pose2D:
    return Pose2D(
        target.x + d_entry * math.cos(target.theta),
        target.y + d_entry * math.sin(target.theta),
        target.theta,
    )


def plan_candidates(
    world: World, init: Pose2D, cfg: ExpertConfig
) -> list[np.ndarray]:
    """Collision-screened candidate waypoint plans, shortest first.

    Each plan is a Reeds-Shepp path to a slot-entry pose plus the straight
    reverse into the slot center, densified at sample_step.
    """
    target = world.target_pose()
    out = []
    for d_entry in cfg.entry_candidates:
        entry = _entry_pose(target, d_entry)
        paths = rs.all_paths(init, entry, cfg.turn_radius)
        paths.sort(key=lambda p: rs.path_length(p, cfg.turn_radius))
        for segs in paths[:12]:
            pts = rs.sample_path(init, segs, cfg.turn_radius, cfg.sample_step)
            # clearance needs margin away from the slot; inside the slot the
            # true neighbor margin is what it is
            ok = True
            for pose, _ in pts:
                _, _, _, near = slot_error(world, pose)
                margin = cfg.path_clearance if near != world.target_index else 0.05
                if clearance(world, pose) < margin:
                    ok = False
                    break
            if not ok:
                continue
            wp = [[p.x, p.y, p.theta] for p, _ in pts]
            n = max(1, int(math.ceil(d_entry / cfg.sample_step)))
            for k in range(1, n + 1):
                d = d_entry * k / n
                wp.append([
                    entry.x - d * math.cos(entry.theta),
                    entry.y - d * math.sin(entry.theta),
                    entry.theta,
                ])
            out.append(np.array(wp))
            break  # best collision-free word for this entry distance
    return out


def _rollout(world: World, init: Pose2D, waypoints: np.ndarray, cfg: ExpertConfig):
    tracker = TrackerState(
        waypoints,
        gains=cfg.gains,
        limits=SpeedLimits(cfg.v_cruise_fwd, cfg.v_cruise_rev, arrive_dist=cfg.arrive_dist),
        wheelbase=cfg.wheelbase,
        steer_max=cfg.steer_max,
    )
    state = VehicleState(init, v=0.0, wheelbase=cfg.wheelbase)
    traj = [(state.pose, state.v)]
    steps = int(cfg.timeout / cfg.dt)
    for _ in range(steps):
        cmd, done = track_step(state, tracker)
        if done:
            break
        state = bicycle_step(state, cmd, cfg.dt, steer_max=cfg.steer_max)
        traj.append((state.pose, state.v))
        if check_collision(world, state.pose):
            return None
    else:
        return None  # timeout
    for _ in range(cfg.rest_frames):
        traj.append((traj[-1][0], 0.0))
    return traj


def generate_episode(
    world: World, init: Pose2D, cfg: ExpertConfig = ExpertConfig()
) -> ExpertEpisode:
    """Plan and execute one expert parking maneuver.

    Raises GenerationError when no candidate yields a collision-free rollout
    ending inside the slot with pos_err < 0.3 m and ori_err < 3 degrees.
    """
    if check_collision(world, init):
        raise GenerationError("initial pose is in collision")
    target = world.target_pose()

    candidates = plan_candidates(world, init, cfg)
    attempts = 0
    for wp in candidates:
        if attempts >= cfg.max_attempts:
            break
        attempts += 1
        traj = _rollout(world, init, wp, cfg)
        if traj is None:
            continue
        final = traj[-1][0]
        pos_err, ori_err, inside, idx = slot_error(world, final)
        if idx == world.target_index and inside and pos_err < 0.3 and ori_err < math.radians(3.0):
            return ExpertEpisode(world, init, target, traj, cfg.dt, plan_path=wp)
    raise GenerationError(
        f"no valid expert maneuver after {attempts} attempts from {init}"
    )


def generate_dataset(
    lot_cfg: LotConfig,
    n_episodes: int,
    seed: int,
    cfg: ExpertConfig = ExpertConfig(),
    on_skip=None,
    indices=None,
) -> list[ExpertEpisode]:
    """Expert episodes spread uniformly over slots and canonical init poses.

    Deterministic per seed; failed generations are skipped (reported through
    on_skip) rather than aborting the dataset. indices restricts generation
    to a subset of episode numbers (for parallel workers); per-episode seeds
    depend only on (seed, episode number), so any split gives the same data.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    n_slots = 2 * lot_cfg.slots_per_side
    episodes = []
    for e in range(n_episodes) if indices is None else indices:
        slot = e % n_slots
        init_idx = (e // n_slots) % 6
        ep_seed = np.random.SeedSequence([seed, e]).generate_state(1)[0]
        world = build_lot(replace(lot_cfg, rng_seed=int(ep_seed)), slot)
        init = canonical_init_poses(world, slot)[init_idx]
        try:
            episodes.append(generate_episode(world, init, cfg))
        except GenerationError as err:
            if on_skip is not None:
                on_skip(e, err)
    return episodes


def write_jsonl(episodes: list[ExpertEpisode], path, manifest_path=None, meta=None):
    """One JSON record per episode; manifest carries a content hash."""
    h = hashlib.sha256()
    with open(path, "w") as f:
        for ep in episodes:
            line = json.dumps(ep.to_json(), sort_keys=True)
            h.update(line.encode())
            f.write(line + "\n")
    if manifest_path is not None:
        manifest = {
            "n_episodes": len(episodes),
            "content_hash": h.hexdigest(),
            "meta": meta or {},
        }
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return h.hexdigest()


def read_jsonl(path) -> list[ExpertEpisode]:
    episodes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                episodes.append(ExpertEpisode.from_json(json.loads(line)))
    return episodes
