"""Closed-loop evaluation harness: shift injection, rollout, metrics.

Episodes run perceive -> shift -> plan -> track at dt = 0.05 s with
receding-horizon replanning, terminate on collision, rest-in-slot, or
timeout, and are classified into six outcomes. Evaluation sweeps every slot
and canonical initial pose per shift level and aggregates per-slot rates.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .control import SpeedLimits, StanleyGains, TrackerState, track_step
from .dataset import N_W_DEFAULT, PlanSE2, T_D_DEFAULT, plan_to_world
from .expert import ExpertEpisode, canonical_init_poses
from .se2 import Pose2D, VehicleState, bicycle_step, to_frame
from .world import (
    CH_FREE,
    CH_OCCUPIED,
    CH_TARGET,
    ConfigError,
    LotConfig,
    SegBev,
    World,
    build_lot,
    check_collision,
    rasterize_bev,
    slot_error,
)


class ShiftLevel(Enum):
    Same = "same"
    Mild = "mild"
    Large = "large"


@dataclass(frozen=True)
class ShiftSpec:
    level: ShiftLevel = ShiftLevel.Same
    cell_flip_prob: float = 0.0
    blur_radius: int = 0
    occupancy_dilation: int = 0
    target_jitter_sigma: tuple[float, float] = (0.0, 0.0)  # (meters, radians)
    rng_seed: int = 0

    def __post_init__(self):
        if self.level is ShiftLevel.Same:
            if (self.cell_flip_prob or self.blur_radius or self.occupancy_dilation
                    or any(self.target_jitter_sigma)):
                raise ConfigError("Same level requires zero perturbations")


def shift_preset(level: ShiftLevel, rng_seed: int = 0) -> ShiftSpec:
    if level is ShiftLevel.Same:
        return ShiftSpec(level, rng_seed=rng_seed)
    if level is ShiftLevel.Mild:
        return ShiftSpec(level, 0.02, 1, 0, (0.1, 0.02), rng_seed)
    return ShiftSpec(ShiftLevel.Large, 0.05, 2, 1, (0.25, 0.05), rng_seed)


def apply_shift(seg: SegBev, spec: ShiftSpec, rng) -> SegBev:
    """Perturb a raster: cell flips, box blur, dilation, target jitter."""
    out = seg.copy()
    g = out.grid.astype(np.float64)

    if spec.target_jitter_sigma[0] or spec.target_jitter_sigma[1]:
        g[:, :, CH_TARGET] = _jitter_channel(
            g[:, :, CH_TARGET], spec.target_jitter_sigma, seg.resolution, rng
        )

    if spec.cell_flip_prob > 0:
        flips = rng.random(g.shape) < spec.cell_flip_prob
        g = np.where(flips, 1.0 - g, g)

    if spec.blur_radius > 0:
        k = 2 * spec.blur_radius + 1
        for c in range(g.shape[2]):
            g[:, :, c] = ndimage.uniform_filter(g[:, :, c], size=k, mode="constant")

    if spec.occupancy_dilation > 0:
        k = 2 * spec.occupancy_dilation + 1
        occ = g[:, :, CH_OCCUPIED] > 0.5
        g[:, :, CH_OCCUPIED] = np.maximum(
            g[:, :, CH_OCCUPIED],
            ndimage.binary_dilation(occ, np.ones((k, k))).astype(np.float64),
        )

    out.grid = np.clip(g, 0.0, 1.0).astype(np.float32)
    return out


def _jitter_channel(ch: np.ndarray, sigma: tuple, res: float, rng) -> np.ndarray:
    """Rigidly displace a channel: rotate about its centroid, then translate."""
    dx = rng.normal(0.0, sigma[0]) / res
    dy = rng.normal(0.0, sigma[0]) / res
    dth = rng.normal(0.0, sigma[1])
    mass = ch.sum()
    if mass <= 0:
        return ch
    rows, cols = np.nonzero(ch > 0)
    cr, cc = rows.mean(), cols.mean()
    c, s = math.cos(dth), math.sin(dth)
    # inverse map: output cell -> input cell (rotate about centroid, shift)
    mat = np.array([[c, -s], [s, c]])
    offset = np.array([cr, cc]) - mat @ np.array([cr + dy, cc + dx])
    return ndimage.affine_transform(ch, mat, offset=offset, order=0, mode="constant")


class Outcome(Enum):
    TargetSuccess = "target_success"
    TargetFail = "target_fail"
    NonTargetSuccess = "nontarget_success"
    NonTargetFail = "nontarget_fail"
    Collision = "collision"
    Timeout = "timeout"


@dataclass
class EpisodeResult:
    outcome: Outcome
    final_pose: Pose2D
    pos_err: float           # nan unless the episode ended in a slot
    ori_err: float
    duration: float
    inference_times: list[float]
    trace: list[Pose2D]


@dataclass(frozen=True)
class HarnessConfig:
    dt: float = 0.05
    timeout: float = 60.0
    replan_waypoints: int = 8
    deviation_limit: float = 0.5
    rest_speed: float = 0.05
    rest_time: float = 1.0
    rest_slot_dist: float = 2.0   # only rest within this of a slot center parks
    min_replan_interval: float = 0.5
    success_pos: float = 0.5
    success_ori: float = math.radians(5.0)
    gains: StanleyGains = field(default_factory=StanleyGains)
    limits: SpeedLimits = field(default_factory=lambda: SpeedLimits(arrive_dist=0.15))


def run_episode(
    world: World,
    policy,
    shift: ShiftSpec,
    init: Pose2D,
    cfg: HarnessConfig = HarnessConfig(),
    rng=None,
) -> EpisodeResult:
    """Execute one closed-loop parking episode.

    policy.plan(bev, target_ego, rng) -> PlanSE2 in the ego frame of bev.
    """
    if check_collision(world, init):
        raise ConfigError("initial pose is in collision")
    rng = rng if rng is not None else np.random.default_rng(shift.rng_seed)
    state = VehicleState(init, v=0.0)
    trace = [state.pose]
    inference_times: list[float] = []
    tracker = None
    consumed_base = 0
    rest_elapsed = 0.0
    last_replan = -math.inf
    t = 0.0
    n_steps = int(round(cfg.timeout / cfg.dt))

    def classify(pose: Pose2D, duration: float) -> EpisodeResult | None:
        pos_err, ori_err, inside, idx = slot_error(world, pose)
        if idx is None or pos_err > cfg.rest_slot_dist:
            return None
        ok = inside and pos_err < cfg.success_pos and ori_err < cfg.success_ori
        if idx == world.target_index:
            outcome = Outcome.TargetSuccess if ok else Outcome.TargetFail
        else:
            outcome = Outcome.NonTargetSuccess if ok else Outcome.NonTargetFail
        return EpisodeResult(outcome, pose, pos_err, ori_err, duration,
                             inference_times, trace)

    for step in range(n_steps):
        need_replan = tracker is None
        if tracker is not None and t - last_replan >= cfg.min_replan_interval:
            dev = min(
                math.hypot(w[0] - state.pose.x, w[1] - state.pose.y)
                for w in tracker.waypoints
            )
            if (tracker.source_progress - consumed_base >= cfg.replan_waypoints
                    or dev > cfg.deviation_limit):
                need_replan = True
        if need_replan:
            bev = rasterize_bev(world, state.pose)
            shifted = apply_shift(bev, shift, rng)
            target_ego = to_frame(world.target_pose(), state.pose)
            if hasattr(policy, "observe"):
                policy.observe(state.pose)
            t0 = time.perf_counter()
            plan = policy.plan(shifted, target_ego, rng)
            inference_times.append(time.perf_counter() - t0)
            wp = plan_to_world(plan, state.pose)
            tracker = TrackerState(wp, gains=cfg.gains, limits=cfg.limits)
            consumed_base = tracker.source_progress
            last_replan = t

        cmd, done = track_step(state, tracker)
        if done and t - last_replan >= cfg.min_replan_interval:
            tracker = None  # plan exhausted: replan next step
        state = bicycle_step(state, cmd, cfg.dt)
        t += cfg.dt
        trace.append(state.pose)

        if check_collision(world, state.pose):
            return EpisodeResult(Outcome.Collision, state.pose, math.nan, math.nan,
                                 t, inference_times, trace)
        rest_elapsed = rest_elapsed + cfg.dt if abs(state.v) < cfg.rest_speed else 0.0
        if rest_elapsed >= cfg.rest_time:
            res = classify(state.pose, t)
            if res is not None:
                return res
            rest_elapsed = 0.0  # at rest outside any slot: keep trying

    return EpisodeResult(Outcome.Timeout, state.pose, math.nan, math.nan,
                         t, inference_times, trace)


# -- policies ----------------------------------------------------------------

class ExpertReplayPolicy:
    """Oracle policy replaying a pre-generated expert plan.

    Each plan request returns a window of the expert's geometric plan path
    (not the realized rollout: that was driven with saturated steering, so
    re-tracking it would leave no corrective margin). The window starts at
    the path point nearest the vehicle, advanced monotonically because the
    path crosses near itself around gear cusps. run_episode supplies the
    vehicle pose through observe().
    """

    # plan-path samples are 0.1 m apart; one emitted waypoint per 0.5 m
    _STRIDE = 5

    def __init__(self, episode: ExpertEpisode, n_w: int = N_W_DEFAULT):
        if episode.plan_path is None:
            raise ConfigError("episode has no stored plan path to replay")
        self.path = np.asarray(episode.plan_path, dtype=float)
        self.n_w = n_w
        self.pose: Pose2D | None = None
        self._cursor = 0
        self._seg = 0
        self._bounds = self._cusp_bounds(self.path)

    @staticmethod
    def _cusp_bounds(path: np.ndarray) -> list[int]:
        """Indices delimiting constant-gear runs: [0, cusp..., last]."""
        bounds = [0]
        prev = 0.0
        for i in range(len(path) - 1):
            dx, dy = path[i + 1, 0] - path[i, 0], path[i + 1, 1] - path[i, 1]
            if math.hypot(dx, dy) < 1e-9:
                continue
            sign = 1.0 if dx * math.cos(path[i, 2]) + dy * math.sin(path[i, 2]) >= 0 else -1.0
            if prev != 0.0 and sign != prev:
                bounds.append(i)
            prev = sign
        bounds.append(len(path) - 1)
        return bounds

    def observe(self, pose: Pose2D) -> None:
        self.pose = pose

    def plan(self, bev: SegBev, target_ego: Pose2D, rng) -> PlanSE2:
        if self.pose is None:
            raise ConfigError("replay policy requires observe() before plan()")
        pose = self.pose
        # Windows never cross a gear cusp: each one ends at the next cusp (or
        # the terminal), so direction changes coincide with plan terminals
        # where the tracker has ramped the vehicle to a stop. The cursor is
        # monotone because the path crosses near itself around cusps.
        while True:
            lo, hi = self._bounds[self._seg], self._bounds[self._seg + 1]
            tail = self.path[max(self._cursor, lo):hi + 1]
            d = np.hypot(tail[:, 0] - pose.x, tail[:, 1] - pose.y)
            self._cursor = max(self._cursor, lo) + int(np.argmin(d))
            if hi - self._cursor <= 1 and self._seg + 2 < len(self._bounds):
                self._seg += 1
                continue
            break
        idxs = np.minimum(self._cursor + self._STRIDE * np.arange(1, self.n_w + 1), hi)
        if idxs[0] >= hi and self._cursor < hi:
            # keep a penultimate sample so a terminal-only window still
            # carries the approach direction
            idxs[0] = hi - 1
        wps = np.empty((self.n_w, 4))
        for k, i in enumerate(idxs):
            p = to_frame(Pose2D(*self.path[i]), pose)
            wps[k] = (p.x, p.y, math.cos(p.theta), math.sin(p.theta))
        return PlanSE2(wps)


class DiffusionPolicy:
    """Samples a plan from a trained denoiser per replan request."""

    def __init__(self, params, sched, cfg, fusion_params=None, fusion_cfg=None):
        from .diffusion import CondMode
        self.params = params
        self.sched = sched
        self.cfg = cfg
        self.fusion_params = fusion_params
        self.fusion_cfg = fusion_cfg
        if cfg.mode is CondMode.EmbPlusSeg and fusion_params is None:
            raise ConfigError("EmbPlusSeg policy needs fusion weights")

    def plan(self, bev: SegBev, target_ego: Pose2D, rng) -> PlanSE2:
        from .diffusion import CondMode, sample_plan
        from .fusion import fusion_forward
        if self.cfg.mode is CondMode.EmbPlusSeg:
            _, feat = fusion_forward(self.fusion_params, bev, target_ego,
                                     self.fusion_cfg)
            cond = (bev.grid[None].astype(np.float64), feat.data)
        else:
            cond = bev.grid.astype(np.float64)
        return sample_plan(self.params, cond, self.sched, rng, self.cfg)


class RegressionPolicy:
    """Single-step plan regression baseline."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg

    def plan(self, bev: SegBev, target_ego: Pose2D, rng) -> PlanSE2:
        from .diffusion import regression_plan
        return regression_plan(self.params, bev.grid.astype(np.float64), self.cfg)


# -- evaluation --------------------------------------------------------------

_RATE_KEYS = ("TSR", "TFR", "NTSR", "NTFR", "CR", "TR")
_OUTCOME_KEY = {
    Outcome.TargetSuccess: "TSR",
    Outcome.TargetFail: "TFR",
    Outcome.NonTargetSuccess: "NTSR",
    Outcome.NonTargetFail: "NTFR",
    Outcome.Collision: "CR",
    Outcome.Timeout: "TR",
}


@dataclass
class MetricsTable:
    rates: dict       # key -> (mean, std) across slots
    ape: tuple        # (mean, std) meters, success episodes only
    aoe: tuple        # (mean, std) degrees
    apt: tuple        # (mean, std) seconds
    ait: tuple        # (mean, std) seconds
    n_episodes: int

    def to_json(self) -> dict:
        return {
            "rates": {k: list(v) for k, v in self.rates.items()},
            "APE_m": list(self.ape),
            "AOE_deg": list(self.aoe),
            "APT_s": list(self.apt),
            "AIT_s": list(self.ait),
            "n_episodes": self.n_episodes,
        }


def aggregate(results: dict) -> MetricsTable:
    """Per-slot outcome rates, mean +/- std across slots.

    results: {(slot, init): EpisodeResult}
    """
    slots = sorted({k[0] for k in results})
    per_slot = {key: [] for key in _RATE_KEYS}
    for slot in slots:
        eps = [r for (s, _), r in results.items() if s == slot]
        for key in _RATE_KEYS:
            per_slot[key].append(
                sum(1 for r in eps if _OUTCOME_KEY[r.outcome] == key) / len(eps)
            )
    rates = {
        k: (float(np.mean(v)), float(np.std(v))) for k, v in per_slot.items()
    }
    succ = [r for r in results.values() if r.outcome is Outcome.TargetSuccess]
    ape = _mean_std([r.pos_err for r in succ])
    aoe = _mean_std([math.degrees(r.ori_err) for r in succ])
    apt = _mean_std([r.duration for r in succ])
    ait = _mean_std([t for r in results.values() for t in r.inference_times])
    return MetricsTable(rates, ape, aoe, apt, ait, len(results))


def _mean_std(vals) -> tuple:
    if not vals:
        return (math.nan, math.nan)
    return (float(np.mean(vals)), float(np.std(vals)))


def episode_seed(master: int, level: ShiftLevel, slot: int, init: int) -> int:
    levels = list(ShiftLevel)
    return int(np.random.SeedSequence(
        [master, levels.index(level), slot, init]
    ).generate_state(1)[0])


def evaluate(
    policy_factory,
    levels=(ShiftLevel.Same, ShiftLevel.Mild, ShiftLevel.Large),
    lot_cfg: LotConfig = LotConfig(),
    master_seed: int = 0,
    cfg: HarnessConfig = HarnessConfig(),
    init_indices=range(6),
    slots=None,
    on_episode=None,
) -> dict:
    """Full metric sweep; returns {level: (MetricsTable, episode rows)}.

    policy_factory(world, level, slot, init_idx, rng) -> policy. Worlds are
    shared across levels (occupancy seeded by (master, slot, init)) so level
    comparisons see identical scenes.
    """
    slot_list = list(range(2 * lot_cfg.slots_per_side)) if slots is None else list(slots)
    out = {}
    for level in levels:
        results = {}
        rows = []
        for slot in slot_list:
            world_seed = int(np.random.SeedSequence(
                [master_seed, slot, 1]).generate_state(1)[0])
            world = build_lot(replace(lot_cfg, rng_seed=world_seed), slot)
            inits = canonical_init_poses(world, slot)
            for init_idx in init_indices:
                seed = episode_seed(master_seed, level, slot, init_idx)
                rng = np.random.default_rng(seed)
                spec = shift_preset(level, seed)
                policy = policy_factory(world, level, slot, init_idx, rng)
                res = run_episode(world, policy, spec, inits[init_idx], cfg, rng)
                results[(slot, init_idx)] = res
                rows.append({
                    "level": level.value,
                    "slot": slot,
                    "init": init_idx,
                    "outcome": res.outcome.value,
                    "pos_err_m": _fmt(res.pos_err),
                    "ori_err_deg": _fmt(math.degrees(res.ori_err))
                    if math.isfinite(res.ori_err) else "",
                    "duration_s": f"{res.duration:.2f}",
                    "n_replans": len(res.inference_times),
                })
                if on_episode is not None:
                    on_episode(level, slot, init_idx, res)
        out[level] = (aggregate(results), rows)
    return out


def _fmt(v: float) -> str:
    return f"{v:.4f}" if math.isfinite(v) else ""


def write_results(out: dict, out_dir, config_doc=None) -> None:
    """CSV of per-episode rows plus one summary JSON per level."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    all_rows = [row for table, rows in out.values() for row in rows]
    fields = ["level", "slot", "init", "outcome", "pos_err_m", "ori_err_deg",
              "duration_s", "n_replans"]
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(all_rows)
    for level, (table, _) in out.items():
        doc = {"level": level.value, "metrics": table.to_json()}
        if config_doc is not None:
            doc["config"] = config_doc
        with open(os.path.join(out_dir, f"summary_{level.value}.json"), "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
