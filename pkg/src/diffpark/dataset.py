"""Training-sample construction from expert episodes.

Episodes are cut into sliding windows; each window yields an ego-frame plan
of N_w future waypoints spaced T_d frames apart, conditioned on the raster
and target pose at the window-start frame. Hindsight target relabeling
perturbs the commanded target and repaints the raster accordingly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .se2 import DomainError, Pose2D, angle_wrap, compose, to_frame
from .world import (
    CH_FREE,
    CH_OCCUPIED,
    CH_TARGET,
    Rect,
    SegBev,
    _paint_rect,
    rasterize_bev,
)

T_D_DEFAULT = 5
N_W_DEFAULT = 16
SCALE_DEFAULT = 10.0  # m, plan normalization


@dataclass
class PlanSE2:
    """Ego-frame plan: N_w waypoints of (x, y, cos theta, sin theta)."""

    waypoints: np.ndarray  # (N_w, 4)

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 4:
            raise DomainError("plan waypoints must be (N_w, 4)")
        self.waypoints = w

    @property
    def n_w(self) -> int:
        return len(self.waypoints)

    def validate(self, tol: float = 1e-6) -> None:
        norms = np.hypot(self.waypoints[:, 2], self.waypoints[:, 3])
        if np.any(np.abs(norms - 1.0) > tol):
            raise DomainError("heading encoding off the unit circle")

    def renormalized(self) -> "PlanSE2":
        """Project (c, s) back onto the unit circle."""
        w = self.waypoints.copy()
        norms = np.hypot(w[:, 2], w[:, 3])
        norms = np.where(norms < 1e-9, 1.0, norms)
        w[:, 2] /= norms
        w[:, 3] /= norms
        return PlanSE2(w)

    def poses(self) -> list[Pose2D]:
        return [
            Pose2D(x, y, float(np.arctan2(s, c))) for x, y, c, s in self.waypoints
        ]


@dataclass
class Window:
    """One training window: start frame plus the T_d * N_w frames after it."""

    start_index: int
    start_pose: Pose2D
    poses: np.ndarray  # (T_d * N_w, 3), world frame
    padded: int = 0    # trailing entries that repeat the terminal pose


def segment_trajectory(traj, t_d: int = T_D_DEFAULT, n_w: int = N_W_DEFAULT) -> list[Window]:
    """Sliding windows with stride t_d over a dense trajectory.

    traj is a (L, 3) pose array or a list of (Pose2D, v) pairs. Each window
    holds the t_d * n_w frames after its start frame; short tails are padded
    by repeating the terminal pose.
    """
    if t_d < 1 or n_w < 1:
        raise DomainError("t_d and n_w must be >= 1")
    if len(traj) == 0:
        raise DomainError("empty trajectory")
    if isinstance(traj, np.ndarray):
        arr = np.asarray(traj, dtype=np.float64)
    else:
        arr = np.array([[p.x, p.y, p.theta] for p, _ in traj])

    length = t_d * n_w
    n = len(arr)
    windows = []
    start = 0
    while True:
        end = start + 1 + length
        body = arr[start + 1:end]
        pad = length - len(body)
        if pad > 0:
            body = np.vstack([body, np.repeat(arr[-1:], pad, axis=0)])
        windows.append(
            Window(start, Pose2D(*arr[start]), body, padded=pad)
        )
        start += t_d
        if start >= n - 1:
            break
    return windows


def downsample(win: Window, t_d: int = T_D_DEFAULT) -> PlanSE2:
    """Every t_d-th frame of a window as an ego-frame plan.

    Kept frames sit t_d, 2*t_d, ... frames after the window start, so the
    current pose itself is excluded; poses are expressed in the start-pose
    frame with heading encoded as (cos, sin).
    """
    if len(win.poses) % t_d != 0:
        raise DomainError("window length is not a multiple of t_d")
    kept = win.poses[t_d - 1::t_d]
    out = np.empty((len(kept), 4))
    for i, (x, y, th) in enumerate(kept):
        p = to_frame(Pose2D(x, y, th), win.start_pose)
        out[i] = (p.x, p.y, np.cos(p.theta), np.sin(p.theta))
    return PlanSE2(out)


def normalize_plan(p: PlanSE2, scale: float = SCALE_DEFAULT) -> PlanSE2:
    if scale <= 0:
        raise DomainError("scale must be positive")
    w = p.waypoints.copy()
    w[:, 0] /= scale
    w[:, 1] /= scale
    return PlanSE2(w)


def denormalize_plan(p: PlanSE2, scale: float = SCALE_DEFAULT) -> PlanSE2:
    if scale <= 0:
        raise DomainError("scale must be positive")
    w = p.waypoints.copy()
    w[:, 0] *= scale
    w[:, 1] *= scale
    return PlanSE2(w)


def plan_to_world(p: PlanSE2, frame: Pose2D) -> np.ndarray:
    """Map an ego-frame plan into world-frame (x, y, theta) waypoints."""
    out = np.empty((p.n_w, 3))
    for i, (x, y, c, s) in enumerate(p.waypoints):
        w = compose(frame, Pose2D(x, y, float(np.arctan2(s, c))))
        out[i] = (w.x, w.y, w.theta)
    return out


@dataclass
class TrainSample:
    """One diffusion/fusion training sample.

    plan is normalized and in the ego frame of cond_seg; target_pose is the
    commanded target in the same frame. Relabeled samples carry the perturbed
    target in cond_seg/target_pose while the plan stays the expert's;
    plan_supervised marks whether the plan loss may use this sample.
    """

    plan: PlanSE2
    cond_seg: SegBev
    target_pose: Pose2D
    is_relabeled: bool = False
    plan_supervised: bool = True
    slot_shape: tuple[float, float] = (5.0, 2.8)  # (length, width)


@dataclass(frozen=True)
class RelabelConfig:
    mu_a: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma_a: tuple[float, float, float] = (1.5, 1.5, 0.2)
    T_p: int = 4
    T_exp: int = 1
    iou_keep_plan: float = 0.5   # min target IoU for plan supervision
    swap_branch: bool = False    # use the schedule name's reading, not the literal one

    def __post_init__(self):
        if self.T_exp > self.T_p:
            raise DomainError("T_exp must not exceed T_p")
        if any(s < 0 for s in self.sigma_a):
            raise DomainError("sigma components must be >= 0")


def epoch_is_relabel(k: int, cfg: RelabelConfig) -> bool:
    """Whether epoch k (1-based) trains with relabeled targets."""
    if k < 1:
        raise DomainError("epoch index is 1-based")
    literal = (k % cfg.T_p) < cfg.T_exp
    return (not literal) if cfg.swap_branch else literal


def _paint_target(bev: SegBev, pose: Pose2D, slot_shape) -> None:
    bev.grid[:, :, CH_TARGET] = 0.0
    _paint_rect(bev, CH_TARGET, Rect(pose, slot_shape[0], slot_shape[1]))
    bev.grid[:, :, CH_TARGET] *= 1.0 - bev.grid[:, :, CH_OCCUPIED]
    bev.grid[:, :, CH_FREE] = 1.0 - np.maximum(
        bev.grid[:, :, CH_OCCUPIED], bev.grid[:, :, CH_TARGET]
    )


def target_iou(a: Pose2D, b: Pose2D, slot_shape, resolution: float = 0.05) -> float:
    """Grid-approximated IoU of two slot-sized rectangles."""
    length, width = slot_shape
    half = 0.5 * (max(abs(a.x), abs(b.x)) + max(abs(a.y), abs(b.y))) + length
    n = max(8, int(np.ceil(2 * half / resolution)))
    bev = SegBev(np.zeros((n, n, 3), dtype=np.float32), resolution, n * resolution)
    _paint_rect(bev, 0, Rect(a, length, width))
    _paint_rect(bev, 1, Rect(b, length, width))
    inter = float(np.sum((bev.grid[:, :, 0] > 0) & (bev.grid[:, :, 1] > 0)))
    union = float(np.sum((bev.grid[:, :, 0] > 0) | (bev.grid[:, :, 1] > 0)))
    return inter / union if union > 0 else 0.0


def relabel_target(sample: TrainSample, cfg: RelabelConfig, rng) -> TrainSample:
    """Hindsight relabeling: perturb the commanded target, repaint the raster.

    The plan is untouched. Freed old-target cells revert to free/occupied per
    the raster's occupied channel; perturbations that leave the raster extent
    are resampled up to 10 times, then clamped.
    """
    if sample.is_relabeled:
        raise DomainError("sample is already relabeled")
    bev = sample.cond_seg
    half = 0.5 * bev.extent
    mu = np.asarray(cfg.mu_a)
    sigma = np.asarray(cfg.sigma_a)
    old = sample.target_pose
    for _ in range(10):
        d = mu + sigma * rng.standard_normal(3)
        new = Pose2D(old.x + d[0], old.y + d[1], angle_wrap(old.theta + d[2]))
        if abs(new.x) <= half and abs(new.y) <= half:
            break
    else:
        new = Pose2D(
            float(np.clip(new.x, -half, half)),
            float(np.clip(new.y, -half, half)),
            new.theta,
        )
    out = bev.copy()
    _paint_target(out, new, sample.slot_shape)
    iou = target_iou(old, new, sample.slot_shape)
    return replace(
        sample,
        cond_seg=out,
        target_pose=new,
        is_relabeled=True,
        plan_supervised=iou > cfg.iou_keep_plan,
    )


def build_samples(
    episode,
    t_d: int = T_D_DEFAULT,
    n_w: int = N_W_DEFAULT,
    scale: float = SCALE_DEFAULT,
    resolution: float = 0.1,
    extent: float = 19.2,
) -> list[TrainSample]:
    """All training windows of one expert episode, rasters rendered fresh."""
    world = episode.world
    slot = world.target_slot
    samples = []
    for win in segment_trajectory(episode.trajectory, t_d, n_w):
        plan = normalize_plan(downsample(win, t_d), scale)
        bev = rasterize_bev(world, win.start_pose, resolution, extent)
        tgt = to_frame(world.target_pose(), win.start_pose)
        samples.append(
            TrainSample(plan, bev, tgt, slot_shape=(slot.length, slot.width))
        )
    return samples


# ---------------------------------------------------------------------------
# Shard I/O. Fixed-size records after a small header; plan/pose fields are
# little-endian float32, binary raster channels are bit-packed (the free
# channel is derived, so only occupied and target are stored).

_MAGIC = b"DDPS"
_VERSION = 1
_HEADER = struct.Struct("<4sHHHHfH")  # magic, version, n_w, H, W, resolution, reserved


def _record_size(n_w: int, h: int, w: int) -> int:
    bits = 2 * h * w
    return 4 * (4 * n_w + 3 + 2) + (bits + 7) // 8


def write_shard(samples: list[TrainSample], path) -> int:
    """Serialize samples to one binary shard; returns the byte count."""
    if not samples:
        raise DomainError("empty shard")
    s0 = samples[0]
    h, w = s0.cond_seg.grid.shape[:2]
    n_w = s0.plan.n_w
    total = 0
    with open(path, "wb") as f:
        hdr = _HEADER.pack(_MAGIC, _VERSION, n_w, h, w, s0.cond_seg.resolution, 0)
        f.write(hdr)
        total += len(hdr)
        for s in samples:
            if s.plan.n_w != n_w or s.cond_seg.grid.shape[:2] != (h, w):
                raise DomainError("inhomogeneous shard")
            head = np.concatenate([
                s.plan.waypoints.ravel(),
                np.array(s.target_pose.as_tuple()),
                np.array([float(s.is_relabeled), float(s.plan_supervised)]),
            ]).astype("<f4")
            occ = s.cond_seg.grid[:, :, CH_OCCUPIED] > 0.5
            tgt = s.cond_seg.grid[:, :, CH_TARGET] > 0.5
            bits = np.packbits(np.concatenate([occ.ravel(), tgt.ravel()]))
            f.write(head.tobytes())
            f.write(bits.tobytes())
            total += head.nbytes + bits.nbytes
    return total


def read_shard(path, slot_shape=(5.0, 2.8), extent: float = 19.2) -> list[TrainSample]:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, n_w, h, w, resolution, _ = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise DomainError(f"bad shard magic: {magic!r}")
    if version != _VERSION:
        raise DomainError(f"unsupported shard version: {version}")
    off = _HEADER.size
    rec = _record_size(n_w, h, w)
    if (len(raw) - off) % rec != 0:
        raise DomainError("truncated shard")
    n_float = 4 * n_w + 5
    samples = []
    while off < len(raw):
        head = np.frombuffer(raw, dtype="<f4", count=n_float, offset=off)
        off += 4 * n_float
        n_bytes = rec - 4 * n_float
        bits = np.unpackbits(
            np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=off)
        )[: 2 * h * w]
        off += n_bytes
        grid = np.zeros((h, w, 3), dtype=np.float32)
        grid[:, :, CH_OCCUPIED] = bits[: h * w].reshape(h, w)
        grid[:, :, CH_TARGET] = bits[h * w:].reshape(h, w)
        grid[:, :, CH_FREE] = 1.0 - np.maximum(
            grid[:, :, CH_OCCUPIED], grid[:, :, CH_TARGET]
        )
        plan = PlanSE2(head[: 4 * n_w].astype(np.float64).reshape(n_w, 4))
        tgt = Pose2D(*(float(v) for v in head[4 * n_w: 4 * n_w + 3]))
        samples.append(
            TrainSample(
                plan,
                SegBev(grid, float(resolution), extent),
                tgt,
                is_relabeled=bool(head[-2] > 0.5),
                plan_supervised=bool(head[-1] > 0.5),
                slot_shape=slot_shape,
            )
        )
    return samples
