"""Conditioning network: raster encoder, target fusion, segmentation head.

The encoder never sees the raster's target channel; the commanded target
enters only as a pose token through cross-attention (and optionally FiLM).
The segmentation head must therefore reconstruct the target region from the
pose token plus lot geometry, which is what hindsight relabeling trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import (
    RelabelConfig,
    SCALE_DEFAULT,
    TrainSample,
    epoch_is_relabel,
    relabel_target,
)
from .se2 import DomainError, Pose2D
from .world import CH_TARGET, SegBev


@dataclass(frozen=True)
class FusionConfig:
    grid: int = 192
    in_channels: int = 3
    enc_channels: tuple[int, ...] = (16, 32, 64)
    attn_dim: int = 32
    film_hidden: int = 64
    target_class_weight: float = 10.0
    pose_scale: float = SCALE_DEFAULT
    film_from_target: bool = False
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 16

    @property
    def stride(self) -> int:
        return 2 ** len(self.enc_channels)

    @property
    def feat(self) -> int:
        return self.grid // self.stride

    @property
    def channels(self) -> int:
        return self.enc_channels[-1]


@dataclass
class FeatureGrid:
    """Ego-frame BEV feature map (h, w, C) or batched (B, h, w, C)."""

    grid: np.ndarray


# The encoder input mask: the target channel is withheld from the raster
# (the raster plays the camera's role and the target is not observable in
# it); free and occupied pass through.
_INPUT_MASK = np.array([1.0, 1.0, 0.0])


def init_fusion_params(cfg: FusionConfig, rng) -> nn.ParamStore:
    p = nn.ParamStore()
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.enc_channels):
        p.add(f"enc{i}.w", nn.he_init(rng, 3, 3, c_in, c_out))
        p.add(f"enc{i}.b", np.zeros(c_out))
        c_in = c_out
    c = cfg.channels
    d = cfg.attn_dim
    p.add("attn.emb", nn.he_init(rng, 4, d))
    p.add("attn.wq", nn.he_init(rng, c, d))
    p.add("attn.wk", nn.he_init(rng, d, d))
    p.add("attn.wv", nn.he_init(rng, d, d))
    p.add("attn.wo", np.zeros((d, c)))   # residual identity at init
    film_in = d if cfg.film_from_target else c
    p.add("film.w1", nn.he_init(rng, film_in, cfg.film_hidden))
    p.add("film.b1", np.zeros(cfg.film_hidden))
    p.add("film.w2", np.zeros((cfg.film_hidden, 2 * c)))  # gamma=1, beta=0 at init
    p.add("film.b2", np.zeros(2 * c))
    dec = (c,) + tuple(reversed(cfg.enc_channels[:-1])) + (cfg.in_channels,)
    for i in range(len(dec) - 1):
        p.add(f"dec{i}.w", nn.he_init(rng, 4, 4, dec[i], dec[i + 1]))
        p.add(f"dec{i}.b", np.zeros(dec[i + 1]))
    return p


def _as_batch(seg) -> np.ndarray:
    if isinstance(seg, SegBev):
        return seg.grid[None].astype(np.float64)
    arr = np.asarray(seg, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def _encode(p: nn.ParamStore, x: np.ndarray, cfg: FusionConfig) -> nn.Tensor:
    if x.shape[1] != cfg.grid or x.shape[3] != cfg.in_channels:
        raise DomainError(f"raster shape {x.shape} does not match config")
    t = nn.Tensor(x * _INPUT_MASK)
    for i in range(len(cfg.enc_channels)):
        t = nn.silu(nn.conv2d(t, p.tensor(f"enc{i}.w"), p.tensor(f"enc{i}.b"),
                              stride=2, pad=(1, 1)))
    return t


def _pose_features(targets: list[Pose2D], scale: float) -> np.ndarray:
    return np.array([
        [t.x / scale, t.y / scale, math.cos(t.theta), math.sin(t.theta)]
        for t in targets
    ])


def _query_posenc(cfg: FusionConfig) -> np.ndarray:
    """Fixed sin/cos positional encoding of feature cells, (h*w, attn_dim)."""
    h = cfg.feat
    u = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, u, indexing="ij")
    coords = np.stack([uu.ravel(), vv.ravel()], axis=1)
    half = cfg.attn_dim // 4
    freqs = (2.0 ** np.arange(half)) * math.pi
    ang = coords[:, :, None] * freqs           # (h*w, 2, half)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)
    return enc.reshape(h * h, 4 * half)[:, :cfg.attn_dim]


def _attend(p: nn.ParamStore, fb: nn.Tensor, targets: list[Pose2D],
            cfg: FusionConfig) -> tuple[nn.Tensor, nn.Tensor]:
    """Single-token cross-attention; returns (fused features, pose token)."""
    b, h, w, c = fb.shape
    token = nn.matmul(nn.Tensor(_pose_features(targets, cfg.pose_scale)),
                      p.tensor("attn.emb"))                     # (B, d)
    cells = nn.reshape(fb, (b, h * w, c))
    q = nn.matmul(cells, p.tensor("attn.wq")) + nn.Tensor(_query_posenc(cfg))
    k = nn.matmul(token, p.tensor("attn.wk"))                   # (B, d)
    v = nn.matmul(token, p.tensor("attn.wv"))
    scores = nn.mean(nn.mul(q, nn.reshape(k, (b, 1, cfg.attn_dim))), axis=-1,
                     keepdims=True)
    scores = nn.mul_const(scores, math.sqrt(cfg.attn_dim))      # q.k / sqrt(d)
    weights = nn.softmax(scores, axis=-1)                       # singleton: all ones
    attn = nn.mul(weights, nn.reshape(v, (b, 1, cfg.attn_dim)))
    out = cells + nn.matmul(attn, p.tensor("attn.wo"))
    return nn.reshape(out, (b, h, w, c)), token


def _film(p: nn.ParamStore, fb: nn.Tensor, token: nn.Tensor,
          cfg: FusionConfig) -> nn.Tensor:
    b, h, w, c = fb.shape
    src = token if cfg.film_from_target else nn.global_avg_pool(fb)
    hid = nn.silu(nn.matmul(src, p.tensor("film.w1")) + p.tensor("film.b1"))
    gb = nn.matmul(hid, p.tensor("film.w2")) + p.tensor("film.b2")   # (B, 2C)
    gamma_part = nn.reshape(_slice_last(gb, 0, c), (b, 1, 1, c))
    beta_part = nn.reshape(_slice_last(gb, c, 2 * c), (b, 1, 1, c))
    one = nn.Tensor(np.ones((b, 1, 1, c)))
    return nn.mul(one + gamma_part, fb) + beta_part


def _slice_last(t: nn.Tensor, lo: int, hi: int) -> nn.Tensor:
    sl = (slice(None),) * (t.data.ndim - 1) + (slice(lo, hi),)

    def bw(g):
        full = np.zeros_like(t.data)
        full[sl] = g
        nn._accum(t, full)
    return nn.Tensor(t.data[sl], (t,), bw)


def _decode(p: nn.ParamStore, fb: nn.Tensor, cfg: FusionConfig) -> nn.Tensor:
    t = fb
    n_dec = len(cfg.enc_channels)
    for i in range(n_dec):
        t = nn.conv2d_transpose(t, p.tensor(f"dec{i}.w"), p.tensor(f"dec{i}.b"),
                                stride=2, pad=(1, 1))
        if i < n_dec - 1:
            t = nn.silu(t)
    return t  # logits (B, grid, grid, 3)


def fusion_forward(
    p: nn.ParamStore, seg, targets, cfg: FusionConfig = FusionConfig()
) -> tuple[nn.Tensor, nn.Tensor]:
    """Full conditioning pass; returns (seg logits, fused FeatureGrid tensor)."""
    x = _as_batch(seg)
    if isinstance(targets, Pose2D):
        targets = [targets]
    fb = _encode(p, x, cfg)
    fused, token = _attend(p, fb, targets, cfg)
    fused = _film(p, fused, token, cfg)
    logits = _decode(p, fused, cfg)
    return logits, fused


# -- public single-sample wrappers ------------------------------------------

def encode_seg(seg: SegBev, p: nn.ParamStore, cfg: FusionConfig = FusionConfig()) -> FeatureGrid:
    return FeatureGrid(_encode(p, _as_batch(seg), cfg).data[0])


def cross_attend(fb: FeatureGrid, target: Pose2D, p: nn.ParamStore,
                 cfg: FusionConfig = FusionConfig()) -> FeatureGrid:
    t = nn.Tensor(fb.grid[None] if fb.grid.ndim == 3 else fb.grid)
    out, _ = _attend(p, t, [target], cfg)
    return FeatureGrid(out.data[0])


def film_modulate(fb: FeatureGrid, p: nn.ParamStore,
                  cfg: FusionConfig = FusionConfig(),
                  target: Pose2D | None = None) -> FeatureGrid:
    t = nn.Tensor(fb.grid[None] if fb.grid.ndim == 3 else fb.grid)
    if cfg.film_from_target:
        if target is None:
            raise DomainError("film_from_target requires the target pose")
        token = nn.matmul(nn.Tensor(_pose_features([target], cfg.pose_scale)),
                          p.tensor("attn.emb"))
    else:
        token = nn.Tensor(np.zeros((1, cfg.attn_dim)))
    return FeatureGrid(_film(p, t, token, cfg).data[0])


def seg_head(fb: FeatureGrid, p: nn.ParamStore,
             cfg: FusionConfig = FusionConfig()) -> SegBev:
    t = nn.Tensor(fb.grid[None] if fb.grid.ndim == 3 else fb.grid)
    probs = nn.softmax(_decode(p, t, cfg), axis=-1)
    return SegBev(probs.data[0].astype(np.float32))


def fusion_loss(logits: nn.Tensor, labels: np.ndarray,
                cfg: FusionConfig = FusionConfig()) -> nn.Tensor:
    weights = np.ones(cfg.in_channels)
    weights[CH_TARGET] = cfg.target_class_weight
    return nn.weighted_ce(logits, labels, weights)


# -- training ----------------------------------------------------------------

def _batch_arrays(samples: list[TrainSample]):
    segs = np.stack([s.cond_seg.grid.astype(np.float64) for s in samples])
    targets = [s.target_pose for s in samples]
    return segs, targets


def train_fusion(
    samples: list[TrainSample],
    cfg: FusionConfig = FusionConfig(),
    relabel: RelabelConfig | None = None,
    seed: int = 0,
    log=None,
    checkpoint=None,
    resume=None,
) -> nn.ParamStore:
    """Train the conditioning network on expert samples.

    When a RelabelConfig is given, epochs selected by its schedule perturb
    every sample's target and supervise the segmentation head with the
    relabeled raster. checkpoint(epoch, snapshot) is called after each
    epoch; resume restarts from such a snapshot.
    """
    rng = np.random.default_rng(seed)
    p = init_fusion_params(cfg, rng)
    opt = nn.Adam(lr=cfg.lr)
    n = len(samples)
    start = 1 if resume is None else nn.restore_state(resume, p, opt, rng)
    for epoch in range(start, cfg.epochs + 1):
        use_relabel = relabel is not None and epoch_is_relabel(epoch, relabel)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch):
            batch = [samples[i] for i in order[lo:lo + cfg.batch]]
            if use_relabel:
                batch = [relabel_target(s, relabel, rng) for s in batch]
            segs, targets = _batch_arrays(batch)
            p.begin()
            logits, _ = fusion_forward(p, segs, targets, cfg)
            loss = fusion_loss(logits, segs, cfg)
            nn.backward(loss)
            opt.step(p, p.grads())
            losses.append(float(loss.data))
        if log is not None:
            log(epoch, float(np.mean(losses)), use_relabel)
        if checkpoint is not None:
            checkpoint(epoch, nn.snapshot_state(epoch, p, opt, rng))
    return p


def target_iou_score(
    p: nn.ParamStore, samples: list[TrainSample], cfg: FusionConfig = FusionConfig()
) -> float:
    """Mean IoU of the predicted vs labeled target channel (argmax decode)."""
    ious = []
    for s in samples:
        logits, _ = fusion_forward(p, s.cond_seg, s.target_pose, cfg)
        pred = np.argmax(logits.data[0], axis=-1) == CH_TARGET
        label = s.cond_seg.grid[:, :, CH_TARGET] > 0.5
        union = np.logical_or(pred, label).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(pred, label).sum() / union)
    return float(np.mean(ious)) if ious else 0.0
