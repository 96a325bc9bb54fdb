"""DDPM trajectory planner over ego-frame plans.

The denoiser is a small 1-D convolutional encoder-decoder over the waypoint
axis, modulated at each level by FiLM from the diffusion-step embedding and
the condition embedding. Conditioning is either the segmentation raster
alone (SegOnly) or raster plus pooled fusion features (EmbPlusSeg). A direct
regression head over the same condition encoder serves as a baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import nn
from .dataset import N_W_DEFAULT, PlanSE2, SCALE_DEFAULT, TrainSample, denormalize_plan
from .se2 import DomainError
from .world import ConfigError, SegBev


class CondMode(Enum):
    SegOnly = "seg"
    EmbPlusSeg = "emb+seg"


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T: int = 50, beta_1: float = 1e-4, beta_T: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1: {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1: {beta_1}, {beta_T}")
    betas = np.linspace(beta_1, beta_T, T)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas))


def forward_noise(tau0, i: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """sqrt(abar_i) tau0 + sqrt(1 - abar_i) eps; i is 1-based."""
    x0 = tau0.waypoints if isinstance(tau0, PlanSE2) else np.asarray(tau0)
    if not 1 <= i <= sched.T:
        raise DomainError(f"step {i} outside [1, {sched.T}]")
    if eps.shape != x0.shape:
        raise DomainError("noise shape mismatch")
    ab = sched.alpha_bars[i - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    n_w: int = N_W_DEFAULT
    widths: tuple[int, int] = (64, 128)
    step_dim: int = 32
    cond_pool: int = 8           # raster pool factor: 192 -> 24
    cond_hidden: int = 256
    cond_dim: int = 128
    feat_pool: int = 4           # FeatureGrid pool factor (EmbPlusSeg)
    feat_channels: int = 64
    feat_grid: int = 24
    mode: CondMode = CondMode.SegOnly
    grid: int = 192
    in_channels: int = 3
    scale: float = SCALE_DEFAULT
    sigma: str = "posterior"     # reverse-step variance: "posterior" or "beta"
    lr: float = 1e-3
    epochs: int = 40
    batch: int = 32


def init_denoiser_params(cfg: DenoiserConfig, rng) -> nn.ParamStore:
    p = nn.ParamStore()
    c1, c2 = cfg.widths
    # condition encoder
    seg_in = (cfg.grid // cfg.cond_pool) ** 2 * cfg.in_channels
    p.add("cond.w1", nn.he_init(rng, seg_in, cfg.cond_hidden))
    p.add("cond.b1", np.zeros(cfg.cond_hidden))
    p.add("cond.w2", nn.he_init(rng, cfg.cond_hidden, cfg.cond_dim))
    p.add("cond.b2", np.zeros(cfg.cond_dim))
    if cfg.mode is CondMode.EmbPlusSeg:
        feat_in = (cfg.feat_grid // cfg.feat_pool) ** 2 * cfg.feat_channels
        p.add("feat.w1", nn.he_init(rng, feat_in, cfg.cond_hidden))
        p.add("feat.b1", np.zeros(cfg.cond_hidden))
        p.add("feat.w2", nn.he_init(rng, cfg.cond_hidden, cfg.cond_dim))
        p.add("feat.b2", np.zeros(cfg.cond_dim))
    # step embedding perceptron
    p.add("step.w1", nn.he_init(rng, cfg.step_dim, cfg.cond_dim))
    p.add("step.b1", np.zeros(cfg.cond_dim))
    p.add("step.w2", nn.he_init(rng, cfg.cond_dim, cfg.cond_dim))
    p.add("step.b2", np.zeros(cfg.cond_dim))
    z_dim = 2 * cfg.cond_dim
    # backbone
    p.add("in.w", nn.he_init(rng, 3, 4, c1))
    p.add("in.b", np.zeros(c1))
    for name, ch in (("d1", c1), ("d2", c2), ("mid", c2), ("u1", c2), ("u2", c1)):
        p.add(f"{name}.conv.w", nn.he_init(rng, 3, ch, ch))
        p.add(f"{name}.conv.b", np.zeros(ch))
        p.add(f"{name}.film.w", np.zeros((z_dim, 2 * ch)))
        p.add(f"{name}.film.b", np.zeros(2 * ch))
    p.add("down1.w", nn.he_init(rng, 3, c1, c2))
    p.add("down1.b", np.zeros(c2))
    p.add("down2.w", nn.he_init(rng, 3, c2, c2))
    p.add("down2.b", np.zeros(c2))
    p.add("up1.w", nn.he_init(rng, 4, c2, c2))
    p.add("up1.b", np.zeros(c2))
    p.add("up2.w", nn.he_init(rng, 4, c2, c1))
    p.add("up2.b", np.zeros(c1))
    p.add("out.w", np.zeros((3, c1, 4)))   # eps_hat = 0 at init
    p.add("out.b", np.zeros(4))
    return p


def _pool_flatten(x: np.ndarray, pool: int) -> np.ndarray:
    b, h, w, c = x.shape
    pooled = x.reshape(b, h // pool, pool, w // pool, pool, c).mean(axis=(2, 4))
    return pooled.reshape(b, -1)


def pool_condition(seg, cfg: DenoiserConfig = DenoiserConfig()) -> np.ndarray:
    """Pooled-and-flattened raster condition, precomputable per sample."""
    seg = np.asarray(seg, dtype=np.float64)
    single = seg.ndim == 3
    if single:
        seg = seg[None]
    if seg.shape[1] != cfg.grid:
        raise DomainError(f"condition raster shape {seg.shape} mismatches config")
    out = _pool_flatten(seg, cfg.cond_pool)
    return out[0] if single else out


def encode_condition(p: nn.ParamStore, cond, cfg: DenoiserConfig) -> nn.Tensor:
    """Condition embedding from raster (and fusion features for EmbPlusSeg).

    cond is a (B, grid, grid, 3) raster (or an already pooled (B, n) array
    from pool_condition) for SegOnly, or a tuple of (raster, features
    (B, fh, fw, C)) for EmbPlusSeg. Inputs are plain arrays: no gradient
    flows into them (the planner never trains fusion).
    """
    if cfg.mode is CondMode.EmbPlusSeg:
        seg, feat = cond
    else:
        seg, feat = cond, None
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim >= 3:
        pooled = pool_condition(seg, cfg)
        if pooled.ndim == 1:
            pooled = pooled[None]
    else:
        pooled = seg if seg.ndim == 2 else seg[None]
    z = nn.Tensor(pooled)
    z = nn.silu(nn.matmul(z, p.tensor("cond.w1")) + p.tensor("cond.b1"))
    z = nn.matmul(z, p.tensor("cond.w2")) + p.tensor("cond.b2")
    if cfg.mode is CondMode.EmbPlusSeg:
        f = np.asarray(feat, dtype=np.float64)
        if f.ndim == 3:
            f = f[None]
        if f.ndim == 4:
            f = _pool_flatten(f, cfg.feat_pool)
        elif f.ndim == 1:
            f = f[None]
        zf = nn.Tensor(f)
        zf = nn.silu(nn.matmul(zf, p.tensor("feat.w1")) + p.tensor("feat.b1"))
        zf = nn.matmul(zf, p.tensor("feat.w2")) + p.tensor("feat.b2")
        z = z + zf
    return z


def _film_level(p: nn.ParamStore, x: nn.Tensor, z: nn.Tensor, name: str) -> nn.Tensor:
    b, l, c = x.shape
    gb = nn.matmul(z, p.tensor(f"{name}.film.w")) + p.tensor(f"{name}.film.b")
    gamma = nn.reshape(_slice_cols(gb, 0, c), (b, 1, c))
    beta = nn.reshape(_slice_cols(gb, c, 2 * c), (b, 1, c))
    one = nn.Tensor(np.ones((b, 1, c)))
    return nn.mul(one + gamma, x) + beta


def _slice_cols(t: nn.Tensor, lo: int, hi: int) -> nn.Tensor:
    def bw(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        nn._accum(t, full)
    return nn.Tensor(t.data[:, lo:hi], (t,), bw)


def _block(p: nn.ParamStore, x: nn.Tensor, z: nn.Tensor, name: str) -> nn.Tensor:
    h = _film_level(p, x, z, name)
    h = nn.silu(nn.conv1d(h, p.tensor(f"{name}.conv.w"), p.tensor(f"{name}.conv.b")))
    return x + h


def denoiser_forward(p: nn.ParamStore, tau_i: np.ndarray, i, cond_emb: nn.Tensor,
                     cfg: DenoiserConfig = DenoiserConfig()) -> nn.Tensor:
    """Predict the noise for a batch of noisy plans.

    tau_i: (B, n_w, 4); i: scalar or (B,) 1-based steps; cond_emb from
    encode_condition (shared per batch element).
    """
    x = np.asarray(tau_i, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b = x.shape[0]
    if x.shape[1] != cfg.n_w or x.shape[2] != 4:
        raise DomainError(f"plan shape {x.shape} mismatches config")
    steps = np.broadcast_to(np.asarray(i, dtype=np.float64), (b,))
    emb = nn.Tensor(nn.sinusoidal_embedding(steps, cfg.step_dim))
    s = nn.silu(nn.matmul(emb, p.tensor("step.w1")) + p.tensor("step.b1"))
    s = nn.matmul(s, p.tensor("step.w2")) + p.tensor("step.b2")
    z = nn.concat([s, cond_emb], axis=-1)

    h = nn.conv1d(nn.Tensor(x), p.tensor("in.w"), p.tensor("in.b"))
    h1 = _block(p, h, z, "d1")                                           # (B, 16, c1)
    h2 = nn.silu(nn.conv1d(h1, p.tensor("down1.w"), p.tensor("down1.b"), stride=2))
    h2 = _block(p, h2, z, "d2")                                          # (B, 8, c2)
    h3 = nn.silu(nn.conv1d(h2, p.tensor("down2.w"), p.tensor("down2.b"), stride=2))
    h3 = _block(p, h3, z, "mid")                                         # (B, 4, c2)
    u1 = nn.conv1d_transpose(h3, p.tensor("up1.w"), p.tensor("up1.b"), stride=2)
    u1 = _block(p, u1 + h2, z, "u1")                                     # (B, 8, c2)
    u2 = nn.conv1d_transpose(u1, p.tensor("up2.w"), p.tensor("up2.b"), stride=2)
    u2 = _block(p, u2 + h1, z, "u2")                                     # (B, 16, c1)
    return nn.conv1d(u2, p.tensor("out.w"), p.tensor("out.b"))


def _batch_cond(samples: list[TrainSample], cfg: DenoiserConfig, features=None,
                pooled=None):
    if pooled is None:
        pooled = pool_condition(
            np.stack([s.cond_seg.grid.astype(np.float64) for s in samples]), cfg
        )
    if features is None:
        return pooled
    return pooled, np.stack(features)


def train_step(
    p: nn.ParamStore,
    batch: list[TrainSample],
    sched: DiffusionSchedule,
    rng,
    opt: nn.Adam,
    cfg: DenoiserConfig = DenoiserConfig(),
    features=None,
    pooled=None,
) -> float:
    """One denoising-score-matching step on a batch of samples."""
    if not batch:
        raise DomainError("empty batch")
    b = len(batch)
    tau0 = np.stack([s.plan.waypoints for s in batch])
    steps = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(tau0.shape)
    ab = sched.alpha_bars[steps - 1][:, None, None]
    tau_i = np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps
    weights = np.array([[[float(s.plan_supervised)]] for s in batch])

    p.begin()
    cond = encode_condition(p, _batch_cond(batch, cfg, features, pooled), cfg)
    eps_hat = denoiser_forward(p, tau_i, steps, cond, cfg)
    loss = nn.mse(eps_hat, eps, weights)
    if not np.isfinite(loss.data):
        ids = [i for i in range(b)]
        raise DomainError(f"non-finite loss at opt step {opt.t + 1}, samples {ids}")
    nn.backward(loss)
    opt.step(p, p.grads())
    return float(loss.data)


def train_diffusion(
    samples: list[TrainSample],
    cfg: DenoiserConfig = DenoiserConfig(),
    sched: DiffusionSchedule | None = None,
    seed: int = 0,
    features=None,
    log=None,
    checkpoint=None,
    resume=None,
) -> nn.ParamStore:
    sched = sched or make_schedule()
    rng = np.random.default_rng(seed)
    p = init_denoiser_params(cfg, rng)
    opt = nn.Adam(lr=cfg.lr)
    n = len(samples)
    pooled_all = np.stack([pool_condition(s.cond_seg.grid, cfg) for s in samples])
    start = 1 if resume is None else nn.restore_state(resume, p, opt, rng)
    for epoch in range(start, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            feats = [features[i] for i in idx] if features is not None else None
            losses.append(
                train_step(p, [samples[i] for i in idx], sched, rng, opt, cfg,
                           feats, pooled_all[idx])
            )
        if log is not None:
            log(epoch, float(np.mean(losses)))
        if checkpoint is not None:
            checkpoint(epoch, nn.snapshot_state(epoch, p, opt, rng))
    return p


def sample_plan(
    p: nn.ParamStore,
    cond,
    sched: DiffusionSchedule,
    rng,
    cfg: DenoiserConfig = DenoiserConfig(),
) -> PlanSE2:
    """Ancestral DDPM sampling of one plan for one condition.

    The reverse-step variance is fixed (not learned): either the forward
    posterior variance beta_i (1 - abar_{i-1}) / (1 - abar_i) or beta_i
    itself, per cfg.sigma. No noise is added at the final step.
    """
    if cfg.sigma not in ("posterior", "beta"):
        raise ConfigError(f"unknown sigma mode: {cfg.sigma}")
    cond_emb = encode_condition(p, cond, cfg)
    tau = rng.standard_normal((1, cfg.n_w, 4))
    for i in range(sched.T, 0, -1):
        eps_hat = denoiser_forward(p, tau, i, cond_emb, cfg).data
        a = sched.alphas[i - 1]
        ab = sched.alpha_bars[i - 1]
        beta = sched.betas[i - 1]
        mu = (tau - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
        if not np.all(np.isfinite(mu)):
            raise DomainError(f"non-finite sample at step {i}")
        if i > 1:
            if cfg.sigma == "posterior":
                var = beta * (1.0 - sched.alpha_bars[i - 2]) / (1.0 - ab)
            else:
                var = beta
            tau = mu + math.sqrt(var) * rng.standard_normal(mu.shape)
        else:
            tau = mu
    plan = denormalize_plan(PlanSE2(tau[0]), cfg.scale)
    return plan.renormalized()


# -- regression baseline -----------------------------------------------------

def init_regression_params(cfg: DenoiserConfig, rng) -> nn.ParamStore:
    p = nn.ParamStore()
    seg_in = (cfg.grid // cfg.cond_pool) ** 2 * cfg.in_channels
    p.add("cond.w1", nn.he_init(rng, seg_in, cfg.cond_hidden))
    p.add("cond.b1", np.zeros(cfg.cond_hidden))
    p.add("cond.w2", nn.he_init(rng, cfg.cond_hidden, cfg.cond_dim))
    p.add("cond.b2", np.zeros(cfg.cond_dim))
    p.add("head.w1", nn.he_init(rng, cfg.cond_dim, cfg.cond_hidden))
    p.add("head.b1", np.zeros(cfg.cond_hidden))
    p.add("head.w2", nn.he_init(rng, cfg.cond_hidden, cfg.n_w * 4))
    p.add("head.b2", np.zeros(cfg.n_w * 4))
    return p


def regression_forward(p: nn.ParamStore, seg, cfg: DenoiserConfig = DenoiserConfig()) -> nn.Tensor:
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim >= 3:
        seg = pool_condition(seg, cfg)
    if seg.ndim == 1:
        seg = seg[None]
    z = nn.Tensor(seg)
    z = nn.silu(nn.matmul(z, p.tensor("cond.w1")) + p.tensor("cond.b1"))
    z = nn.silu(nn.matmul(z, p.tensor("cond.w2")) + p.tensor("cond.b2"))
    h = nn.silu(nn.matmul(z, p.tensor("head.w1")) + p.tensor("head.b1"))
    out = nn.matmul(h, p.tensor("head.w2")) + p.tensor("head.b2")
    return nn.reshape(out, (seg.shape[0], cfg.n_w, 4))


def train_regression(
    samples: list[TrainSample],
    cfg: DenoiserConfig = DenoiserConfig(),
    seed: int = 0,
    log=None,
    checkpoint=None,
    resume=None,
) -> nn.ParamStore:
    """Direct plan regression over the same condition encoder (baseline)."""
    rng = np.random.default_rng(seed)
    p = init_regression_params(cfg, rng)
    opt = nn.Adam(lr=cfg.lr)
    n = len(samples)
    pooled_all = np.stack([pool_condition(s.cond_seg.grid, cfg) for s in samples])
    start = 1 if resume is None else nn.restore_state(resume, p, opt, rng)
    for epoch in range(start, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            batch = [samples[i] for i in idx]
            tau0 = np.stack([s.plan.waypoints for s in batch])
            w = np.array([[[float(s.plan_supervised)]] for s in batch])
            p.begin()
            pred = regression_forward(p, pooled_all[idx], cfg)
            loss = nn.mse(pred, tau0, w)
            nn.backward(loss)
            opt.step(p, p.grads())
            losses.append(float(loss.data))
        if log is not None:
            log(epoch, float(np.mean(losses)))
        if checkpoint is not None:
            checkpoint(epoch, nn.snapshot_state(epoch, p, opt, rng))
    return p


def regression_plan(p: nn.ParamStore, seg, cfg: DenoiserConfig = DenoiserConfig()) -> PlanSE2:
    out = regression_forward(p, seg, cfg).data[0]
    return denormalize_plan(PlanSE2(out), cfg.scale).renormalized()
