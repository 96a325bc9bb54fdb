"""Layered run configuration: defaults < config file < overrides.

The config document is a flat mapping of dotted keys to plain values,
parsed from `key = value` lines. The fully resolved document is embedded
in every artifact a run produces (dataset manifests, weights metadata,
result summaries) so provenance is explicit.
"""

from __future__ import annotations

import ast
import os
from dataclasses import replace

from .control import StanleyGains
from .dataset import RelabelConfig
from .diffusion import CondMode, DenoiserConfig
from .fusion import FusionConfig
from .harness import HarnessConfig
from .world import LotConfig
from .expert import ExpertConfig


class ConfigError(ValueError):
    pass


ENV_CONFIG_PATH = "DIFFPARK_CONFIG"

DEFAULTS = {
    # lot geometry and population
    "lot.slots_per_side": 16,
    "lot.occupancy_rate": 0.6,
    "lot.lane_width": 6.5,
    "lot.rng_seed": 0,
    # expert data generation
    "expert.episodes": 800,
    "expert.seed": 7,
    "expert.turn_radius_margin": 1.2,
    "expert.max_attempts": 20,
    # dataset windowing
    "dataset.t_d": 5,
    "dataset.n_w": 16,
    "dataset.scale": 10.0,
    # hindsight relabeling
    "relabel.t_p": 4,
    "relabel.t_exp": 1,
    "relabel.iou_keep_plan": 0.5,
    "relabel.swap_branch": False,
    # fusion training
    "fusion.epochs": 20,
    "fusion.lr": 1e-3,
    "fusion.batch": 16,
    "fusion.target_class_weight": 10.0,
    "fusion.film_from_target": False,
    # diffusion training and sampling
    "diffusion.mode": "seg_only",
    "diffusion.epochs": 40,
    "diffusion.lr": 1e-3,
    "diffusion.batch": 32,
    "diffusion.sigma": "posterior",
    "diffusion.seed": 0,
    # tracking gains
    "gains.k_e": 1.0,
    "gains.k_y": 2.0,
    "gains.lookahead_n": 3,
    "gains.v_soft": 0.5,
    # closed-loop harness
    "harness.timeout": 60.0,
    "harness.replan_waypoints": 8,
    "harness.deviation_limit": 0.5,
    # evaluation protocol
    "eval.master_seed": 0,
    "eval.levels": "same,mild,large",
    # run control
    "run.jobs": 0,            # 0 = all available cores
    "run.deterministic": True,
    "run.seed": 0,
}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_file(path) -> dict:
    """Parse a `key = value` config file; '#' starts a comment."""
    doc = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            key, value = line.split("=", 1)
            doc[key.strip()] = _parse_value(value)
    return doc


def resolve(file_path=None, overrides=None) -> dict:
    """Layered merge: DEFAULTS < file < overrides. Unknown keys rejected."""
    doc = dict(DEFAULTS)
    if file_path is None:
        file_path = os.environ.get(ENV_CONFIG_PATH) or None
    layers = []
    if file_path:
        layers.append(load_file(file_path))
    if overrides:
        layers.append({k: _parse_value(str(v)) if isinstance(v, str) else v
                       for k, v in overrides.items()})
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            doc[key] = value
    return doc


def parse_set_args(pairs) -> dict:
    """Turn ['a.b=1', ...] override arguments into a dict."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value: {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


# -- dataclass builders ------------------------------------------------------

def lot_config(doc: dict) -> LotConfig:
    return LotConfig(
        slots_per_side=int(doc["lot.slots_per_side"]),
        occupancy_rate=float(doc["lot.occupancy_rate"]),
        lane_width=float(doc["lot.lane_width"]),
        rng_seed=int(doc["lot.rng_seed"]),
    )


def expert_config(doc: dict) -> ExpertConfig:
    return ExpertConfig(
        turn_radius_margin=float(doc["expert.turn_radius_margin"]),
        max_attempts=int(doc["expert.max_attempts"]),
        gains=stanley_gains(doc),
    )


def relabel_config(doc: dict) -> RelabelConfig:
    return RelabelConfig(
        T_p=int(doc["relabel.t_p"]),
        T_exp=int(doc["relabel.t_exp"]),
        iou_keep_plan=float(doc["relabel.iou_keep_plan"]),
        swap_branch=bool(doc["relabel.swap_branch"]),
    )


def fusion_config(doc: dict) -> FusionConfig:
    return FusionConfig(
        epochs=int(doc["fusion.epochs"]),
        lr=float(doc["fusion.lr"]),
        batch=int(doc["fusion.batch"]),
        target_class_weight=float(doc["fusion.target_class_weight"]),
        film_from_target=bool(doc["fusion.film_from_target"]),
    )


def cond_mode(doc: dict) -> CondMode:
    name = str(doc["diffusion.mode"]).lower()
    if name in ("seg_only", "segonly", "seg"):
        return CondMode.SegOnly
    if name in ("emb_plus_seg", "embplusseg", "emb"):
        return CondMode.EmbPlusSeg
    raise ConfigError(f"unknown diffusion.mode: {doc['diffusion.mode']}")


def denoiser_config(doc: dict) -> DenoiserConfig:
    return DenoiserConfig(
        mode=cond_mode(doc),
        n_w=int(doc["dataset.n_w"]),
        epochs=int(doc["diffusion.epochs"]),
        lr=float(doc["diffusion.lr"]),
        batch=int(doc["diffusion.batch"]),
        sigma=str(doc["diffusion.sigma"]),
    )


def stanley_gains(doc: dict) -> StanleyGains:
    return StanleyGains(
        k_e=float(doc["gains.k_e"]),
        k_y=float(doc["gains.k_y"]),
        lookahead_n=int(doc["gains.lookahead_n"]),
        v_soft=float(doc["gains.v_soft"]),
    )


def harness_config(doc: dict) -> HarnessConfig:
    return replace(
        HarnessConfig(),
        timeout=float(doc["harness.timeout"]),
        replan_waypoints=int(doc["harness.replan_waypoints"]),
        deviation_limit=float(doc["harness.deviation_limit"]),
        gains=stanley_gains(doc),
    )
