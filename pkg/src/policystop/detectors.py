"""Uniform train/score surface over the four detector families.

Every detector model exposes the same contract: ``kind``, ``score(sub)``,
``score_prefixes(states, actions)``, ``config_echo()`` and checkpoint
records, so the eval harness, the monitor and the CLI treat them
interchangeably.
"""

from __future__ import annotations

from dataclasses import fields

from .baselines import VaeConfig, WindowedConfig, train_vae, train_windowed
from .episodes import Dataset
from .esp import EspConfig, train_ensemble
from .flow import FlowTrainConfig, train_wm_flow

DETECTOR_KINDS = ("esp-single", "esp-subtraj", "wm-flow", "raw-flow", "vae", "windowed")


def _build_config(cls, overrides: dict, forced: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = set(overrides) - allowed
    if unknown:
        raise ValueError(
            f"unknown {cls.__name__} option(s) {sorted(unknown)}; "
            f"valid options: {sorted(allowed)}"
        )
    merged = dict(overrides)
    merged.update(forced)
    return cls(**merged)


def default_config(kind: str, overrides: dict | None = None, seed: int = 0):
    """Config dataclass for a detector kind with validated overrides applied."""
    overrides = dict(overrides or {})
    overrides.setdefault("seed", seed)
    if kind == "esp-single":
        return _build_config(EspConfig, overrides, {"mode": "single_step"})
    if kind == "esp-subtraj":
        return _build_config(EspConfig, overrides, {"mode": "sub_trajectory"})
    if kind == "wm-flow":
        return _build_config(FlowTrainConfig, overrides, {"masking_enabled": True})
    if kind == "raw-flow":
        return _build_config(FlowTrainConfig, overrides, {"masking_enabled": False})
    if kind == "vae":
        return _build_config(VaeConfig, overrides, {})
    if kind == "windowed":
        return _build_config(WindowedConfig, overrides, {})
    raise ValueError(f"unknown detector kind {kind!r}; choose from {DETECTOR_KINDS}")


def train_detector(kind: str, data: Dataset, overrides: dict | None = None,
                   seed: int = 0):
    """Train one detector of the given kind on ``data``."""
    cfg = default_config(kind, overrides, seed)
    if kind in ("esp-single", "esp-subtraj"):
        return train_ensemble(data, cfg)
    if kind in ("wm-flow", "raw-flow"):
        return train_wm_flow(data, cfg)
    if kind == "vae":
        return train_vae(data, cfg)
    return train_windowed(data, cfg)
