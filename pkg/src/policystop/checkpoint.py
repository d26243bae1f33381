"""Single-file detector checkpoints.

A checkpoint is one JSON record: a format version, the detector kind, its
config echo, layer descriptors, the frozen normalization statistics, and the
flat parameter vector(s) as base64 little-endian float64 bytes, so reloads
are bit-exact.
"""

from __future__ import annotations

import json

FORMAT_VERSION = 1


def _model_classes():
    from .baselines import VaeModel, WindowedModel
    from .esp import EnsembleModel
    from .flow import FlowModel

    return {
        "esp-single": EnsembleModel,
        "esp-subtraj": EnsembleModel,
        "wm-flow": FlowModel,
        "raw-flow": FlowModel,
        "vae": VaeModel,
        "windowed": WindowedModel,
    }


def save_detector(model, path) -> None:
    rec = model.to_record()
    rec["format_version"] = FORMAT_VERSION
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rec, f)
        f.write("\n")


def load_detector(path):
    with open(path, "r", encoding="utf-8") as f:
        rec = json.load(f)
    version = rec.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    kinds = _model_classes()
    kind = rec.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown detector kind {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind].from_record(rec)
