"""Video dataset distillation with a temporal saliency filter.

The compiled core does the work; this package adds a dict-friendly config
path so callers are not forced to hand-serialize JSON.
"""

import json as _json

from tsgf._core import (
    build_mask,
    default_config,
    frame_differences,
    gated_augment,
    saliency_profile,
    smooth_saliency,
)
from tsgf import _core


def _as_json(config):
    if isinstance(config, dict):
        return _json.dumps(config)
    return str(config)


def gen_data(config):
    """Generate the toy dataset. `config` is a dict or a JSON string."""
    return _core.gen_data(_as_json(config))


def train_teacher(config):
    """Train and checkpoint the frozen teacher."""
    return _core.train_teacher(_as_json(config))


def distill(config):
    """Distill a synthetic set with the saved teacher."""
    return _core.distill(_as_json(config))


def evaluate(config, cross_arch=False):
    """Train students on the distilled set and report accuracy."""
    return _core.evaluate(_as_json(config), cross_arch)


def ablate(config, suite):
    """Run one ablation suite; returns the printed table."""
    return _core.ablate(_as_json(config), suite)


def run_all(config, cross_arch=False):
    """Full pipeline: gen-data, train-teacher, distill, evaluate."""
    return _core.run_all(_as_json(config), cross_arch)


__all__ = [
    "build_mask",
    "default_config",
    "frame_differences",
    "gated_augment",
    "saliency_profile",
    "smooth_saliency",
    "gen_data",
    "train_teacher",
    "distill",
    "evaluate",
    "ablate",
    "run_all",
]
