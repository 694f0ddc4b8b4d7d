"""Branched residual network ensembles.

Thin layer over the compiled core. Model configs may be passed as dicts
(either the "model" section or a whole experiment config) or JSON text.
"""

import json

from . import _branchnet
from ._branchnet import (
    ConfigError,
    FormatError,
    conv2d,
    ensemble_probs,
    epoch_shuffle,
    generate_synthetic,
    lr_at_epoch,
    relative_improvement,
    smooth_labels,
    softmax,
    top_k_error,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "block_topology",
    "conv2d",
    "count_parameters",
    "ensemble_probs",
    "epoch_shuffle",
    "generate_synthetic",
    "lr_at_epoch",
    "relative_improvement",
    "smooth_labels",
    "softmax",
    "top_k_error",
]


def _as_json(config):
    return config if isinstance(config, str) else json.dumps(config)


def block_topology(config):
    return _branchnet.block_topology(_as_json(config))


def count_parameters(config):
    return _branchnet.count_parameters(_as_json(config))
