"""Python bindings for the mtperson multi-task person model."""

import json as _json

import torch as _torch  # noqa: F401  loads the libtorch shared libraries first

from . import _core
from ._core import Error, generate_synthetic, pckh, reid_eval, triplet_loss

__all__ = ["Error", "evaluate", "generate_synthetic", "load_manifest", "pckh", "reid_eval", "train", "triplet_loss"]


def load_manifest(path):
    return _json.loads(_core.manifest_json(str(path)))


def train(config, run_dir, base_dir="."):
    """Trains from a config dict; returns the final metric report as a dict."""
    return _json.loads(_core.train(_json.dumps(config), str(base_dir), str(run_dir)))


def evaluate(checkpoint, manifest, tasks):
    return _json.loads(_core.evaluate(str(checkpoint), str(manifest), list(tasks)))
