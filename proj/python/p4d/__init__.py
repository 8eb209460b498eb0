"""Python front end for the p4d C++ core.

Configs and reports cross the boundary as JSON, so they come back as plain dicts.
"""

import json
import os

from . import _core
from ._core import DivergenceError, MisalignedInput, Scene, hungarian, read_predictions, read_scene

__version__ = _core.__version__

__all__ = [
    "DivergenceError",
    "MisalignedInput",
    "Scene",
    "evaluate",
    "generate",
    "generate_scene",
    "hungarian",
    "infer",
    "load_config",
    "read_predictions",
    "read_scene",
    "run_eval",
    "train",
    "train_tam",
]


def load_config(path=None, overrides=()):
    """Validated run config as a dict; `overrides` are "a.b=value" strings."""
    return json.loads(_core._load_config(os.fspath(path) if path else "", list(overrides)))


def generate_scene(seed, scene_config=None):
    return _core._generate_scene(json.dumps(scene_config or {}), seed)


def evaluate(pred_cls, pred_track, gt_cls, gt_track, thing, ignore_class=None, oracle=False):
    """Metric report for per-frame label arrays. `oracle=True` uses the brute-force evaluator."""
    return json.loads(_core._evaluate(pred_cls, pred_track, gt_cls, gt_track, list(thing), ignore_class, oracle))


def generate(config, out):
    _core._generate(json.dumps(config), os.fspath(out))


def train(config, data, out):
    _core._train(json.dumps(config), os.fspath(data), os.fspath(out))


def train_tam(config, data, stage1, out):
    _core._train_tam(json.dumps(config), os.fspath(data), os.fspath(stage1), os.fspath(out))


def infer(config, stage1, scenes, out, tam=None, baseline_iou=False):
    _core._infer(json.dumps(config), os.fspath(stage1), os.fspath(tam) if tam else "", os.fspath(scenes),
                 os.fspath(out), baseline_iou)


def run_eval(pred, gt, out, oracle=False):
    return json.loads(_core._eval(os.fspath(pred), os.fspath(gt), os.fspath(out), oracle))
