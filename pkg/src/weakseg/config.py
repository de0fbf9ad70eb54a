"""
config.py

Pipeline configuration.

PipelineConfig carries every tunable constant of the pipeline. Its defaults
are the reference training settings (HU windows, crop sizes, Adam with
weight decay and cosine annealing, 150 epochs, batch size 1, weak-loss weight
0.5); desk_scale() returns the preset sized for the synthetic phantoms.

File format: UTF-8 text, one "key = value" per line, "#" starts a comment,
tuples are written comma-separated:

    liver_window = -150.0, 250.0
    tumor_crop = 256, 256, 32
    epochs = 150
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfig, IoError
from .losses import FocalParams, LossWeights
from .postprocess import ContourConfig
from .preprocess import HuWindow
from .segmenter import TrainingConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline settings; see the module docstring for the file format."""

    liver_window: tuple = (-150.0, 250.0)
    tumor_window: tuple = (-200.0, 250.0)
    liver_crop: tuple = (512, 512, 16)
    tumor_crop: tuple = (256, 256, 32)
    bbox_margin: int = 2
    lambda_focal: float = 1.0
    lambda_dice: float = 1.0
    lambda_weak: float = 0.5
    focal_gamma: float = 2.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 150
    batch_size: int = 1
    threshold: float = 0.5
    contour_iterations: int = 2
    contour_lambda1: float = 1.0
    contour_lambda2: float = 1.0
    contour_smoothing: int = 1
    k_folds: int = 5
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(f.default, (tuple, int, float)) or isinstance(f.default, bool):
                continue
            try:
                if isinstance(f.default, tuple):
                    value = tuple(type(f.default[0])(v) for v in value)
                else:
                    value = type(f.default)(value)
            except (TypeError, ValueError) as exc:
                raise InvalidConfig(f"{f.name}: bad value {value!r}") from exc
            if isinstance(f.default, tuple) and len(value) != len(f.default):
                raise InvalidConfig(f"{f.name} needs {len(f.default)} values, got {value}")
            object.__setattr__(self, f.name, value)
        self._validate()

    def _validate(self):
        for name in ("liver_window", "tumor_window"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidConfig(f"{name} needs lo < hi, got ({lo}, {hi})")
        for name in ("liver_crop", "tumor_crop"):
            if min(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} entries must be >= 1")
        weights = (self.lambda_focal, self.lambda_dice, self.lambda_weak)
        if min(weights) < 0 or max(weights) <= 0:
            raise InvalidConfig(f"loss weights must be >= 0 and not all 0, got {weights}")
        checks = {
            "focal_gamma": self.focal_gamma >= 0,
            "learning_rate": self.learning_rate > 0,
            "weight_decay": self.weight_decay >= 0,
            "epochs": self.epochs >= 1,
            "batch_size": self.batch_size == 1,
            "threshold": 0 < self.threshold < 1,
            "bbox_margin": self.bbox_margin >= 0,
            "contour_iterations": self.contour_iterations >= 0,
            "contour_lambda1": self.contour_lambda1 >= 0,
            "contour_lambda2": self.contour_lambda2 >= 0,
            "contour_smoothing": self.contour_smoothing >= 0,
            "k_folds": self.k_folds >= 2,
        }
        for name, ok in checks.items():
            if not ok:
                raise InvalidConfig(f"{name} = {getattr(self, name)!r} is out of range")

    @classmethod
    def desk_scale(cls, **overrides):
        """Preset for 64x64x32 phantoms: smaller crops, a larger step, 60 epochs."""
        settings = dict(liver_crop=(64, 64, 32), tumor_crop=(48, 40, 28), learning_rate=5e-2,
                        epochs=60)
        settings.update(overrides)
        return cls(**settings)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def window(self, task):
        """HuWindow of the "liver" or "tumor" task."""
        lo, hi = self.liver_window if task == "liver" else self.tumor_window
        return HuWindow(lo, hi)

    def loss_weights(self, lambda_weak=None):
        weak = self.lambda_weak if lambda_weak is None else lambda_weak
        return LossWeights(self.lambda_focal, self.lambda_dice, weak)

    def contour(self, iterations=None):
        return ContourConfig(
            self.contour_iterations if iterations is None else iterations,
            self.contour_lambda1,
            self.contour_lambda2,
            self.contour_smoothing,
        )

    def training(self, lambda_weak=None, seed=None, epochs=None):
        """TrainingConfig for one segmenter."""
        return TrainingConfig(
            epochs=self.epochs if epochs is None else epochs,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed,
            weights=self.loss_weights(lambda_weak),
            focal=FocalParams(self.focal_gamma),
            threshold=self.threshold,
        )


# ______________________________________________________________________________
# File format


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg):
    lines = ["# weakseg pipeline configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(name, text, default):
    try:
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",")]
            return tuple(type(default[0])(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise InvalidConfig(f"{name}: cannot parse {text!r}") from exc
    return text


def loads_config(text, base=None):
    """
    Parse configuration text; keys not given keep the values of `base`.

    Raises:
        InvalidConfig: unknown key, malformed line or out-of-range value.
    """
    base = base or PipelineConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    changes = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise InvalidConfig(f"line {number}: unknown key {key!r}")
        changes[key] = _parse_value(key, value, defaults[key])
    return dataclasses.replace(base, **changes)


def dump_config(cfg, path):
    try:
        Path(path).write_text(dumps_config(cfg), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_config(path, base=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    cfg = loads_config(text, base)
    logger.debug("loaded configuration from %s", path)
    return cfg
