"""Run configuration: strict key=value files and their resolved echo.

Every key is optional and has a documented default. Unknown keys, bad
values, duplicates and out-of-range settings are rejected with the key name
and line number, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .stats_bank import DIRECTIONS, TARGET_MINUS_SOURCE
from .synth_data import SOURCE_DEFAULT, TARGET_DEFAULT, DomainSpec
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "render_config"]


class ConfigError(Exception):
    """Invalid run configuration (unknown key, bad value, bad range)."""


@dataclass
class RunConfig:
    """All tunables of the pipeline, dataset and CLI in one place."""

    # model / loss
    feature_dim: int = 16
    n_classes: int = 3
    beta: float = 0.4
    alpha_max: float = 0.5
    ramp_steps: int = -1  # -1 resolves to iterations // 2
    direction: str = TARGET_MINUS_SOURCE
    tau: float = 0.95
    lambda_teacher: float = 0.99
    stats_momentum: float = 0.99
    # optimization
    lr: float = 0.05
    sgd_momentum: float = 0.0
    iterations: int = 4000
    batch_labeled: int = 1
    batch_unlabeled: int = 1
    seed: int = 0
    w_l: float = 1.0
    w_u: float = 0.5
    eval_interval: int = 1000
    # dataset geometry
    height: int = 64
    width: int = 64
    n_source: int = 100
    n_target: int = 100
    labeled_fraction: float = 0.05
    # domain intensity transforms
    source_gain: float = SOURCE_DEFAULT.gain
    source_offset: float = SOURCE_DEFAULT.offset
    source_gamma: float = SOURCE_DEFAULT.gamma
    source_noise_sigma: float = SOURCE_DEFAULT.noise_sigma
    source_bias_amp: float = SOURCE_DEFAULT.bias_field_amp
    target_gain: float = TARGET_DEFAULT.gain
    target_offset: float = TARGET_DEFAULT.offset
    target_gamma: float = TARGET_DEFAULT.gamma
    target_noise_sigma: float = TARGET_DEFAULT.noise_sigma
    target_bias_amp: float = TARGET_DEFAULT.bias_field_amp
    # paths
    data_dir: str = "data"
    checkpoint: str = ""
    # verification / export budgets
    mc_samples: int = 100000
    export_samples: int = 2000

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                feature_dim=self.feature_dim,
                n_classes=self.n_classes,
                beta=self.beta,
                lambda_teacher=self.lambda_teacher,
                stats_momentum=self.stats_momentum,
                tau=self.tau,
                alpha_max=self.alpha_max,
                ramp_steps=None if self.ramp_steps < 0 else self.ramp_steps,
                direction=self.direction,
                lr=self.lr,
                sgd_momentum=self.sgd_momentum,
                iterations=self.iterations,
                batch_labeled=self.batch_labeled,
                batch_unlabeled=self.batch_unlabeled,
                seed=self.seed,
                w_l=self.w_l,
                w_u=self.w_u,
                eval_interval=self.eval_interval,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def source_spec(self) -> DomainSpec:
        return DomainSpec(
            self.source_gain,
            self.source_offset,
            self.source_gamma,
            self.source_noise_sigma,
            self.source_bias_amp,
        )

    def target_spec(self) -> DomainSpec:
        return DomainSpec(
            self.target_gain,
            self.target_offset,
            self.target_gamma,
            self.target_noise_sigma,
            self.target_bias_amp,
        )


def _parse_int(s: str) -> int:
    return int(s, 10)


def _parse_float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _parse_str(s: str) -> str:
    return s


# key -> (converter, range predicate, human-readable range)
_RANGES = {
    "feature_dim": (_parse_int, lambda v: v >= 1, ">= 1"),
    "n_classes": (_parse_int, lambda v: 2 <= v <= 4, "in 2..4"),
    "beta": (_parse_float, lambda v: v >= 0, ">= 0"),
    "alpha_max": (_parse_float, lambda v: v >= 0, ">= 0"),
    "ramp_steps": (_parse_int, lambda v: v >= -1, ">= 0, or -1 for iterations/2"),
    "direction": (_parse_str, lambda v: v in DIRECTIONS, f"one of {DIRECTIONS}"),
    "tau": (_parse_float, lambda v: 0 < v <= 1, "in (0, 1]"),
    "lambda_teacher": (_parse_float, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "stats_momentum": (_parse_float, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "lr": (_parse_float, lambda v: v > 0, "> 0"),
    "sgd_momentum": (_parse_float, lambda v: 0 <= v < 1, "in [0, 1)"),
    "iterations": (_parse_int, lambda v: v >= 1, ">= 1"),
    "batch_labeled": (_parse_int, lambda v: v >= 1, ">= 1"),
    "batch_unlabeled": (_parse_int, lambda v: v >= 0, ">= 0"),
    "seed": (_parse_int, lambda v: v >= 0, ">= 0"),
    "w_l": (_parse_float, lambda v: v > 0, "> 0"),
    "w_u": (_parse_float, lambda v: v >= 0, ">= 0"),
    "eval_interval": (_parse_int, lambda v: v >= 1, ">= 1"),
    "height": (_parse_int, lambda v: v >= 32, ">= 32"),
    "width": (_parse_int, lambda v: v >= 32, ">= 32"),
    "n_source": (_parse_int, lambda v: v >= 1, ">= 1"),
    "n_target": (_parse_int, lambda v: v >= 0, ">= 0"),
    "labeled_fraction": (_parse_float, lambda v: 0 < v <= 1, "in (0, 1]"),
    "source_gain": (_parse_float, lambda v: True, "any"),
    "source_offset": (_parse_float, lambda v: True, "any"),
    "source_gamma": (_parse_float, lambda v: v > 0, "> 0"),
    "source_noise_sigma": (_parse_float, lambda v: v >= 0, ">= 0"),
    "source_bias_amp": (_parse_float, lambda v: v >= 0, ">= 0"),
    "target_gain": (_parse_float, lambda v: True, "any"),
    "target_offset": (_parse_float, lambda v: True, "any"),
    "target_gamma": (_parse_float, lambda v: v > 0, "> 0"),
    "target_noise_sigma": (_parse_float, lambda v: v >= 0, ">= 0"),
    "target_bias_amp": (_parse_float, lambda v: v >= 0, ">= 0"),
    "data_dir": (_parse_str, lambda v: bool(v), "nonempty"),
    "checkpoint": (_parse_str, lambda v: True, "any"),
    "mc_samples": (_parse_int, lambda v: v >= 2, ">= 2"),
    "export_samples": (_parse_int, lambda v: v >= 1, ">= 1"),
}

_FIELD_ORDER = [f.name for f in fields(RunConfig)]
assert set(_FIELD_ORDER) == set(_RANGES), "config schema out of sync"


def parse_config(path) -> RunConfig:
    """Parse a key=value file into a RunConfig; unset keys keep defaults."""
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value (line {lineno})")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _RANGES:
            raise ConfigError(f"unknown key '{key}' (line {lineno})")
        if key in values:
            raise ConfigError(f"duplicate key '{key}' (line {lineno})")
        conv, pred, rng = _RANGES[key]
        try:
            v = conv(val)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}' (line {lineno}): {e}") from e
        if not pred(v):
            raise ConfigError(f"'{key}' out of range (line {lineno}): must be {rng}")
        values[key] = v
    cfg = RunConfig(**values)
    cfg.train_config()  # cross-field validation
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Echo text with every key resolved, reproducing the run exactly."""
    lines = []
    for name in _FIELD_ORDER:
        v = getattr(cfg, name)
        if name == "ramp_steps" and v < 0:
            v = cfg.iterations // 2
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"
