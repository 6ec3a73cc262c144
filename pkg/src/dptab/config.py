"""Run configuration: flat dotted keys, file + command-line overrides.

Config files are lines of `key = value` (# starts a comment). Values are
typed by the key's default; `none` clears an optional. The effective
configuration is hashed (sha256, 12 hex chars) and stamped into every
output so artifacts can be traced to their settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Mapping

from .trainer import StageOneConfig, StageTwoConfig, TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, type); type is consulted when parsing override strings
_SPEC: dict[str, tuple[object, type]] = {
    "seed": (None, int),
    "mode": ("two_stage", str),
    "model.embed_dim": (128, int),
    "model.num_layers": (4, int),
    "model.num_heads": (4, int),
    "model.ffn_dim": (512, int),
    "model.context_length": (256, int),
    "model.adapter_rank": (0, int),
    "model.dropout_prob": (0.0, float),
    "loss.alpha": (0.65, float),
    "loss.beta": (1.0, float),
    "loss.nul_mode": ("soft_digit", str),
    "loss.lambda_mode": ("range", str),
    "stage1.epochs": (5, int),
    "stage1.learning_rate": (1e-4, float),
    "stage1.batch_size": (64, int),
    "stage1.random_rows": (None, int),
    "stage2.epochs": (4, int),
    "stage2.learning_rate": (5e-4, float),
    "stage2.expected_batch_size": (128, int),
    "stage2.epsilon": (1.0, float),
    "stage2.delta": (1e-6, float),
    "stage2.clip_norm": (1.0, float),
    "stage2.noise_multiplier": (None, float),
    "stage2.non_private": (False, bool),
    "train.eval_fraction": (0.05, float),
    "train.eval_max_rows": (256, int),
    "train.probe_rows": (200, int),
    "train.probe_temperature": (1.0, float),
    "train.grad_chunk": (32, int),
    "sample.temperature": (1.0, float),
    "sample.max_retries": (8, int),
    "eval.quantile_groups": (20, int),
    "eval.tvd_max_subsets": (2000, int),
    "eval.dcr_bins": (50, int),
    "eval.folds": (5, int),
    "eval.full_grid": (False, bool),
    "eval.downstream": (True, bool),
    "prepare.train_fraction": (0.8, float),
}


def _parse_value(key: str, text: str) -> object:
    if key not in _SPEC:
        raise ConfigError(f"unknown config key {key!r}")
    _, typ = _SPEC[key]
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if typ is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: {text!r} is not a boolean")
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: {text!r} is not a valid {typ.__name__}") from None


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, object]

    @classmethod
    def build(
        cls,
        file_path: str | None = None,
        overrides: Mapping[str, str] | None = None,
    ) -> "RunConfig":
        values = {k: v for k, (v, _) in _SPEC.items()}
        if file_path is not None:
            for k, v in read_config_file(file_path).items():
                values[k] = _parse_value(k, v)
        for k, v in (overrides or {}).items():
            values[k] = _parse_value(k, v)
        return cls(values=values)

    def __getitem__(self, key: str) -> object:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def seed(self) -> int:
        s = self["seed"]
        if s is None:
            raise ConfigError("seed is mandatory: pass --seed or set seed=")
        return int(s)

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed(),
            mode=str(self["mode"]),
            embed_dim=int(self["model.embed_dim"]),
            num_layers=int(self["model.num_layers"]),
            num_heads=int(self["model.num_heads"]),
            ffn_dim=int(self["model.ffn_dim"]),
            context_length=int(self["model.context_length"]),
            adapter_rank=int(self["model.adapter_rank"]),
            dropout_prob=float(self["model.dropout_prob"]),
            alpha=float(self["loss.alpha"]),
            beta=float(self["loss.beta"]),
            nul_mode=str(self["loss.nul_mode"]),
            lambda_mode=str(self["loss.lambda_mode"]),
            stage1=StageOneConfig(
                epochs=int(self["stage1.epochs"]),
                learning_rate=float(self["stage1.learning_rate"]),
                batch_size=int(self["stage1.batch_size"]),
                random_rows=(
                    None
                    if self["stage1.random_rows"] is None
                    else int(self["stage1.random_rows"])
                ),
            ),
            stage2=StageTwoConfig(
                epochs=int(self["stage2.epochs"]),
                learning_rate=float(self["stage2.learning_rate"]),
                expected_batch_size=int(self["stage2.expected_batch_size"]),
                epsilon=float(self["stage2.epsilon"]),
                delta=float(self["stage2.delta"]),
                clip_norm=float(self["stage2.clip_norm"]),
                noise_multiplier=(
                    None
                    if self["stage2.noise_multiplier"] is None
                    else float(self["stage2.noise_multiplier"])
                ),
                non_private=bool(self["stage2.non_private"]),
            ),
            eval_fraction=float(self["train.eval_fraction"]),
            eval_max_rows=int(self["train.eval_max_rows"]),
            probe_rows=int(self["train.probe_rows"]),
            probe_temperature=float(self["train.probe_temperature"]),
            grad_chunk=int(self["train.grad_chunk"]),
        )
